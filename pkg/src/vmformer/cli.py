"""Command-line entry point: ``vmformer <verb> [options]``."""

import argparse
import json
import sys

from .complexity import CATEGORIES, budget_report, count_flops, layer_table
from .config import FULL_PRESETS, ConfigError, _parse, apply_overrides, load_config, preset
from .container import ContainerError
from .harness import (
    GROUPS,
    Budget,
    TaskError,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    gen_dataset,
    gradcheck,
    run_task,
    task_datasets,
)
from .harness.data import TASKS, num_classes
from .model import build, load_checkpoint, save_checkpoint

VERBS = ("summarize", "flops", "budget", "gradcheck", "train", "eval", "ablate")
AXES = ("token_count", "token_mode", "temporal_stride", "downsample_position", "conv_type", "activation", "former_enabled")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--preset", metavar="NAME", help="named preset (vmf-560m, vmf-1g, vmf-2g, vmf-5g, micro)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, default=0, help="initialization seed")
    p.add_argument("--frames", type=int, help="clip length T (defaults to the config's frames)")
    p.add_argument("--report", choices=("text", "machine"), default="text")


def _training(p):
    p.add_argument("--task", choices=sorted(TASKS), default="flash-order")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)


def make_parser():
    parser = _Parser(prog="vmformer", description="Video Mobile-Former toolkit")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    helps = {
        "summarize": "per-layer shapes, MACs and parameters",
        "flops": "per-category MAC and parameter report",
        "budget": "former-side compute share against the 12% limit",
        "gradcheck": "autodiff vs central differences on a small f64 model",
        "train": "train on a synthetic task",
        "eval": "evaluate a checkpoint on a synthetic task",
        "ablate": "sweep one config axis: params, FLOPs, held-out top-1",
    }
    ps = {v: sub.add_parser(v, help=helps[v]) for v in VERBS}
    for v in VERBS:
        _common(ps[v])
    ps["budget"].add_argument("--all-presets", action="store_true", help="check the four full-size presets")
    ps["gradcheck"].add_argument("--tolerance", type=float, default=1e-4)
    ps["gradcheck"].add_argument("--frozen", action="append", default=[], choices=GROUPS)
    ps["gradcheck"].add_argument("--entries", type=int, default=4, help="entries sampled per tensor")
    _training(ps["train"])
    ps["train"].add_argument("--checkpoint", metavar="PATH", help="save the trained weights here")
    ps["eval"].add_argument("--checkpoint", metavar="PATH", required=True)
    ps["eval"].add_argument("--task", choices=sorted(TASKS), default="flash-order")
    ps["eval"].add_argument("--n-test", type=int, default=400)
    ps["eval"].add_argument("--data-seed", type=int, default=2)
    _training(ps["ablate"])
    ps["ablate"].add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    ps["ablate"].add_argument("--values", required=True, help="comma-separated values")
    return parser


def resolve_config(args, default="micro"):
    if args.config and args.preset:
        raise ConfigError("give --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or default)
    cfg = apply_overrides(cfg, args.overrides)
    if args.frames is not None:
        cfg = cfg.replace(frames=args.frames)
    return cfg.validate()


def _shape(cfg):
    return (1, 3, cfg.frames, cfg.resolution, cfg.resolution)


def _fmt_shape(s):
    return "x".join(str(x) for x in s)


def cmd_summarize(args, emit):
    cfg = resolve_config(args)
    model = build(cfg, seed=args.seed)
    rep, rows = layer_table(model, _shape(cfg))
    if args.report == "machine":
        recs = [{"layer": n, "shape": list(s), "macs": m, "params": p} for n, s, m, p in rows]
        emit(json.dumps({"layers": recs, "categories": rep.to_records()}, sort_keys=True))
        return 0
    emit(f"input {_fmt_shape(rep.input_shape)}")
    emit(f"{'layer':<22}{'output':>18}{'macs':>16}{'params':>12}")
    for name, shp, mac, p in rows:
        emit(f"{name:<22}{_fmt_shape(shp):>18}{mac:>16}{p:>12}")
    emit("")
    emit(f"{'category':<22}{'macs':>16}{'params':>12}")
    for c in CATEGORIES:
        if rep.macs[c] or rep.params[c]:
            emit(f"{c:<22}{rep.macs[c]:>16}{rep.params[c]:>12}")
    emit(f"{'total':<22}{rep.total_macs:>16}{rep.total_params:>12}")
    emit(f"total params {rep.total_params / 1e6:.2f}M, macs {rep.total_macs / 1e9:.3f}G")
    return 0


def cmd_flops(args, emit):
    cfg = resolve_config(args)
    rep = count_flops(build(cfg, seed=args.seed), _shape(cfg))
    emit(rep.to_json() if args.report == "machine" else rep.to_text().rstrip("\n"))
    return 0


def cmd_budget(args, emit):
    if args.all_presets:
        if args.config or args.preset or args.overrides:
            raise ConfigError("--all-presets takes no --config/--preset/--set")
        names = FULL_PRESETS
        cfgs = [preset(n).replace(frames=args.frames or 64) for n in names]
    else:
        cfgs = [resolve_config(args)]
        names = [args.preset or args.config or "micro"]
    recs = []
    for name, cfg in zip(names, cfgs):
        b = budget_report(build(cfg, seed=args.seed), _shape(cfg))
        recs.append({"config": name, "ratio": b["ratio"], "limit": b["limit"], "pass": b["pass"]})
    if args.report == "machine":
        emit(json.dumps(recs, sort_keys=True))
    else:
        for r in recs:
            emit(f"{r['config']}: former_share={r['ratio']:.4f} limit={r['limit']} {'PASS' if r['pass'] else 'FAIL'}")
    return 0 if all(r["pass"] for r in recs) else 1


def cmd_gradcheck(args, emit):
    cfg = None
    if args.config or args.preset or args.overrides or args.frames:
        cfg = resolve_config(args)
    rep = gradcheck(cfg, tolerance=args.tolerance, frozen=args.frozen, seed=args.seed, entries=args.entries)
    emit(json.dumps(rep.to_records(), sort_keys=True) if args.report == "machine" else rep.to_text().rstrip("\n"))
    if not rep.passed:
        err, group, name = rep.worst_offender()
        raise CheckFailed(f"gradcheck failed: group {group} worst {name} rel error {err:.3e} > {args.tolerance:g}")
    return 0


class CheckFailed(Exception):
    pass


def _train_cfg(args):
    return TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _budget(args, cfg):
    return Budget(args.n_train, args.n_test, cfg.frames, args.data_seed)


def cmd_train(args, emit):
    cfg = resolve_config(args).replace(num_classes=num_classes(args.task))
    tcfg = _train_cfg(args)
    log = emit if args.report == "machine" else None
    model, history, metrics = run_task(cfg, args.task, _budget(args, cfg), tcfg, init_seed=args.seed, log=log)
    if args.report == "text":
        emit(" ".join(f"{k}={v}" for k, v in sorted(tcfg.to_dict().items())))
        for h in history:
            emit(f"epoch {h['epoch']}: loss={h['loss']:.6f} top1={h['top1']:.4f} top5={h['top5']:.4f}")
        emit(f"held-out top1={metrics['top1']:.4f} top5={metrics['top5']:.4f}")
    else:
        emit(json.dumps({"final": metrics}, sort_keys=True))
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return 0


def cmd_eval(args, emit):
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    if cfg.num_classes != num_classes(args.task):
        raise ConfigError(f"checkpoint has {cfg.num_classes} classes, task {args.task} has {num_classes(args.task)}")
    ds = gen_dataset(args.task, args.n_test, args.frames or cfg.frames, cfg.resolution, cfg.resolution, args.data_seed)
    m = evaluate(model, ds)
    emit(json.dumps(m, sort_keys=True) if args.report == "machine" else f"top1={m['top1']:.4f} top5={m['top5']:.4f}")
    return 0


def cmd_ablate(args, emit):
    if args.axis not in AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {', '.join(AXES)}")
    base = resolve_config(args).replace(num_classes=num_classes(args.task))
    raw_values = [v for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise ConfigError("--values is empty")
    cfgs = [base.replace(**{args.axis: _parse(args.axis, v)}).validate() for v in raw_values]
    budget = _budget(args, base)
    data = task_datasets(args.task, budget, base.resolution)
    rows = []
    for raw, cfg in zip(raw_values, cfgs):
        _, _, metrics = run_task(cfg, args.task, budget, _train_cfg(args), init_seed=args.seed, data=data)
        rep = count_flops(build(cfg, seed=args.seed), _shape(cfg))
        rows.append(
            {
                "value": raw.strip(),
                "params": rep.total_params,
                "gflops": rep.total_macs / 1e9,
                "top1": metrics["top1"],
                "former_share": rep.former_share(),
                "macs": dict(rep.macs),
            }
        )
    if args.report == "machine":
        for r in rows:
            emit(json.dumps(dict(r, axis=args.axis), sort_keys=True))
    else:
        emit(f"{args.axis:<20}{'params':>10}{'GFLOP-units':>14}{'top1':>8}")
        for r in rows:
            emit(f"{r['value']:<20}{r['params']:>10}{r['gflops']:>14.6f}{r['top1']:>8.4f}")
    return 0


HANDLERS = {
    "summarize": cmd_summarize,
    "flops": cmd_flops,
    "budget": cmd_budget,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}

_REJECTIONS = (UsageError, ConfigError, ContainerError, TaskError, TrainingDiverged, CheckFailed, ValueError, OSError)


def main(argv=None):
    out_lines = []
    try:
        args = make_parser().parse_args(argv)
        status = HANDLERS[args.verb](args, out_lines.append)
        text = "\n".join(out_lines) + "\n"
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
        return status
    except _REJECTIONS as e:
        if out_lines:
            sys.stdout.write("\n".join(out_lines) + "\n")
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"vmformer: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
