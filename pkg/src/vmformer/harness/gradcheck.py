"""End-to-end gradient check of a small model against central differences."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import ModelConfig
from ..model import build
from ..tensor import Tensor, backward, record_branches

GROUPS = ("stem", "mobile", "bridges", "former", "dyrelu", "head", "tokens")

# Small enough for a few thousand double-precision forwards; every stage runs
# a full block and both token paths are exercised.
GRADCHECK_CONFIG = ModelConfig(
    blocks_per_stage=(1, 1, 1, 1),
    base_dim=4,
    resolution=16,
    frames=8,
    temporal_stride=4,
    token_count=2,
    token_dim=8,
    heads=2,
    num_classes=3,
)


def param_group(name):
    parts = name.split(".")
    if parts[0] in ("stem", "head", "tokens"):
        return parts[0]
    sub = parts[2]
    if sub.startswith("bridge"):
        return "bridges"
    return sub


@dataclass
class GroupResult:
    max_rel_error: float
    worst: str
    checked: int
    passed: bool
    skipped: int = 0


@dataclass
class GradcheckReport:
    tolerance: float
    groups: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(g.passed for g in self.groups.values())

    def worst_offender(self):
        bad = [(g.max_rel_error, k, g.worst) for k, g in self.groups.items() if not g.passed]
        return max(bad) if bad else None

    def to_text(self):
        lines = []
        for k, g in self.groups.items():
            lines.append(
                f"{k}: max_rel_error={g.max_rel_error:.3e} checked={g.checked} "
                f"skipped={g.skipped} worst={g.worst} {'PASS' if g.passed else 'FAIL'}"
            )
        status = "PASS" if self.passed else f"FAIL worst={self.worst_offender()[2]}"
        lines.append(f"tolerance={self.tolerance:g} {status}")
        return "\n".join(lines) + "\n"

    def to_records(self):
        return [
            {"group": k, "max_rel_error": g.max_rel_error, "worst": g.worst, "checked": g.checked, "skipped": g.skipped, "pass": g.passed}
            for k, g in self.groups.items()
        ]


# Central differences carry ~1e-10 absolute error here; below this magnitude a
# relative error says nothing about the gradient.
REL_FLOOR = 1e-5


def rel_error(a, b, floor=REL_FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)



def gradcheck(config=None, tolerance=1e-4, frozen=(), seed=0, entries=4, h=1e-5, batch=2):
    """Compare autodiff and central differences for ``entries`` sampled entries per tensor.

    All weights are perturbed away from their initial values first, so that
    zero-initialized layers (the activation generator's output layer) do not
    hide the gradients of everything behind them. Groups named in ``frozen``
    are neither checked nor reported.
    """
    cfg = config if config is not None else GRADCHECK_CONFIG
    unknown = set(frozen) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter group(s) {sorted(unknown)}; choose from {GROUPS}")
    model = build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    params = model.parameters()
    for name in sorted(params):
        p = params[name]
        p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    clip = rng.uniform(0.0, 1.0, size=(batch, 3, cfg.frames, cfg.resolution, cfg.resolution))
    weights = rng.normal(size=(batch, cfg.num_classes))

    def loss_value():
        # (loss, branch masks of every ReLU / DY-ReLU element)
        with record_branches() as log:
            out = model.forward(Tensor(clip)).data
        return float(np.sum(out * weights)), log

    def same_branches(a, b):
        return all(np.array_equal(x, y) for x, y in zip(a, b))

    logits = model.forward(Tensor(clip))
    grads = backward((logits * Tensor(weights)).sum(), params)

    report = GradcheckReport(tolerance)
    for group in GROUPS:
        if group in frozen:
            continue
        names = [n for n in sorted(params) if param_group(n) == group]
        if not names:
            continue
        worst, worst_name, checked, skipped = 0.0, "", 0, 0
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            want = min(entries, flat.size)
            done = 0
            for i in rng.permutation(flat.size):
                if done == want:
                    break
                orig = flat[i]
                flat[i] = orig + h
                up, up_branches = loss_value()
                flat[i] = orig - h
                down, down_branches = loss_value()
                flat[i] = orig
                if not same_branches(up_branches, down_branches):
                    skipped += 1
                    continue
                err = rel_error(grads[name].reshape(-1)[i], (up - down) / (2 * h))
                checked += 1
                done += 1
                if err > worst or not math.isfinite(err):
                    worst, worst_name = err, f"{name}{[int(j) for j in np.unravel_index(i, p.shape)]}"
        report.groups[group] = GroupResult(worst, worst_name, checked, worst <= tolerance, skipped)
    return report
