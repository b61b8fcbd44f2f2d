"""SGD training loop and single-clip evaluation."""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import Tensor, backward, no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"  # or "constant"
    clip_norm: float = 5.0  # 0 disables

    def to_dict(self):
        return asdict(self)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; ``labels`` is an int array."""
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return (logits.log_softmax(-1) * Tensor(onehot)).sum() * (-1.0 / n)


def _lr_at(cfg, step, total):
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


def topk_correct(logits, labels, k):
    # Stable sort on negated logits: ties go to the lower class index.
    order = np.argsort(-np.asarray(logits), axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def predict(model, clips, batch_size=64):
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            out.append(model.forward(clips[i : i + batch_size]).data)
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, batch_size=64):
    """{'top1', 'top5'} as fractions in [0, 1]."""
    logits = predict(model, dataset.clips, batch_size)
    k5 = min(5, logits.shape[1])
    return {
        "top1": float(topk_correct(logits, dataset.labels, 1).mean()),
        "top5": float(topk_correct(logits, dataset.labels, k5).mean()),
    }


def train(model, dataset, cfg, eval_set=None, log=None):
    """Train in place. Returns per-epoch records (epoch, loss, top1, top5, lr).

    top1/top5 are measured on ``eval_set`` when given, else on the training data.
    ``log`` receives each record as a JSON line.
    """
    k = model.config.num_classes
    if dataset.num_classes != k:
        raise ValueError(f"model has {k} classes, dataset {dataset.task_id} has {dataset.num_classes}")
    if cfg.schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {cfg.schedule!r}")
    params = model.parameters()
    names = sorted(params)
    velocity = {n: np.zeros_like(params[n].data) for n in names}
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    if log is not None:
        log(json.dumps({"train_config": cfg.to_dict()}, sort_keys=True))
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss = cross_entropy(model.forward(dataset.clips[idx]), dataset.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch} step {b} (lr={_lr_at(cfg, step, total)})")
            loss_sum += value * len(idx)
            for p in params.values():
                p.grad = None
            grads = backward(loss, params)
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                scale = min(1.0, cfg.clip_norm / (norm + 1e-12))
            else:
                scale = 1.0
            lr = _lr_at(cfg, step, total)
            for name in names:
                p, g = params[name], grads[name]
                v = velocity[name]
                v *= cfg.momentum
                v += g * scale + cfg.weight_decay * p.data
                p.data = p.data - (lr * v).astype(p.data.dtype)
            step += 1
        metrics = evaluate(model, eval_set if eval_set is not None else dataset)
        rec = {"epoch": epoch + 1, "loss": loss_sum / n, "top1": metrics["top1"], "top5": metrics["top5"]}
        history.append(rec)
        if log is not None:
            log(json.dumps(rec, sort_keys=True))
    return history
