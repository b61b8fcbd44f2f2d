"""Train-then-evaluate runs on a synthetic task with a held-out split."""

from dataclasses import dataclass

from ..model import build
from .data import gen_dataset, num_classes
from .training import TrainConfig, evaluate, train


@dataclass
class Budget:
    n_train: int = 512
    n_test: int = 400
    frames: int = 16
    data_seed: int = 1


def task_datasets(task_id, budget, resolution):
    # The held-out split continues the same clip stream, so the two never share a clip.
    tr = gen_dataset(task_id, budget.n_train, budget.frames, resolution, resolution, budget.data_seed)
    te = gen_dataset(
        task_id, budget.n_test, budget.frames, resolution, resolution, budget.data_seed, start=budget.n_train
    )
    return tr, te


def run_task(cfg, task_id, budget=None, train_cfg=None, init_seed=0, log=None, data=None):
    """Build, train and evaluate. Returns (model, history, held-out metrics)."""
    budget = budget or Budget()
    train_cfg = train_cfg or TrainConfig()
    cfg = cfg.replace(num_classes=num_classes(task_id), frames=budget.frames)
    tr, te = data if data is not None else task_datasets(task_id, budget, cfg.resolution)
    model = build(cfg, seed=init_seed)
    history = train(model, tr, train_cfg, eval_set=te, log=log) if train_cfg.epochs > 0 else []
    return model, history, evaluate(model, te)
