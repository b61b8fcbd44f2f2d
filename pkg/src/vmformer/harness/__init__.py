from .data import TASKS, Dataset, TaskError, derive_label, gen_clip, gen_dataset, load_dataset, save_dataset
from .experiment import Budget, run_task, task_datasets
from .gradcheck import GRADCHECK_CONFIG, GROUPS, GradcheckReport, gradcheck, param_group
from .training import TrainConfig, TrainingDiverged, cross_entropy, evaluate, predict, train

__all__ = [
    "Budget",
    "GRADCHECK_CONFIG",
    "GROUPS",
    "TASKS",
    "Dataset",
    "GradcheckReport",
    "TaskError",
    "TrainConfig",
    "TrainingDiverged",
    "cross_entropy",
    "derive_label",
    "evaluate",
    "gen_clip",
    "gen_dataset",
    "gradcheck",
    "load_dataset",
    "param_group",
    "predict",
    "run_task",
    "save_dataset",
    "task_datasets",
    "train",
]
