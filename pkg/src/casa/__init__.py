"""Context-aware self-adaptation for domain generalization, on a small numpy autodiff."""

from .autodiff import Tensor, backward, grad_check
from .datasets import DomainDataset, SyntheticSpec, generate, load_csv, save_csv, split_holdout
from .harness import ExperimentConfig, ReportRow, report, run_experiment, run_variants
from .inference import EnsembleModel, ensemble_predict, evaluate
from .meta_tasks import MetaTask, TaskSetPolicy, build_task, build_tasks, enumerate_meta_tasks
from .models import CaFiLMParams, ContextVector, MLPAdapter, MLPParams, ModelBundle, cafilm_forward
from .training import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"
