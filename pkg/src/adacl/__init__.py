"""Per-task hyperparameter adaptation for class-incremental learning.

The package trains a dense-feature classifier on a stream of tasks with
disjoint class sets. For every task after the first it can search the
learning rate, regularization strength, and replay-memory size with a
tree-structured Parzen sampler under successive-halving pruning, committing
the best trial before moving on. Fixed-hyperparameter baselines, forgetting
metrics, deterministic persistence, and SVG reports share the same engine.
"""

from .errors import (
    AdaclError,
    ConfigurationError,
    MetricUndefinedError,
    NumericFailureError,
    ShapeError,
    StateError,
    StreamFormatError,
    ValidationError,
)
from .estimator import ContinualClassifier
from .experiment import (
    ExperimentConfig,
    ResultsBundle,
    SeedResult,
    TaskOutcome,
    constancy_schedules,
    load_stream,
    run_experiment,
    run_fixed_baseline,
)
from .hpo import (
    HyperConfig,
    SearchDimension,
    SearchSpace,
    TrialLedger,
    sh_prune_decision,
    sh_rungs,
    suggest,
)
from .metrics import acc, bwt, mean_std
from .report import (
    read_results,
    regenerate_report,
    render_plots,
    write_results,
)
from .stream import (
    StreamSpec,
    TaskDataset,
    generate_stream,
    load_stream_file,
    split_validation,
)
from .version import __version__

__all__ = [
    "AdaclError",
    "ConfigurationError",
    "ContinualClassifier",
    "ExperimentConfig",
    "HyperConfig",
    "MetricUndefinedError",
    "NumericFailureError",
    "ResultsBundle",
    "SearchDimension",
    "SearchSpace",
    "SeedResult",
    "ShapeError",
    "StateError",
    "StreamFormatError",
    "StreamSpec",
    "TaskDataset",
    "TaskOutcome",
    "TrialLedger",
    "ValidationError",
    "__version__",
    "acc",
    "bwt",
    "constancy_schedules",
    "generate_stream",
    "load_stream",
    "load_stream_file",
    "mean_std",
    "read_results",
    "regenerate_report",
    "render_plots",
    "run_experiment",
    "run_fixed_baseline",
    "sh_prune_decision",
    "sh_rungs",
    "split_validation",
    "suggest",
    "write_results",
]
