"""One- and two-level K-FAC natural-gradient training for feed-forward networks."""

from .data import Dataset, gen_planted, load_csv, load_planted, minibatches, save_planted
from .errors import (
    ConfigError,
    DimensionError,
    InputError,
    KfacoptError,
    NumericalError,
    SizeError,
    StateError,
)
from .estimator import KFACClassifier, KFACRegressor
from .network import Architecture, Params, backward, forward, init_params, loss, sample_labels
from .optim import (
    OptimizerConfig,
    evaluate,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    seed_streams,
    train,
)
from .precond import (
    ClipConfig,
    DampingConfig,
    apply_two_level,
    assemble_coarse,
    build_block_inverses,
    coarse_correction,
    kl_clip,
)
from .stats import CovState, cov_memory_report, init_cov, update_cov

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ClipConfig",
    "ConfigError",
    "CovState",
    "DampingConfig",
    "Dataset",
    "DimensionError",
    "InputError",
    "KFACClassifier",
    "KFACRegressor",
    "KfacoptError",
    "NumericalError",
    "OptimizerConfig",
    "Params",
    "SizeError",
    "StateError",
    "__version__",
    "apply_two_level",
    "assemble_coarse",
    "backward",
    "build_block_inverses",
    "coarse_correction",
    "cov_memory_report",
    "evaluate",
    "forward",
    "gen_planted",
    "init_cov",
    "init_params",
    "kl_clip",
    "load_checkpoint",
    "load_csv",
    "load_planted",
    "loss",
    "lr_at",
    "minibatches",
    "sample_labels",
    "save_checkpoint",
    "save_planted",
    "seed_streams",
    "train",
    "update_cov",
]
