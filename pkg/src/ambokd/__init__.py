"""Tri-branch online knowledge distillation with adaptive modality balancing."""

from .amb import AmbConfig, AmbState, dynamic_gradient_ratio, dynamic_weights, progress_ratio, saturate
from .config import RunConfig, load_config
from .data import PairedDataset, PairedSample, SynthSpec, add_noise, generate, load, save, split
from .distill import LossBundle, ce_logit_gradient_oracle, cross_entropy, kd_loss, total_loss
from .errors import (
    AmbokdError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    NumericalError,
    ParameterError,
    StateError,
)
from .model import BRANCHES, BranchOutputs, EncoderSpec, FusionSpec, ThreeBranchModel
from .numerics import ParamSet, Tensor, grad_check
from .optim import ModulatedAdam
from .trainer import (
    EpochReport,
    RunResult,
    StepRecord,
    VariantPlan,
    auc_score,
    dump_embeddings,
    evaluate,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
    train_step,
    variant_plan,
)

__version__ = "0.1.0"
