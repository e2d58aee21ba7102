"""Calibration-aware test-time prompt tuning on a synthetic CLIP-like encoder."""

__version__ = "0.1.0"

from .calibration import (  # noqa: E402
    CalibrationReport,
    PredictionRecord,
    apply_temperature,
    ece,
    ece_from_arrays,
    fit_temperature,
    make_record,
)
from .dispersion import atfd, atfd_gradient, correlate_prompt_family, pearson, spearman  # noqa: E402
from .errors import CaltuneError, NumericFailure  # noqa: E402
from .numeric import cosine_similarity, entropy, grad_check, l2_normalize, softmax_temperature  # noqa: E402
from .tpt import TuningConfig, ctpt_loss, joint_step, run_episode, run_experiment, sweep_lambda, tpt_loss  # noqa: E402

__all__ = [
    "CalibrationReport",
    "CaltuneError",
    "NumericFailure",
    "PredictionRecord",
    "TuningConfig",
    "apply_temperature",
    "atfd",
    "atfd_gradient",
    "correlate_prompt_family",
    "cosine_similarity",
    "ctpt_loss",
    "ece",
    "ece_from_arrays",
    "entropy",
    "fit_temperature",
    "grad_check",
    "joint_step",
    "l2_normalize",
    "make_record",
    "pearson",
    "run_episode",
    "run_experiment",
    "softmax_temperature",
    "spearman",
    "sweep_lambda",
    "tpt_loss",
]
