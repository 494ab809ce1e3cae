"""Guided diffusion sampling with dual recursive feedback on the injection noise."""

from .control import (
    ControlContext,
    ControlledStep,
    ToyControlledStep,
    controlled_sample,
    encode_toy_image,
    toy_controlled_step,
)
from .drf import (
    DRFConfig,
    DRFHook,
    appearance_loss,
    distance,
    drf_hook,
    drf_loss,
    drf_refine,
    fpr_loss,
    fpr_update,
    generation_loss,
    iter_weight,
    noise_update,
    one_step_renoise,
    posterior_mean,
)
from .errors import (
    ConfigError,
    DimensionError,
    DRFError,
    HookError,
    NumericError,
    ScheduleError,
    StateError,
    TrainingDivergence,
)
from .metrics import MetricReport, evaluate
from .sampler import SamplerKind, sample, sampler_step
from .schedule import NoiseSchedule, StepGrid, forward_diffuse, make_schedule, make_step_grid
from .score import GaussianMixtureScore, ScoreModel, cfg_predict, cfg_vjp
from .trace import RunTrace

__version__ = "0.1.0"
