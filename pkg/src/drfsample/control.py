"""Controllable denoise steps.

:class:`ToyControlledStep` stands in for attention-level feature injection
with two closed-form edits of the clean-latent estimate: a masked blend
toward the structure reference during the early part of the grid, and a
per-channel mean/std shift toward the appearance reference on every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .sampler import SamplerKind, SamplerState, eps_from_x0, predict_x0, sampler_step
from .schedule import NoiseSchedule, StepGrid
from .score import ScoreModel, cfg_predict
from .trace import RunTrace, latent_stats

__all__ = [
    "ControlContext",
    "ControlledStep",
    "ToyControlledStep",
    "structure_mask",
    "channel_stats",
    "anchor_structure",
    "match_appearance",
    "encode_toy_image",
    "toy_controlled_step",
    "controlled_sample",
]


def structure_mask(z0, threshold=0.0):
    """Binary mask of pixels whose channel-mean intensity exceeds ``threshold``."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim >= 2:
        return (z0.mean(axis=0) > threshold).astype(np.float64)
    return (z0 > threshold).astype(np.float64)


def channel_stats(x):
    """Per-channel mean and uncorrected standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim >= 2:
        flat = x.reshape(x.shape[0], -1)
        return flat.mean(axis=1), flat.std(axis=1)
    return np.array([x.mean()]), np.array([x.std()])


@dataclass
class ControlContext:
    z0_structure: np.ndarray
    z0_appearance: np.ndarray
    y_gen: int = 0
    y_app: int = 1
    struct_strength: float = 0.5
    app_strength: float = 0.1
    struct_cutoff: float = 0.6
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.z0_structure = np.asarray(self.z0_structure, dtype=np.float64)
        self.z0_appearance = np.asarray(self.z0_appearance, dtype=np.float64)
        if self.mask is None:
            self.mask = structure_mask(self.z0_structure)
        self.validate()

    def validate(self):
        if self.z0_structure.shape != self.z0_appearance.shape:
            raise DimensionError(
                f"structure {self.z0_structure.shape} and appearance "
                f"{self.z0_appearance.shape} latents differ in shape"
            )
        expected = self.z0_structure.shape[1:] if self.z0_structure.ndim >= 2 else self.z0_structure.shape
        if np.shape(self.mask) != tuple(expected):
            raise DimensionError(f"mask shape {np.shape(self.mask)} does not match {expected}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ConfigError("mask entries must be 0 or 1", field="control.mask")
        for name in ("struct_strength", "app_strength", "struct_cutoff"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {v!r}", field=f"control.{name}")
        if self.y_gen is None or self.y_app is None:
            raise ConfigError("both conditions must be set", field="control.y_gen")

    @property
    def structure_mask(self):
        return self.mask


def anchor_structure(x0, z0_structure, mask, strength):
    """Blend ``x0`` toward the structure reference inside the mask."""
    m = strength * np.asarray(mask, dtype=np.float64)
    return (1.0 - m) * x0 + m * z0_structure


def match_appearance(x0, z0_appearance, strength):
    """Move each channel's mean and std the fraction ``strength`` toward the reference.

    Channels with zero spread are shifted only.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if strength == 0.0:
        return x0
    mu, sd = channel_stats(x0)
    mu_ref, sd_ref = channel_stats(z0_appearance)
    mu_new = mu + strength * (mu_ref - mu)
    sd_new = sd + strength * (sd_ref - sd)
    scale = np.divide(sd_new, sd, out=np.ones_like(sd), where=sd > 0)
    shape = (-1,) + (1,) * (x0.ndim - 1) if x0.ndim >= 2 else (-1,)
    mu, mu_new, scale = (v.reshape(shape) for v in (mu, mu_new, scale))
    return (x0 - mu) * scale + mu_new


def encode_toy_image(img):
    """Identity encoder: a toy image (array or object with ``render()``) to a latent."""
    if hasattr(img, "render"):
        img = img.render()
    return np.array(img, dtype=np.float64, copy=True)


class ControlledStep:
    """Interface for one controlled reverse step.

    ``step`` returns ``(z_prev, new_state)``; implementations must not mutate
    ``state``.  ``trace`` is an optional :class:`RunTrace` for extra records.
    """

    grid: StepGrid

    def step(self, z_t, t, t_prev, ctx, model, sched, rng, state=None, trace=None):
        raise NotImplementedError


class ToyControlledStep(ControlledStep):
    def __init__(self, grid: StepGrid, kind="ddim", omega=5.0):
        self.grid = grid
        self.kind = SamplerKind.coerce(kind)
        if not omega >= 0:
            raise ConfigError(f"must be >= 0, got {omega!r}", field="omega")
        self.omega = float(omega)

    def structure_active(self, t, ctx: ControlContext) -> bool:
        return self.grid.index_of(t) < ctx.struct_cutoff * self.grid.S

    def controlled_eps(self, z, t, ctx: ControlContext, model, sched, anchor: bool):
        """Guided noise estimate after editing its implied clean latent."""
        eps = cfg_predict(model, z, ctx.y_gen, t, self.omega)
        anchor = anchor and ctx.struct_strength > 0
        if not anchor and ctx.app_strength == 0:
            # no edit: hand the raw estimate through so control-off runs match plain sampling exactly
            return eps
        a = sched.alpha_bar(t)
        return eps_from_x0(z, self._edit(predict_x0(z, eps, a), ctx, anchor), a)

    def controlled_x0(self, z, t, ctx: ControlContext, model, sched):
        """Edited clean-latent estimate at ``t`` (the quantity the solver advances from)."""
        eps = cfg_predict(model, z, ctx.y_gen, t, self.omega)
        x0 = predict_x0(z, eps, sched.alpha_bar(t))
        return self._edit(x0, ctx, self.structure_active(t, ctx) and ctx.struct_strength > 0)

    @staticmethod
    def _edit(x0, ctx, anchor):
        if anchor:
            x0 = anchor_structure(x0, ctx.z0_structure, ctx.mask, ctx.struct_strength)
        return match_appearance(x0, ctx.z0_appearance, ctx.app_strength)

    def step(self, z_t, t, t_prev, ctx, model, sched, rng, state=None, trace=None):
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != ctx.z0_structure.shape:
            raise DimensionError(f"latent {z_t.shape} does not match context {ctx.z0_structure.shape}")
        state = state if state is not None else SamplerState(position=self.grid.index_of(t))
        anchor = self.structure_active(t, ctx)

        def eps_fn(z, s):
            return self.controlled_eps(z, s, ctx, model, sched, anchor)

        return sampler_step(self.kind, state, z_t, t, t_prev, eps_fn(z_t, t), sched, rng,
                            eps_fn=eps_fn)


def toy_controlled_step(z_t, t, t_prev, ctx, model, sched, rng, *, grid, kind="ddim",
                        omega=5.0, state=None):
    """Functional form of :meth:`ToyControlledStep.step`; returns ``z_prev`` only."""
    z, _ = ToyControlledStep(grid, kind, omega).step(z_t, t, t_prev, ctx, model, sched, rng, state)
    return z


def controlled_sample(step: ControlledStep, ctx: ControlContext, model: ScoreModel,
                      sched: NoiseSchedule, seed=0, trace=None):
    """Run a full controlled trajectory from seeded standard-normal noise."""
    grid = step.grid
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(ctx.z0_structure.shape)
    state = SamplerState()
    trace = trace if trace is not None else RunTrace()
    trace.meta.update({"seed": seed, "S": grid.S})
    for i, t, t_prev in grid.pairs():
        z, state = step.step(z, t, t_prev, ctx, model, sched, rng, state, trace=trace)
        trace.add("step", step=i, t=t, t_prev=t_prev, **latent_stats(z))
    return z, trace
