"""Reverse-process solvers sharing one per-step interface.

Every solver consumes a noise estimate at ``t`` and produces the latent at
``t_prev``.  The DPM-Solver variants work in the data-prediction
parameterization with ``alpha = sqrt(alpha_bar)``, ``sigma = sqrt(1 - alpha_bar)``
and half log-SNR ``lambda = log(alpha / sigma)``.  Reverse steps that land on
the clean boundary (``t_prev == 0``) always use the first-order update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DRFError, HookError, NumericError
from .schedule import NoiseSchedule, StepGrid
from .score import ScoreModel, cfg_predict
from .trace import RunTrace, latent_stats

__all__ = [
    "SAMPLER_KINDS",
    "SamplerKind",
    "SamplerState",
    "sampler_step",
    "sample",
    "predict_x0",
    "eps_from_x0",
]

SAMPLER_KINDS = ("ddim", "dpm_solver_2s", "dpm_solver_pp_2m")


@dataclass(frozen=True)
class SamplerKind:
    name: str = "ddim"
    eta: float = 0.0

    def __post_init__(self):
        if self.name not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler {self.name!r}; expected one of {SAMPLER_KINDS}",
                              field="sampler.kind")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta!r}", field="sampler.eta")

    @property
    def order(self) -> int:
        return 1 if self.name == "ddim" else 2

    @classmethod
    def coerce(cls, kind) -> "SamplerKind":
        return kind if isinstance(kind, SamplerKind) else cls(str(kind))


@dataclass
class SamplerState:
    """Multistep memory: ``history`` holds ``(t, x0_hat)`` of earlier steps."""

    history: list = field(default_factory=list)
    position: int = 0

    def advanced(self, t=None, x0=None, keep=0):
        hist = list(self.history)
        if keep and x0 is not None:
            hist = (hist + [(t, x0)])[-keep:]
        return SamplerState(history=hist, position=self.position + 1)


def predict_x0(z_t, eps_hat, alpha_bar):
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)


def eps_from_x0(z_t, x0, alpha_bar):
    return (z_t - math.sqrt(alpha_bar) * x0) / math.sqrt(1.0 - alpha_bar)


def _first_order(z_t, x0, a_t, a_p):
    if a_p >= 1.0:
        return np.array(x0, copy=True)
    # equal to the DDIM eta = 0 update
    eps = eps_from_x0(z_t, x0, a_t)
    return math.sqrt(a_p) * x0 + math.sqrt(1.0 - a_p) * eps


def _ddim(z_t, eps_hat, a_t, a_p, eta, rng):
    x0 = predict_x0(z_t, eps_hat, a_t)
    if eta == 0.0 or a_p >= 1.0:
        return math.sqrt(a_p) * x0 + math.sqrt(1.0 - a_p) * eps_hat
    sigma = eta * math.sqrt((1.0 - a_p) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_p)
    if rng is None:
        raise ConfigError("stochastic DDIM (eta > 0) needs an rng", field="rng")
    noise = rng.standard_normal(np.shape(z_t))
    direction = math.sqrt(max(1.0 - a_p - sigma**2, 0.0)) * eps_hat
    return math.sqrt(a_p) * x0 + direction + sigma * noise


def _intermediate_step(sched, t, t_prev, lam_t, h):
    """Integer step between ``t_prev`` and ``t`` closest to the log-SNR midpoint."""
    if t - t_prev < 2:
        return None
    target = lam_t + 0.5 * h
    candidates = np.arange(t_prev + 1, t)
    a = np.asarray(sched.alpha_bars)[candidates]
    lams = 0.5 * (np.log(a) - np.log1p(-a))
    return int(candidates[np.argmin(np.abs(lams - target))])


def sampler_step(kind, state: SamplerState, z_t, t, t_prev, eps_hat, sched: NoiseSchedule,
                 rng=None, eps_fn=None):
    """Advance ``z_t`` from ``t`` to ``t_prev``.

    ``eps_fn(z, s)`` supplies the extra model evaluation the single-step
    second-order solver needs at an intermediate step ``s``; without it, or
    when no integer step lies strictly between ``t_prev`` and ``t``, that
    solver falls back to its first-order update.

    Returns ``(z_prev, new_state)``; ``state`` itself is not modified.
    """
    kind = SamplerKind.coerce(kind)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise DimensionError(f"eps_hat {eps_hat.shape} does not match latent {z_t.shape}")
    if not np.all(np.isfinite(eps_hat)):
        raise NumericError("non-finite noise estimate", step=state.position)
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}", field="t")

    a_t, a_p = sched.alpha_bar(t), sched.alpha_bar(t_prev)

    if kind.name == "ddim":
        out = _ddim(z_t, eps_hat, a_t, a_p, kind.eta, rng)
        new_state = state.advanced()
    else:
        x0 = predict_x0(z_t, eps_hat, a_t)
        if a_p >= 1.0:
            out = _first_order(z_t, x0, a_t, a_p)
        elif kind.name == "dpm_solver_pp_2m":
            out = _dpm_pp_2m(z_t, x0, t, t_prev, state, sched)
        else:
            out = _dpm_2s(z_t, x0, t, t_prev, sched, eps_fn)
        keep = 1 if kind.name == "dpm_solver_pp_2m" else 0
        new_state = state.advanced(t, x0, keep=keep)

    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite latent after solver update", step=state.position)
    return out, new_state


def _dpm_pp_2m(z_t, x0, t, t_prev, state, sched):
    a_t, a_p = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    lam_t, lam_p = sched.log_snr(t), sched.log_snr(t_prev)
    h = lam_p - lam_t
    sig_ratio = math.sqrt((1.0 - a_p) / (1.0 - a_t))
    phi = -math.expm1(-h)  # 1 - e^{-h}
    if not state.history:
        return sig_ratio * z_t + math.sqrt(a_p) * phi * x0
    t_last, x0_last = state.history[-1]
    r0 = (lam_t - sched.log_snr(t_last)) / h
    d1 = (x0 - x0_last) / r0
    return sig_ratio * z_t + math.sqrt(a_p) * phi * (x0 + 0.5 * d1)


def _dpm_2s(z_t, x0, t, t_prev, sched, eps_fn):
    a_t, a_p = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    lam_t, lam_p = sched.log_snr(t), sched.log_snr(t_prev)
    h = lam_p - lam_t
    s = _intermediate_step(sched, t, t_prev, lam_t, h) if eps_fn is not None else None
    if s is None:
        return _first_order(z_t, x0, a_t, a_p)
    a_s = sched.alpha_bar(s)
    r = (sched.log_snr(s) - lam_t) / h
    z_s = math.sqrt((1.0 - a_s) / (1.0 - a_t)) * z_t + math.sqrt(a_s) * (-math.expm1(-r * h)) * x0
    x0_s = predict_x0(z_s, np.asarray(eps_fn(z_s, s), dtype=np.float64), a_s)
    phi = -math.expm1(-h)
    sig_ratio = math.sqrt((1.0 - a_p) / (1.0 - a_t))
    return sig_ratio * z_t + math.sqrt(a_p) * phi * (x0 + (0.5 / r) * (x0_s - x0))


def sample(kind, model: ScoreModel, y, grid: StepGrid, sched: NoiseSchedule, seed=0, hooks=(),
           *, omega=0.0, shape=None, batch=None, trace=None):
    """Draw ``z_T ~ N(0, I)`` and integrate the reverse process over ``grid``.

    Each hook is called as ``hook(step, t, t_prev, z_t, eps_hat)`` after the
    guided noise estimate and before the solver update; a non-``None``
    return value replaces ``eps_hat``.  ``batch`` adds a leading axis of
    independent samples drawn from the same generator.
    Returns ``(z_0, trace)``.
    """
    kind = SamplerKind.coerce(kind)
    shape = tuple(shape if shape is not None else model.shape)
    if batch is not None:
        shape = (int(batch),) + shape
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    state = SamplerState()
    trace = trace if trace is not None else RunTrace()
    trace.meta.update({"sampler": kind.name, "eta": kind.eta, "seed": seed, "S": grid.S})

    def eps_fn(z_s, s):
        return cfg_predict(model, z_s, y, s, omega)

    for i, t, t_prev in grid.pairs():
        eps_hat = cfg_predict(model, z, y, t, omega)
        for hook in hooks:
            try:
                replaced = hook(i, t, t_prev, z, eps_hat)
            except DRFError:
                raise
            except Exception as exc:
                raise HookError(f"hook {hook!r} failed: {exc}", step=i) from exc
            if replaced is not None:
                eps_hat = replaced
        z, state = sampler_step(kind, state, z, t, t_prev, eps_hat, sched, rng, eps_fn=eps_fn)
        trace.add("step", step=i, t=t, t_prev=t_prev, **latent_stats(z))
    return z, trace
