"""Dual recursive feedback on the injection noise.

At an active step the generated latent ``z_{t-1}`` is re-noised back to ``t``
with a shared noise ``eps``, and so is the clean appearance latent.  Two
fixed-point losses on the posterior means of those noisy latents drive
gradient steps on ``eps``:

* appearance feedback pulls the appearance branch's clean estimate back to
  the clean appearance latent;
* generation feedback pulls the generation branch's clean estimate toward the
  previous iteration's estimate, weighted by an iteration schedule that rises
  from 0 to 1.

The refined ``eps`` yields the re-noised latent ``z_t*`` from which the
controlled step is re-run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .control import ControlContext, ControlledStep
from .errors import ConfigError, DimensionError, NumericError, ScheduleError, StateError
from .schedule import NoiseSchedule, StepGrid
from .score import GRADIENT_MODES, ScoreModel, cfg_predict, cfg_vjp

__all__ = [
    "DRFConfig",
    "DRFState",
    "LossGrad",
    "posterior_mean",
    "one_step_renoise",
    "distance",
    "distance_grad",
    "appearance_loss",
    "generation_loss",
    "iter_weight",
    "drf_loss",
    "noise_update",
    "drf_refine",
    "fpr_loss",
    "fpr_update",
    "DRFHook",
    "drf_hook",
]

WEIGHT_KINDS = ("exponential", "linear", "cosine")
DISTANCE_KINDS = ("l2", "squared_l2_mean", "squared_l2_sum", "l1_mean")
INVERSION_MODES = ("ratio_matched", "marginal")


@dataclass(frozen=True)
class DRFConfig:
    omega: float = 5.0
    lam: float = 1.0
    rho: float = 0.001
    k: float = 5.0
    N: int = 3
    window_skip: int = 5
    window_len: int = 20
    weight_kind: str = "exponential"
    distance_kind: str = "l2"
    gradient_mode: str = "full_vjp"
    inversion_mode: str = "ratio_matched"

    def __post_init__(self):
        checks = [
            ("omega", self.omega >= 0, "must be >= 0"),
            ("lam", self.lam >= 0, "must be >= 0"),
            ("rho", self.rho >= 0, "must be >= 0"),
            ("k", self.k > 0, "must be > 0"),
            ("N", int(self.N) == self.N and self.N >= 1, "must be an integer >= 1"),
            ("window_skip", int(self.window_skip) == self.window_skip and self.window_skip >= 0,
             "must be an integer >= 0"),
            ("window_len", int(self.window_len) == self.window_len and self.window_len >= 0,
             "must be an integer >= 0"),
            ("weight_kind", self.weight_kind in WEIGHT_KINDS, f"must be one of {WEIGHT_KINDS}"),
            ("distance_kind", self.distance_kind in DISTANCE_KINDS, f"must be one of {DISTANCE_KINDS}"),
            ("gradient_mode", self.gradient_mode in GRADIENT_MODES, f"must be one of {GRADIENT_MODES}"),
            ("inversion_mode", self.inversion_mode in INVERSION_MODES,
             f"must be one of {INVERSION_MODES}"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg}, got {getattr(self, name)!r}", field=f"drf.{name}")

    def check_grid(self, grid):
        """Raise unless the window fits ``grid`` (a :class:`StepGrid` or a step count)."""
        S = grid if isinstance(grid, int) else grid.S
        if self.window_skip + self.window_len > S:
            raise ConfigError(
                f"window [{self.window_skip}, {self.window_skip + self.window_len}) "
                f"does not fit a {S}-step grid",
                field="drf.window_len",
            )

    def active(self, index: int) -> bool:
        return self.window_skip <= index < self.window_skip + self.window_len

    def with_(self, **changes) -> "DRFConfig":
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass
class DRFState:
    eps: np.ndarray
    z_prev_g: np.ndarray | None = None
    i: int = 0


@dataclass(frozen=True)
class LossGrad:
    """A scalar loss with its gradient with respect to the injection noise."""

    value: float
    grad: np.ndarray

    def __iter__(self):
        yield self.value
        yield self.grad


def _digest(x) -> str:
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()[:16]


def _inversion_alpha(t, sched, inversion_mode, t_prev):
    if inversion_mode == "marginal":
        return sched.alpha_bar(t)
    if inversion_mode == "ratio_matched":
        if t_prev is None:
            raise ConfigError("ratio_matched inversion needs t_prev", field="t_prev")
        return sched.ratio(t, t_prev)
    raise ConfigError(f"unknown inversion mode {inversion_mode!r}", field="drf.inversion_mode")


def posterior_mean(z_t, eps_hat, t, sched: NoiseSchedule, inversion_mode="marginal", t_prev=None):
    """Clean-latent estimate ``(z_t - sqrt(1 - a) eps_hat) / sqrt(a)``.

    ``a`` is ``alpha_bar[t]`` in ``marginal`` mode and the one-step ratio
    ``alpha_bar[t] / alpha_bar[t_prev]`` in ``ratio_matched`` mode.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise DimensionError(f"z_t {z_t.shape} and eps_hat {eps_hat.shape} differ in shape")
    a = _inversion_alpha(t, sched, inversion_mode, t_prev)
    if a <= 0.0:
        raise NumericError(f"singular inversion coefficient {a!r} at t={t}")
    return (z_t - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)


def one_step_renoise(z0_like, t, t_prev, eps, sched: NoiseSchedule):
    """Noise a latent from ``t_prev`` to ``t`` with the one-step ratio coefficients."""
    z0_like = np.asarray(z0_like, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0_like.shape != eps.shape:
        raise DimensionError(f"latent {z0_like.shape} and eps {eps.shape} differ in shape")
    r = sched.ratio(t, t_prev)
    if not 0.0 < r <= 1.0:
        raise ScheduleError(f"alpha_bar ratio {r!r} outside (0, 1] for t={t}, t_prev={t_prev}")
    return math.sqrt(r) * z0_like + math.sqrt(1.0 - r) * eps


def distance(a, b, kind="l2") -> float:
    """Loss metric; ``l2`` is the Euclidean norm, the ``*_mean`` kinds average over elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    if kind == "l2":
        return float(np.linalg.norm(a - b))
    if kind == "squared_l2_mean":
        return float(np.mean((a - b) ** 2))
    if kind == "squared_l2_sum":
        return float(np.sum((a - b) ** 2))
    if kind == "l1_mean":
        return float(np.mean(np.abs(a - b)))
    raise ConfigError(f"unknown distance {kind!r}", field="drf.distance_kind")


def distance_grad(a, b, kind="l2"):
    """Gradient of :func:`distance` with respect to ``a``.

    Non-differentiable points take the zero subgradient (``a == b`` up to
    round-off for ``l2``, ``sign(0) = 0`` for ``l1_mean``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "l2":
        diff = a - b
        norm = np.linalg.norm(diff)
        # below round-off the direction is noise, not signal
        scale = max(1.0, float(np.linalg.norm(a)), float(np.linalg.norm(b)))
        return diff / norm if norm > 1e-12 * scale else np.zeros_like(diff)
    if kind == "squared_l2_mean":
        return 2.0 * (a - b) / a.size
    if kind == "squared_l2_sum":
        return 2.0 * (a - b)
    if kind == "l1_mean":
        return np.sign(a - b) / a.size
    raise ConfigError(f"unknown distance {kind!r}", field="drf.distance_kind")


def _branch(base, target, eps, model, y, t, t_prev, sched, cfg: DRFConfig, want_grad=True):
    """Loss and eps-gradient for one feedback branch.

    ``base`` is re-noised with ``eps``; its posterior mean is compared with
    ``target``.  Returns ``(loss, grad or None, posterior_mean)``; a ``None``
    target gives loss 0 and no gradient.
    """
    z = one_step_renoise(base, t, t_prev, eps, sched)
    eps_hat = cfg_predict(model, z, y, t, cfg.omega)
    z0_hat = posterior_mean(z, eps_hat, t, sched, cfg.inversion_mode, t_prev)
    if target is None:
        return 0.0, None, z0_hat
    loss = distance(z0_hat, target, cfg.distance_kind)
    if not want_grad:
        return loss, None, z0_hat
    a = _inversion_alpha(t, sched, cfg.inversion_mode, t_prev)
    g = distance_grad(z0_hat, target, cfg.distance_kind)
    # d z0_hat / d z = (I - sqrt(1-a) J) / sqrt(a);  d z / d eps = sqrt(1-r) I
    jt_g = cfg_vjp(model, z, y, t, cfg.omega, g, mode=cfg.gradient_mode)
    grad_z = (g - math.sqrt(1.0 - a) * jt_g) / math.sqrt(a)
    grad = math.sqrt(1.0 - sched.ratio(t, t_prev)) * grad_z
    return loss, grad, z0_hat


def appearance_loss(z0_a, z_tilde_a, model, y_a, t, cfg: DRFConfig, *, t_prev, eps, sched):
    """Appearance feedback: distance of the appearance branch's clean estimate to ``z0_a``.

    ``z_tilde_a`` must be ``one_step_renoise(z0_a, t, t_prev, eps)``; it is
    recomputed from ``eps`` and checked, since the gradient is taken with
    respect to ``eps``.
    """
    loss, grad, _ = _branch(z0_a, z0_a, eps, model, y_a, t, t_prev, sched, cfg)
    if z_tilde_a is not None:
        expected = one_step_renoise(z0_a, t, t_prev, eps, sched)
        if not np.array_equal(expected, np.asarray(z_tilde_a)):
            raise StateError("z_tilde_a was not produced from z0_a with this eps")
    return LossGrad(loss, grad)


def generation_loss(z_prev_g, z_tm1_g, model, y_g, t, cfg: DRFConfig, *, t_prev, eps, sched,
                    i=None):
    """Generation feedback: distance of the generation branch's clean estimate to ``z_prev_g``.

    ``z_tm1_g`` is the generated latent at ``t_prev`` that ``eps`` re-noises.
    ``z_prev_g`` is held constant.
    """
    if z_prev_g is None:
        raise StateError(f"generation feedback needs z_prev_g (iteration {i})")
    loss, grad, _ = _branch(z_tm1_g, z_prev_g, eps, model, y_g, t, t_prev, sched, cfg)
    return LossGrad(loss, grad)


def iter_weight(i, N, k=5.0, weight_kind="exponential") -> float:
    """Generation-feedback weight for iteration ``i`` of ``N`` (0-based).

    Rises from 0 at ``i = 0`` to 1 at ``i = N - 1``; a single iteration gets 0.
    """
    if N < 1 or not 0 <= i < N:
        raise ConfigError(f"iteration {i} outside [0, {N})", field="drf.N")
    if N == 1:
        return 0.0
    x = i / (N - 1)
    if weight_kind == "exponential":
        return math.sqrt(math.expm1(k * x) / math.expm1(k))
    if weight_kind == "linear":
        return x
    if weight_kind == "cosine":
        return 0.5 * (1.0 - math.cos(math.pi * x))
    raise ConfigError(f"unknown weight kind {weight_kind!r}", field="drf.weight_kind")


def drf_loss(app, gen, w, rho) -> LossGrad:
    """``L_app + rho * w * L_gen`` with the matching gradient."""
    app_value, app_grad = app
    if gen is None:
        if w * rho > 0:
            raise StateError("generation feedback has positive weight but no loss")
        return LossGrad(float(app_value), app_grad)
    gen_value, gen_grad = gen
    coef = rho * w
    value = float(app_value) + coef * float(gen_value)
    if coef == 0 or gen_grad is None:
        return LossGrad(value, app_grad)
    return LossGrad(value, app_grad + coef * gen_grad)


def noise_update(eps, grad, lam):
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in noise update")
    if lam < 0:
        raise ConfigError(f"must be >= 0, got {lam!r}", field="drf.lam")
    return np.asarray(eps, dtype=np.float64) - lam * grad


def drf_refine(z_tm1_g, z0_a, t, t_prev, model: ScoreModel, y_a, y_g, cfg: DRFConfig, seed=0,
               *, sched: NoiseSchedule, step=None):
    """Refine the injection noise over ``cfg.N`` iterations.

    ``seed`` may be an int or a ``numpy.random.Generator``.  Returns
    ``(z_t_star, records)`` where ``records`` holds one dict per iteration.
    """
    z_tm1_g = np.asarray(z_tm1_g, dtype=np.float64)
    z0_a = np.asarray(z0_a, dtype=np.float64)
    if z_tm1_g.shape != z0_a.shape:
        raise DimensionError(f"generated {z_tm1_g.shape} and appearance {z0_a.shape} latents differ")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = DRFState(eps=rng.standard_normal(z_tm1_g.shape))
    records = []
    for i in range(cfg.N):
        state.i = i
        eps = state.eps
        w = iter_weight(i, cfg.N, cfg.k, cfg.weight_kind)
        try:
            l_app, g_app, _ = _branch(z0_a, z0_a, eps, model, y_a, t, t_prev, sched, cfg)
            # first iteration has no reference yet: z_prev_g is None and w == 0
            l_gen, g_gen, z0_g = _branch(
                z_tm1_g, state.z_prev_g, eps, model, y_g, t, t_prev, sched, cfg,
                want_grad=cfg.rho * w > 0,
            )
            total = drf_loss((l_app, g_app), (l_gen, g_gen), w, cfg.rho)
            new_eps = noise_update(eps, total.grad, cfg.lam)
        except NumericError as exc:
            raise NumericError(f"DRF refinement failed: {exc}", step=step, iteration=i) from exc
        records.append({
            "kind": "drf_iter",
            "step": step,
            "t": t,
            "i": i,
            "L_app": l_app,
            "L_gen": l_gen,
            "w": w,
            "L_drf": total.value,
            "eps_norm": float(np.linalg.norm(eps)),
            "grad_norm": float(np.linalg.norm(total.grad)),
            "eps_digest_gen": _digest(eps),
            "eps_digest_app": _digest(eps),
        })
        state.eps = new_eps
        state.z_prev_g = z0_g
    z_star = one_step_renoise(z_tm1_g, t, t_prev, state.eps, sched)
    if not np.all(np.isfinite(z_star)):
        raise NumericError("non-finite refined latent", step=step, iteration=cfg.N - 1)
    return z_star, records


def fpr_loss(z_t, z0_org, model, y, t, cfg: DRFConfig, sched: NoiseSchedule) -> float:
    eps_hat = cfg_predict(model, z_t, y, t, cfg.omega)
    return distance(posterior_mean(z_t, eps_hat, t, sched, "marginal"), z0_org, cfg.distance_kind)


def fpr_update(z_t, z0_org, model, y, t, lam, cfg: DRFConfig, sched: NoiseSchedule):
    """One fixed-point step on the noisy latent itself (the baseline DRF improves on)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    z0_org = np.asarray(z0_org, dtype=np.float64)
    if z_t.shape != z0_org.shape:
        raise DimensionError(f"z_t {z_t.shape} and z0_org {z0_org.shape} differ in shape")
    a = sched.alpha_bar(t)
    eps_hat = cfg_predict(model, z_t, y, t, cfg.omega)
    z0_hat = posterior_mean(z_t, eps_hat, t, sched, "marginal")
    g = distance_grad(z0_hat, z0_org, cfg.distance_kind)
    jt_g = cfg_vjp(model, z_t, y, t, cfg.omega, g, mode=cfg.gradient_mode)
    grad = (g - math.sqrt(1.0 - a) * jt_g) / math.sqrt(a)
    return noise_update(z_t, grad, lam)


class DRFHook(ControlledStep):
    """Wrap a controlled step with DRF refinement on the active window.

    On an active step the inner step produces ``z_{t-1}``; :func:`drf_refine`
    turns it into ``z_t*``, and the inner step is re-run from ``z_t*`` with the
    original solver state.  Refinement noise comes from a generator seeded
    once per hook, so runs are reproducible.
    """

    def __init__(self, inner: ControlledStep, cfg: DRFConfig, seed=0):
        cfg.check_grid(inner.grid)
        self.inner = inner
        self.grid = inner.grid
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng([int(seed), 0x0DF])
        self.calls = 0

    def step(self, z_t, t, t_prev, ctx: ControlContext, model, sched, rng, state=None, trace=None):
        z_prev, new_state = self.inner.step(z_t, t, t_prev, ctx, model, sched, rng, state)
        index = self.grid.index_of(t)
        if not self.cfg.active(index):
            return z_prev, new_state
        z_star, records = drf_refine(
            z_prev, ctx.z0_appearance, t, t_prev, model, ctx.y_app, ctx.y_gen, self.cfg,
            self.rng, sched=sched, step=index,
        )
        self.calls += 1
        if trace is not None:
            trace.records.extend(records)
        return self.inner.step(z_star, t, t_prev, ctx, model, sched, rng, state)


def drf_hook(inner: ControlledStep, cfg: DRFConfig, seed=0) -> DRFHook:
    return DRFHook(inner, cfg, seed)
