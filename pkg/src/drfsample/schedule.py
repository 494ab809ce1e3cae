"""Discrete noise schedules and inference step grids.

Index convention: ``alpha_bars[0] == 1`` is the clean-data boundary and
training steps run ``1..T``.  Inference grids hold timesteps in ``[1, T]``
and every reverse step of the last grid entry lands on index 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ScheduleError

__all__ = [
    "NoiseSchedule",
    "StepGrid",
    "make_schedule",
    "forward_diffuse",
    "make_step_grid",
    "dump_schedule_csv",
]

_COSINE_OFFSET = 0.008
_COSINE_MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances and their cumulative products.

    ``betas`` and ``alpha_bars`` both have length ``T + 1``; entry 0 is the
    padding ``beta = 0`` / ``alpha_bar = 1``.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str

    def __post_init__(self):
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.alpha_bars) - 1

    def alpha_bar(self, t) -> float:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]", field="t")
        return float(self.alpha_bars[t])

    def ratio(self, t, t_prev) -> float:
        """``alpha_bar[t] / alpha_bar[t_prev]``, the one-step retention factor."""
        return self.alpha_bar(t) / self.alpha_bar(t_prev)

    def log_snr(self, t) -> float:
        """Half log signal-to-noise ratio, ``log(alpha / sigma)``."""
        a = self.alpha_bar(t)
        if a >= 1.0:
            return math.inf
        return 0.5 * (math.log(a) - math.log1p(-a))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.betas, other.betas)
            and np.array_equal(self.alpha_bars, other.alpha_bars)
        )

    __hash__ = None


@dataclass(frozen=True)
class StepGrid:
    """Descending inference timesteps drawn from a schedule."""

    timesteps: tuple[int, ...]
    spacing: str = "uniform"
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index.update({t: i for i, t in enumerate(self.timesteps)})

    @property
    def S(self) -> int:
        return len(self.timesteps)

    def prev(self, i: int) -> int:
        """Timestep reached by the reverse step that starts at grid entry ``i``."""
        return self.timesteps[i + 1] if i + 1 < len(self.timesteps) else 0

    def pairs(self):
        """Yield ``(i, t, t_prev)`` for every reverse step."""
        for i, t in enumerate(self.timesteps):
            yield i, t, self.prev(i)

    def index_of(self, t: int) -> int:
        try:
            return self._index[int(t)]
        except KeyError:
            raise ConfigError(f"timestep {t} is not on the grid", field="t") from None


def make_schedule(kind="linear", T_train=1000, beta_min=1e-4, beta_max=2e-2) -> NoiseSchedule:
    """Build a discrete schedule.

    ``linear`` spaces betas evenly in ``[beta_min, beta_max]``.  ``cosine``
    ignores the beta bounds and follows the squared-cosine alpha-bar profile,
    with betas clipped at 0.999 so every alpha-bar stays positive.
    """
    if int(T_train) != T_train or T_train < 2:
        raise ConfigError(f"must be an integer >= 2, got {T_train!r}", field="T_train")
    T_train = int(T_train)
    if kind == "linear":
        if not 0.0 < beta_min < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {beta_min!r}", field="beta_min")
        if not beta_min <= beta_max < 1.0:
            raise ConfigError(
                f"must lie in [beta_min, 1), got {beta_max!r}", field="beta_max"
            )
        betas = np.linspace(beta_min, beta_max, T_train, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T_train + 1, dtype=np.float64) / T_train
        f = np.cos((steps + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * math.pi / 2) ** 2
        profile = f / f[0]
        betas = np.clip(1.0 - profile[1:] / profile[:-1], 0.0, _COSINE_MAX_BETA)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}", field="kind")

    betas = np.concatenate([[0.0], betas])
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, kind=kind)


def forward_diffuse(z0, t, eps, sched: NoiseSchedule):
    """Noise a clean latent to step ``t``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def make_step_grid(sched: NoiseSchedule, S=50, spacing="uniform") -> StepGrid:
    """Pick ``S`` descending inference timesteps.

    ``uniform`` uses the integer stride ``T // S`` anchored at ``T``;
    ``trailing`` rounds the fractional stride ``T / S`` so the grid always
    ends near ``T / S`` even when ``S`` does not divide ``T``.
    """
    T = sched.T
    if int(S) != S or not 1 <= S <= T:
        raise ConfigError(f"must be an integer in [1, {T}], got {S!r}", field="S")
    S = int(S)
    if spacing == "uniform":
        stride = T // S
        ts = T - stride * np.arange(S)
    elif spacing == "trailing":
        ts = np.round(T - (T / S) * np.arange(S)).astype(np.int64)
    else:
        raise ConfigError(f"unknown spacing {spacing!r}", field="spacing")

    timesteps = tuple(int(t) for t in ts)
    if any(b >= a for a, b in zip(timesteps, timesteps[1:])) or timesteps[-1] < 1:
        raise ScheduleError(f"grid is not strictly descending: {timesteps}")
    return StepGrid(timesteps=timesteps, spacing=spacing)


def dump_schedule_csv(sched: NoiseSchedule, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha_bar"])
        for t in range(sched.T + 1):
            writer.writerow([t, repr(float(sched.betas[t])), repr(float(sched.alpha_bars[t]))])
    return path
