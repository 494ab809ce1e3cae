"""Conditional noise predictors and classifier-free guidance.

A condition is a plain ``int`` label or ``None`` for the unconditional
branch.  Every model predicts the injected noise for latents whose trailing
axes equal ``model.shape``; any leading axes are treated as a batch sharing
one condition and timestep.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "GaussianMixtureScore",
    "cfg_predict",
    "cfg_vjp",
    "fd_vjp",
    "FD_REL_STEP",
    "GRADIENT_MODES",
]

FD_REL_STEP = 1e-4

GRADIENT_MODES = ("full_vjp", "identity_jacobian")


class ScoreModel:
    """Interface for an epsilon predictor ``eps(z, y, t)``.

    Subclasses implement :meth:`predict`.  Models with an analytic or
    backpropagated Jacobian override :meth:`vjp` and set
    ``supports_exact_vjp``; everyone else inherits the central-difference
    fallback, whose error is O(h^2) in the step ``h``.
    """

    supports_exact_vjp = False
    shape: tuple[int, ...] = ()

    def predict(self, z, y, t):
        raise NotImplementedError

    def vjp(self, z, y, t, cotangent):
        return fd_vjp(self, z, y, t, cotangent)

    def _split_batch(self, z):
        z = np.asarray(z, dtype=np.float64)
        n = len(self.shape)
        if z.shape[z.ndim - n :] != tuple(self.shape):
            raise DimensionError(f"latent shape {z.shape} does not end with {self.shape}")
        return z.reshape(-1, int(np.prod(self.shape, dtype=np.int64))), z.shape


def fd_vjp(model, z, y, t, cotangent, rel_step=FD_REL_STEP):
    """Vector-Jacobian product by central differences.

    The step is ``rel_step * max(1, max|z|)``.  Column ``i`` of the Jacobian is
    estimated from one perturbed pair, so the cost is ``2 * D`` predictions per
    latent; batch entries are handled one at a time.
    """
    z = np.asarray(z, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if z.shape != cotangent.shape:
        raise DimensionError(f"cotangent {cotangent.shape} does not match latent {z.shape}")
    shape = tuple(model.shape) if model.shape else z.shape
    d = int(np.prod(shape, dtype=np.int64))
    flat_z = z.reshape(-1, d)
    flat_u = cotangent.reshape(-1, d)
    out = np.empty_like(flat_z)
    eye = np.eye(d)
    for b in range(flat_z.shape[0]):
        h = rel_step * max(1.0, float(np.max(np.abs(flat_z[b]))))
        plus = model.predict((flat_z[b] + h * eye).reshape((d,) + shape), y, t).reshape(d, d)
        minus = model.predict((flat_z[b] - h * eye).reshape((d,) + shape), y, t).reshape(d, d)
        # row i holds d(eps)/dz_i
        out[b] = (plus - minus) @ flat_u[b] / (2.0 * h)
    return out.reshape(z.shape)


class GaussianMixtureScore(ScoreModel):
    """Exact noise predictor for an equal-weight isotropic Gaussian mixture.

    With component variance ``s2`` the marginal at step ``t`` has components
    ``N(sqrt(a) mu_k, v I)`` where ``v = a s2 + 1 - a``, so the optimal
    predictor is ``sqrt(1 - a) / v * sum_k r_k(z) (z - sqrt(a) mu_k)`` with
    posterior responsibilities ``r_k``.  The default ``s2 = 1`` makes ``v = 1``.
    ``label_map`` restricts a condition to a subset of components; ``None``
    uses all of them.
    """

    supports_exact_vjp = True

    def __init__(self, means, sched: NoiseSchedule, label_map=None, variance=1.0):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim < 2:
            raise ConfigError("means must have shape (K, *latent_shape)", field="means")
        self.means = means
        self.shape = tuple(means.shape[1:])
        self.sched = sched
        k = means.shape[0]
        self.label_map = {int(lab): tuple(int(c) for c in comps) for lab, comps in (label_map or {}).items()}
        for lab, comps in self.label_map.items():
            if not comps or any(not 0 <= c < k for c in comps):
                raise ConfigError(f"label {lab} maps to invalid components {comps}", field="label_map")
        if not variance > 0:
            raise ConfigError(f"must be > 0, got {variance!r}", field="variance")
        self.variance = float(variance)
        self._flat = means.reshape(k, -1)

    def components(self, y):
        if y is None:
            return self._flat
        try:
            return self._flat[list(self.label_map[int(y)])]
        except KeyError:
            raise ConfigError(f"unknown condition label {y!r}", field="y") from None

    def _terms(self, z, y, t):
        flat, shape = self._split_batch(z)
        a = self.sched.alpha_bar(t)
        v = a * self.variance + 1.0 - a
        centers = math.sqrt(a) * self.components(y)
        diff = flat[:, None, :] - centers[None, :, :]  # (B, K, D)
        logits = -0.5 * np.einsum("bkd,bkd->bk", diff, diff) / v
        logits -= logits.max(axis=1, keepdims=True)
        resp = np.exp(logits)
        resp /= resp.sum(axis=1, keepdims=True)
        return diff, resp, a, v, shape

    def predict(self, z, y, t):
        diff, resp, a, v, shape = self._terms(z, y, t)
        mean_diff = np.einsum("bk,bkd->bd", resp, diff)
        return (math.sqrt(1.0 - a) / v * mean_diff).reshape(shape)

    def vjp(self, z, y, t, cotangent):
        # Jacobian is sqrt(1-a)/v * (I - Cov_r[diff] / v), symmetric.
        diff, resp, a, v, shape = self._terms(z, y, t)
        u = np.asarray(cotangent, dtype=np.float64).reshape(diff.shape[0], -1)
        if u.shape[1] != diff.shape[2]:
            raise DimensionError(f"cotangent {np.shape(cotangent)} does not match latent {shape}")
        mean_diff = np.einsum("bk,bkd->bd", resp, diff)
        proj = np.einsum("bkd,bd->bk", diff, u)
        second = np.einsum("bk,bk,bkd->bd", resp, proj, diff)
        first = mean_diff * np.einsum("bd,bd->b", mean_diff, u)[:, None]
        return (math.sqrt(1.0 - a) / v * (u - (second - first) / v)).reshape(shape)

    def to_json(self, path):
        payload = {
            "kind": "gmm",
            "shape": list(self.shape),
            "means": self.means.reshape(len(self.means), -1).tolist(),
            "labels": {str(k): list(v) for k, v in self.label_map.items()},
            "variance": self.variance,
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path, sched: NoiseSchedule):
        payload = json.loads(Path(path).read_text())
        means = np.asarray(payload["means"], dtype=np.float64).reshape([-1] + payload["shape"])
        labels = {int(k): v for k, v in payload["labels"].items()}
        return cls(means, sched, labels, payload.get("variance", 1.0))


def _check_guidance(y, omega):
    if y is None:
        raise ConfigError("guided prediction needs a real condition, got None", field="y")
    if not omega >= 0:
        raise ConfigError(f"guidance scale must be >= 0, got {omega!r}", field="omega")


def cfg_predict(model: ScoreModel, z, y, t, omega):
    """Classifier-free guided noise: ``(1 + w) eps(z, y) - w eps(z, None)``."""
    _check_guidance(y, omega)
    cond = model.predict(z, y, t)
    if omega == 0:
        return cond
    return (1.0 + omega) * cond - omega * model.predict(z, None, t)


def cfg_vjp(model: ScoreModel, z, y, t, omega, cotangent, mode="full_vjp"):
    """Vector-Jacobian product of :func:`cfg_predict` with respect to ``z``.

    ``identity_jacobian`` treats each branch's Jacobian as the identity, so the
    guided combination collapses to the cotangent itself.
    """
    _check_guidance(y, omega)
    if mode == "identity_jacobian":
        return np.array(cotangent, dtype=np.float64, copy=True)
    if mode != "full_vjp":
        raise ConfigError(f"unknown gradient mode {mode!r}", field="gradient_mode")
    cond = model.vjp(z, y, t, cotangent)
    if omega == 0:
        return cond
    return (1.0 + omega) * cond - omega * model.vjp(z, None, t, cotangent)
