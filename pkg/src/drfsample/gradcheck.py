"""Finite-difference verification of the DRF noise gradient.

Each instance draws a small Gaussian mixture, latents, an injection noise
and a generation reference, then compares the analytic gradient of
``L_app + rho * w * L_gen`` with central differences of the same objective.
``identity_jacobian`` is checked against its own definition: differences
are taken through a model linearized with identity slope at the evaluation
point, whose exact Jacobian is what that mode assumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drf import DRFConfig, _branch, one_step_renoise
from .score import GaussianMixtureScore, ScoreModel

__all__ = ["GradInstance", "random_instance", "drf_objective", "check_instance", "run_gradcheck",
           "IdentityLinearized"]


class IdentityLinearized(ScoreModel):
    """``eps(z) = inner(anchor) + (z - anchor)`` around the nearest anchor."""

    supports_exact_vjp = True

    def __init__(self, inner: ScoreModel, anchors, t):
        self.inner = inner
        self.shape = inner.shape
        self.t = t
        self.anchors = [np.asarray(a, dtype=np.float64) for a in anchors]
        self._cache = {}

    def _anchor(self, z):
        dists = [float(np.sum((z - a) ** 2)) for a in self.anchors]
        return int(np.argmin(dists))

    def predict(self, z, y, t):
        z = np.asarray(z, dtype=np.float64)
        flat = z.reshape((-1,) + tuple(self.shape))
        out = np.empty_like(flat)
        for b, zb in enumerate(flat):
            k = self._anchor(zb)
            key = (k, y)
            if key not in self._cache:
                self._cache[key] = self.inner.predict(self.anchors[k], y, self.t)
            out[b] = self._cache[key] + (zb - self.anchors[k])
        return out.reshape(z.shape)

    def vjp(self, z, y, t, cotangent):
        return np.array(cotangent, dtype=np.float64, copy=True)


@dataclass
class GradInstance:
    model: GaussianMixtureScore
    z_tm1_g: np.ndarray
    z0_a: np.ndarray
    z_prev_g: np.ndarray
    eps: np.ndarray
    t: int
    t_prev: int
    w: float
    cfg: DRFConfig


def random_instance(rng, sched, gradient_mode="full_vjp", max_dim=8, model_cls=GaussianMixtureScore):
    """A random 1..max_dim dimensional problem on a small analytic mixture."""
    d = int(rng.integers(1, max_dim + 1))
    k = int(rng.integers(2, 5))
    means = rng.normal(0.0, 1.5, size=(k, d))
    split = int(rng.integers(1, k))
    model = model_cls(means, sched, {0: range(split), 1: range(split, k)},
                      variance=float(rng.uniform(0.2, 1.0)))
    t = int(rng.integers(20, sched.T + 1))
    t_prev = t - int(rng.integers(1, 21))
    cfg = DRFConfig(
        omega=float(rng.uniform(0.0, 5.0)),
        rho=float(rng.uniform(0.1, 2.0)),
        gradient_mode=gradient_mode,
    )
    return GradInstance(
        model=model,
        z_tm1_g=rng.normal(size=d),
        z0_a=rng.normal(size=d),
        z_prev_g=rng.normal(size=d),
        eps=rng.normal(size=d),
        t=t,
        t_prev=t_prev,
        w=float(rng.uniform(0.0, 1.0)),
        cfg=cfg,
    )


def drf_objective(inst: GradInstance, eps, model=None, want_grad=True):
    """``(L_DRF, grad or None)`` with app label 1 and generation label 0."""
    model = inst.model if model is None else model
    sched = inst.model.sched
    l_app, g_app, _ = _branch(inst.z0_a, inst.z0_a, eps, model, 1, inst.t, inst.t_prev, sched,
                              inst.cfg, want_grad)
    l_gen, g_gen, _ = _branch(inst.z_tm1_g, inst.z_prev_g, eps, model, 0, inst.t, inst.t_prev,
                              sched, inst.cfg, want_grad)
    coef = inst.cfg.rho * inst.w
    value = l_app + coef * l_gen
    return value, (g_app + coef * g_gen) if want_grad else None


def _renoised(inst, base):
    return one_step_renoise(base, inst.t, inst.t_prev, inst.eps, inst.model.sched)


def check_instance(inst: GradInstance, rel_step=1e-4):
    """Max-norm relative error between the analytic and the differenced gradient."""
    _, grad = drf_objective(inst, inst.eps)
    if inst.cfg.gradient_mode == "identity_jacobian":
        oracle_model = IdentityLinearized(
            inst.model, [_renoised(inst, inst.z0_a), _renoised(inst, inst.z_tm1_g)], inst.t)
    else:
        oracle_model = inst.model
    h = rel_step * max(1.0, float(np.max(np.abs(inst.eps))))
    fd = np.empty_like(inst.eps)
    for i in range(inst.eps.size):
        e = np.zeros_like(inst.eps)
        e[i] = h
        plus, _ = drf_objective(inst, inst.eps + e, oracle_model, want_grad=False)
        minus, _ = drf_objective(inst, inst.eps - e, oracle_model, want_grad=False)
        fd[i] = (plus - minus) / (2.0 * h)
    scale = max(float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(np.abs(grad - fd))) / scale, grad, fd


def run_gradcheck(sched, instances=100, modes=("full_vjp", "identity_jacobian"), seed=0,
                  max_dim=8, rel_step=1e-4, model_cls=GaussianMixtureScore):
    """Check every mode on ``instances`` random problems.

    Returns ``{mode: {"max_rel_err", "worst"}}`` where ``worst`` describes the
    instance with the largest error.
    """
    results = {}
    for m, mode in enumerate(modes):
        rng = np.random.default_rng([seed, m])
        worst = None
        for n in range(instances):
            inst = random_instance(rng, sched, mode, max_dim, model_cls)
            err, grad, fd = check_instance(inst, rel_step)
            if worst is None or err > worst["rel_err"]:
                worst = {"index": n, "rel_err": err, "dim": int(inst.eps.size), "t": inst.t,
                         "t_prev": inst.t_prev, "w": inst.w, "cfg": inst.cfg.to_dict(),
                         "grad": grad.tolist(), "fd": fd.tolist()}
        results[mode] = {"max_rel_err": worst["rel_err"] if worst else 0.0, "worst": worst}
    return results
