"""Structure and appearance proxies for generated toy latents."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .control import channel_stats, structure_mask
from .errors import ConfigError, DimensionError

__all__ = [
    "MetricReport",
    "mask_iou",
    "appearance_stat_distance",
    "patch_self_similarity_distance",
    "evaluate",
    "write_metric_csv",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ["seed", "config_id", "struct_iou", "app_stat_dist", "self_sim_dist", "success"]


@dataclass(frozen=True)
class MetricReport:
    struct_iou: float
    app_stat_dist: float
    self_sim_dist: float
    success: bool

    def as_row(self, seed, config_id):
        return {"seed": seed, "config_id": config_id, **asdict(self)}


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; 1 when both are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    _same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def appearance_stat_distance(gen, app) -> float:
    """Euclidean distance between stacked per-channel (mean, std) vectors."""
    gen = np.asarray(gen, dtype=np.float64)
    app = np.asarray(app, dtype=np.float64)
    _same_shape(gen, app)
    mg, sg = channel_stats(gen)
    ma, sa = channel_stats(app)
    return float(np.linalg.norm(np.concatenate([mg - ma, sg - sa])))


def _patch_gram(x, patch):
    c, h, w = x.shape
    blocks = x.reshape(c, h // patch, patch, w // patch, patch)
    vecs = blocks.transpose(1, 3, 0, 2, 4).reshape((h // patch) * (w // patch), -1)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    return unit @ unit.T


def patch_self_similarity_distance(gen, struct_ref, patch=4) -> float:
    """Frobenius distance between cosine self-similarity matrices of patch vectors.

    Latents are ``(C, H, W)``; non-overlapping ``patch x patch`` blocks
    (all channels) form the vectors.  All-zero patches have zero similarity.
    """
    gen = np.asarray(gen, dtype=np.float64)
    struct_ref = np.asarray(struct_ref, dtype=np.float64)
    _same_shape(gen, struct_ref)
    if gen.ndim == 2:
        gen, struct_ref = gen[None], struct_ref[None]
    if gen.ndim != 3:
        raise DimensionError(f"expected (C, H, W) latents, got {gen.shape}")
    if int(patch) != patch or patch < 1 or gen.shape[1] % patch or gen.shape[2] % patch:
        raise ConfigError(f"patch {patch!r} must divide spatial dims {gen.shape[1:]}", field="patch")
    return float(np.linalg.norm(_patch_gram(gen, int(patch)) - _patch_gram(struct_ref, int(patch))))


def evaluate(gen, z0_structure, z0_appearance, *, theta_s=0.7, theta_a=0.3, patch=4,
             mask=None) -> MetricReport:
    ref_mask = structure_mask(z0_structure) if mask is None else mask
    iou = mask_iou(structure_mask(gen), ref_mask)
    app = appearance_stat_distance(gen, z0_appearance)
    ssim = patch_self_similarity_distance(gen, z0_structure, patch)
    return MetricReport(iou, app, ssim, bool(iou >= theta_s and app <= theta_a))


def write_metric_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
