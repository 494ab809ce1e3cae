"""Procedural structure/appearance fusion benchmark.

A task pairs a binary shape (the structure reference) with a palette
texture (the appearance reference).  The toy score model knows a
*generation* class made of shape x palette templates and a disjoint
*appearance* class made of palette textures, so a good fusion has to pick
the template whose shape follows the structure reference and whose colours
follow the appearance reference.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .control import ControlContext, ToyControlledStep, controlled_sample, encode_toy_image
from .drf import DRFConfig, DRFHook
from .errors import ConfigError, DRFError
from .metrics import METRIC_COLUMNS, evaluate
from .ppm import write_ppm
from .sampler import SAMPLER_KINDS, SamplerKind
from .schedule import NoiseSchedule, make_step_grid
from .score import GaussianMixtureScore

log = logging.getLogger(__name__)

__all__ = [
    "SHAPES",
    "PALETTES",
    "TaskSpec",
    "Variant",
    "ExperimentPlan",
    "render_shape",
    "render_texture",
    "generate_task",
    "build_toy_model",
    "run_single",
    "run_experiment",
    "ablation_plan",
    "plan_digest",
    "BenchAbort",
    "AXES",
]

CANVAS = (3, 16, 16)
SHAPES = ("disk", "bar", "L-shape", "ring")
STRUCT_LEVEL = 0.8
GEN_LABEL, APP_LABEL = 0, 1

# per-channel (mean, std) targets; |mean| + sqrt(3) * std <= 1 keeps textures in [-1, 1]
PALETTES = {
    "ember": ((0.35, -0.25, -0.30), (0.35, 0.20, 0.20)),
    "moss": ((-0.30, 0.30, -0.20), (0.20, 0.35, 0.15)),
    "glacier": ((-0.25, 0.05, 0.35), (0.15, 0.25, 0.35)),
    "dusk": ((0.10, -0.35, 0.20), (0.30, 0.15, 0.30)),
}


@dataclass(frozen=True)
class TaskSpec:
    """One structure/appearance pair.

    ``pose`` is ``(row, col, angle_deg, size)`` in pixels; ``palette`` is a
    name from :data:`PALETTES` or an explicit ``((means), (stds))`` pair.
    ``texture`` in [0, 1] is the share of fine-grained noise in the
    appearance texture.
    """

    structure_shape: str = "disk"
    pose: tuple = (7.5, 7.5, 0.0, 5.0)
    palette: object = "ember"
    texture: float = 0.3
    gen_label: int = GEN_LABEL
    app_label: int = APP_LABEL
    seed: int = 0

    def palette_stats(self):
        pal = PALETTES[self.palette] if isinstance(self.palette, str) else self.palette
        means, stds = (np.asarray(v, dtype=np.float64) for v in pal)
        return means, stds

    def validate(self):
        if self.structure_shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.structure_shape!r}", field="task.structure_shape")
        if isinstance(self.palette, str) and self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}", field="task.palette")
        means, stds = self.palette_stats()
        if means.shape != (CANVAS[0],) or stds.shape != (CANVAS[0],) or np.any(stds < 0):
            raise ConfigError("palette needs one mean and one non-negative std per channel",
                              field="task.palette")
        if not 0.0 <= self.texture <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.texture!r}", field="task.texture")
        mask = render_shape(self.structure_shape, self.pose)
        if not mask.any() or mask.all():
            raise ConfigError("shape does not fit the canvas", field="task.pose")
        return self


def render_shape(shape, pose, size=CANVAS[1:]):
    """Rasterize a shape from pixel centres; returns a boolean (H, W) mask."""
    row, col, angle, scale = pose
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = math.radians(angle)
    # coordinates in the shape's own frame
    u = (xx - col) * math.cos(th) + (yy - row) * math.sin(th)
    v = -(xx - col) * math.sin(th) + (yy - row) * math.cos(th)
    if shape == "disk":
        # nearest round(pi r^2) pixel centres: exact area, where a centre test is off by up to ~r
        d2 = (u**2 + v**2).ravel()
        n = min(int(round(math.pi * scale**2)), int(np.count_nonzero(d2 <= (scale + 1.0) ** 2)))
        order = np.argsort(d2, kind="stable")
        mask = np.zeros(h * w, dtype=bool)
        mask[order[:n]] = True
        return mask.reshape(h, w)
    if shape == "ring":
        r2 = u**2 + v**2
        return (r2 <= scale**2) & (r2 >= (0.5 * scale) ** 2)
    if shape == "bar":
        return (np.abs(u) <= scale) & (np.abs(v) <= 0.4 * scale)
    if shape == "L-shape":
        arm = 0.35 * scale
        vertical = (np.abs(u + scale - arm) <= arm) & (np.abs(v) <= scale)
        horizontal = (np.abs(v - scale + arm) <= arm) & (np.abs(u) <= scale)
        return vertical | horizontal
    raise ConfigError(f"unknown shape {shape!r}", field="task.structure_shape")


def render_texture(means, stds, texture, seed, size=CANVAS):
    """Seeded texture whose channels have exactly the given mean and std.

    Smoothed noise is mixed with a ``texture`` share of raw noise, mapped to a
    uniform profile by ranks, then standardized.
    """
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(size)
    out = np.empty(size)
    for c in range(size[0]):
        coarse = gaussian_filter(raw[c], 1.5, mode="wrap")
        coarse /= coarse.std()
        mixed = (1.0 - texture) * coarse + texture * raw[c]
        ranks = np.argsort(np.argsort(mixed, axis=None)).reshape(mixed.shape)
        flat = ranks - ranks.mean()
        out[c] = means[c] + stds[c] * flat / flat.std()
    return out


def structure_image(mask):
    return np.where(mask, STRUCT_LEVEL, -STRUCT_LEVEL)[None].repeat(CANVAS[0], axis=0)


def generate_task(spec: TaskSpec, struct_strength=0.6, app_strength=0.1, struct_cutoff=0.6):
    """Render a task into ``(z0_structure, z0_appearance, ControlContext)``."""
    spec.validate()
    mask = render_shape(spec.structure_shape, spec.pose)
    z_s = encode_toy_image(structure_image(mask))
    means, stds = spec.palette_stats()
    z_a = encode_toy_image(render_texture(means, stds, spec.texture, spec.seed))
    ctx = ControlContext(
        z_s, z_a, spec.gen_label, spec.app_label,
        struct_strength=struct_strength, app_strength=app_strength, struct_cutoff=struct_cutoff,
        mask=mask.astype(np.float64),
    )
    return z_s, z_a, ctx


def palette_template(mask, means, stds):
    """Two-colour image with the palette's channel statistics at this mask's area.

    The object colour sits above the background colour in every channel, so
    the channel-mean threshold recovers the mask.
    """
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    f = float(mask.mean())
    gap = stds / math.sqrt(f * (1.0 - f))
    bg = means - f * gap
    obj = bg + gap
    return np.where(mask[None], obj[:, None, None], bg[:, None, None])


def template_poses():
    poses = []
    for shape in SHAPES:
        for angle in (0.0, 45.0, 90.0):
            if shape in ("disk", "ring") and angle:
                continue
            poses.append((shape, (7.5, 7.5, angle, 5.5 if shape != "bar" else 6.5)))
    return poses


def build_toy_model(sched: NoiseSchedule, variance=0.02, palettes=None, texture_seeds=(101, 102)):
    """Mixture score for the benchmark.

    Label ``GEN_LABEL`` owns one template per (shape pose, palette); label
    ``APP_LABEL`` owns palette textures.  The two sets are disjoint.
    """
    palettes = list(PALETTES) if palettes is None else list(palettes)
    gen, app = [], []
    for shape, pose in template_poses():
        mask = render_shape(shape, pose)
        for name in palettes:
            gen.append(palette_template(mask, *PALETTES[name]))
    for name in palettes:
        for s in texture_seeds:
            app.append(render_texture(*PALETTES[name], 0.3, s))
    means = np.stack(gen + app)
    labels = {GEN_LABEL: range(len(gen)), APP_LABEL: range(len(gen), len(gen) + len(app))}
    return GaussianMixtureScore(means, sched, labels, variance=variance)


class BenchAbort(DRFError):
    """Too many runs in a plan failed."""


@dataclass(frozen=True)
class Variant:
    """A named DRF configuration (``drf=None`` is the no-DRF baseline) plus sampler."""

    name: str
    drf: DRFConfig | None = field(default_factory=DRFConfig)
    sampler: object = "ddim"

    def __post_init__(self):
        SamplerKind.coerce(self.sampler)
        if not self.name or "/" in self.name:
            raise ConfigError(f"invalid variant name {self.name!r}", field="bench.variants")

    def describe(self):
        kind = SamplerKind.coerce(self.sampler)
        return {"name": self.name, "sampler": kind.name, "eta": kind.eta,
                "drf": None if self.drf is None else self.drf.to_dict()}


@dataclass(frozen=True)
class ExperimentPlan:
    """Variants run on one task over a shared (paired) seed list.

    ``variants[0]`` is the reference for paired deltas.
    """

    variants: tuple = ()
    task: TaskSpec = TaskSpec()
    seeds: tuple = tuple(range(50))
    steps: int = 50
    omega: float = 5.0
    struct_strength: float = 0.8
    app_strength: float = 0.1
    struct_cutoff: float = 0.6
    workers: int = 1
    max_fail_frac: float = 0.1
    save_runs: bool = True
    plots: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def validate(self):
        if self.variants and not self.seeds:
            raise ConfigError("at least one repetition is required", field="bench.seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct", field="bench.seeds")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}", field="bench.variants")
        if self.workers < 1:
            raise ConfigError(f"must be >= 1, got {self.workers!r}", field="bench.workers")
        self.task.validate()
        generate_task(self.task, self.struct_strength, self.app_strength, self.struct_cutoff)
        for v in self.variants:
            if v.drf is not None:
                v.drf.check_grid(self.steps)
        return self

    def context(self):
        return generate_task(self.task, self.struct_strength, self.app_strength, self.struct_cutoff)


AXES = ("drf", "af_only", "N", "window", "weight_kind", "sampler", "gradient_mode")


def ablation_plan(axes=("drf",), base: DRFConfig | None = None, values=None, **plan_kwargs):
    """Build a plan whose variants sweep the named ablation axes.

    Each axis contributes its variants (deduplicated by name); ``values``
    optionally overrides an axis's value list, e.g. ``{"N": [1, 3]}``.
    """
    base = base or DRFConfig()
    values = values or {}
    defaults = {
        "drf": ["off", "on"],
        "af_only": ["drf", "af_only"],
        "N": [1, 2, 3, 4, 5, 6],
        "window": [10, 20, 50],
        "weight_kind": ["exponential", "linear", "cosine"],
        "sampler": list(SAMPLER_KINDS),
        "gradient_mode": ["full_vjp", "identity_jacobian"],
    }
    variants = {}
    for axis in axes:
        if axis not in AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}", field="bench.axes")
        for value in values.get(axis, defaults[axis]):
            v = _axis_variant(axis, value, base)
            variants.setdefault(v.name, v)
    return ExperimentPlan(tuple(variants.values()), **plan_kwargs)


def _axis_variant(axis, value, base: DRFConfig) -> Variant:
    if axis == "drf":
        return Variant("baseline", None) if value in ("off", False) else Variant("drf", base)
    if axis == "af_only":
        return Variant("af_only", base.with_(rho=0.0)) if value == "af_only" else Variant("drf", base)
    if axis == "N":
        return Variant(f"N{int(value)}", base.with_(N=int(value)))
    if axis == "window":
        # a full window starts at step 0; shorter ones keep the default skip
        skip = 0 if int(value) >= 50 else base.window_skip
        return Variant(f"window{int(value)}", base.with_(window_skip=skip, window_len=int(value)))
    if axis == "weight_kind":
        return Variant(f"weight_{value}", base.with_(weight_kind=value))
    if axis == "sampler":
        return Variant(f"sampler_{value}", base, sampler=value)
    return Variant(f"grad_{value}", base.with_(gradient_mode=value))


def run_single(plan: ExperimentPlan, variant: Variant, seed, model, sched):
    """One controlled (+DRF) trajectory; returns ``(z, trace, report, info)``."""
    z_s, z_a, ctx = plan.context()
    grid = make_step_grid(sched, plan.steps)
    step = ToyControlledStep(grid, variant.sampler, plan.omega)
    hook = None
    if variant.drf is not None:
        hook = DRFHook(step, variant.drf, seed)
        step = hook
    start = time.perf_counter()
    z, trace = controlled_sample(step, ctx, model, sched, seed)
    elapsed = time.perf_counter() - start
    if not np.all(np.isfinite(z)):
        raise DRFError(f"non-finite output for {variant.name} seed {seed}")
    trace.meta.update({"variant": variant.name, "sampler": SamplerKind.coerce(variant.sampler).name})
    report = evaluate(z, z_s, z_a, mask=ctx.mask)
    info = {"runtime_s": elapsed, "drf_calls": hook.calls if hook else 0}
    return z, trace, report, info


RESULT_COLUMNS = METRIC_COLUMNS + ["sampler", "drf_calls", "status", "error"]
AGGREGATE_COLUMNS = [
    "config_id", "sampler", "runs", "failed",
    "struct_iou_median", "struct_iou_iqr", "app_stat_dist_median", "app_stat_dist_iqr",
    "self_sim_dist_median", "self_sim_dist_iqr", "success_rate",
    "runtime_median_s", "runtime_iqr_s",
]


def _cell(args):
    plan, variant, seed, model, sched, out_dir = args
    try:
        z, trace, report, info = run_single(plan, variant, seed, model, sched)
    except DRFError as exc:
        return {"seed": seed, "config_id": variant.name, "sampler": SamplerKind.coerce(variant.sampler).name,
                "status": "failed", "error": str(exc)}, None
    if out_dir is not None and plan.save_runs:
        run_dir = Path(out_dir) / "runs" / f"{variant.name}-s{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        trace.write_jsonl(run_dir / "trace.jsonl")
        write_ppm(run_dir / "out.ppm", z)
    row = report.as_row(seed, variant.name)
    row.update(sampler=SamplerKind.coerce(variant.sampler).name, drf_calls=info["drf_calls"], status="ok", error="")
    return row, {"runtime_s": info["runtime_s"], "trace": trace}


def _stats(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"median": None, "iqr": None}
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1)}


def _loss_curve(traces):
    """Mean L_app per DRF iteration index across runs."""
    by_i = {}
    for trace in traces:
        for rec in trace.of_kind("drf_iter"):
            by_i.setdefault(rec["i"], []).append(rec["L_app"])
    return [float(np.mean(by_i[i])) for i in sorted(by_i)]


def run_experiment(plan: ExperimentPlan, model=None, out_dir=None, sched=None):
    """Run every (variant, seed) cell and aggregate.

    Writes ``results.csv`` (one row per run, deterministic for a given plan),
    ``aggregate.csv`` (one row per variant, with runtime columns) and
    ``summary.json`` (aggregates, paired deltas against the first variant and
    rankings) when ``out_dir`` is given.  Failed runs
    are recorded and skipped; more than ``max_fail_frac`` failures raises
    :class:`BenchAbort`.
    """
    from .schedule import make_schedule

    plan.validate()
    sched = sched or make_schedule()
    model = model if model is not None else build_toy_model(sched)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    cells = [(plan, v, s, model, sched, out_dir) for v in plan.variants for s in plan.seeds]
    budget = plan.max_fail_frac * len(cells)
    rows, extras, failures = [], {}, 0

    def collect(row, extra):
        nonlocal failures
        rows.append(row)
        if extra is None:
            failures += 1
            log.warning("run %s seed %s failed: %s", row["config_id"], row["seed"], row["error"])
            if failures > budget:
                raise BenchAbort(f"{failures} of {len(cells)} runs failed; aborting plan")
        else:
            extras[(row["config_id"], row["seed"])] = extra

    if plan.workers > 1 and len(cells) > 1:
        with cf.ProcessPoolExecutor(max_workers=plan.workers) as pool:
            for row, extra in pool.map(_cell, cells):
                collect(row, extra)
    else:
        for c in cells:
            collect(*_cell(c))

    order = {(v.name, s): n for n, (v, s) in enumerate((c[1], c[2]) for c in cells)}
    rows.sort(key=lambda r: order[(r["config_id"], r["seed"])])
    summary = summarize(plan, rows, extras)
    if out_dir is not None:
        out = Path(out_dir)
        with (out / "results.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        write_aggregate_csv(summary, out / "aggregate.csv")
        if plan.plots and plan.variants:
            from .plots import write_plots

            write_plots(out / "plots", plan, summary)
    log.info("plan finished: %d runs, %d failed", len(rows), failures)
    return summary


def write_aggregate_csv(summary, path):
    """One row per variant; only the runtime columns vary between identical runs."""
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS)
        w.writeheader()
        for name, s in summary["variants"].items():
            row = {"config_id": name, "sampler": s["config"]["sampler"], "runs": s["runs"],
                   "failed": s["failed"], "success_rate": s["success_rate"],
                   "runtime_median_s": s["runtime_s"]["median"], "runtime_iqr_s": s["runtime_s"]["iqr"]}
            for metric in ("struct_iou", "app_stat_dist", "self_sim_dist"):
                row[f"{metric}_median"] = s[metric]["median"]
                row[f"{metric}_iqr"] = s[metric]["iqr"]
            w.writerow(row)


def summarize(plan: ExperimentPlan, rows, extras):
    ok = [r for r in rows if r["status"] == "ok"]
    variants = {}
    for v in plan.variants:
        mine = [r for r in ok if r["config_id"] == v.name]
        times = [extras[(v.name, r["seed"])]["runtime_s"] for r in mine]
        variants[v.name] = {
            "config": v.describe(),
            "runs": len(mine),
            "failed": sum(1 for r in rows if r["config_id"] == v.name and r["status"] != "ok"),
            "struct_iou": _stats([r["struct_iou"] for r in mine]),
            "app_stat_dist": _stats([r["app_stat_dist"] for r in mine]),
            "self_sim_dist": _stats([r["self_sim_dist"] for r in mine]),
            "success_rate": float(np.mean([r["success"] for r in mine])) if mine else None,
            "runtime_s": _stats(times),
            "L_app_by_iter": _loss_curve(extras[(v.name, r["seed"])]["trace"] for r in mine),
        }
    paired = {}
    if plan.variants:
        ref = plan.variants[0].name
        ref_rows = {r["seed"]: r for r in ok if r["config_id"] == ref}
        for v in plan.variants[1:]:
            pairs = [(ref_rows[r["seed"]], r) for r in ok
                     if r["config_id"] == v.name and r["seed"] in ref_rows]
            if not pairs:
                continue
            b = np.array([p[0]["app_stat_dist"] for p in pairs])
            d = np.array([p[1]["app_stat_dist"] for p in pairs])
            rel = np.divide(b - d, b, out=np.zeros_like(b), where=b > 0)
            paired[v.name] = {
                "reference": ref,
                "seeds": [p[0]["seed"] for p in pairs],
                "app_delta": (d - b).tolist(),
                "app_le_fraction": float(np.mean(d <= b)),
                "app_rel_reduction_median": float(np.median(rel)),
                "iou_median_change": float(np.median([p[1]["struct_iou"] for p in pairs])
                                           - np.median([p[0]["struct_iou"] for p in pairs])),
            }
    ranked = [n for n, s in variants.items() if s["runs"]]
    ranked.sort(key=lambda n: (variants[n]["app_stat_dist"]["median"], -variants[n]["struct_iou"]["median"]))
    return {
        "task": asdict(plan.task),
        "seeds": list(plan.seeds),
        "variants": variants,
        "paired": paired,
        "ranking": ranked,
        "failed_runs": [r for r in rows if r["status"] != "ok"],
    }


def plan_digest(plan: ExperimentPlan) -> str:
    payload = {
        "variants": [v.describe() for v in plan.variants],
        "task": asdict(plan.task),
        **{k: getattr(plan, k) for k in ("seeds", "steps", "omega", "struct_strength",
                                          "app_strength", "struct_cutoff")},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]
