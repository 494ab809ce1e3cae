"""Run configuration: defaults, file loading, dotted overrides and a stable hash.

A config is a nested dict of plain values.  Files are TOML (or JSON, picked
by suffix); ``--set section.key=value`` overrides are applied after parsing
and before validation, and :func:`config_hash` digests the resolved state.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import tomli

from .bench import AXES, ExperimentPlan, TaskSpec, Variant, ablation_plan
from .drf import DRFConfig
from .errors import ConfigError
from .sampler import SamplerKind
from .schedule import make_schedule

__all__ = [
    "DEFAULTS",
    "load_config",
    "apply_override",
    "resolve",
    "config_hash",
    "ResolvedConfig",
]

DEFAULTS = {
    "seed": 0,
    "schedule": {"kind": "linear", "T_train": 1000, "beta_min": 1e-4, "beta_max": 2e-2},
    "model": {"kind": "toy_gmm", "variance": 0.02, "path": ""},
    "sampler": {"kind": "ddim", "steps": 50, "eta": 0.0, "omega": 5.0},
    "control": {"struct_strength": 0.8, "app_strength": 0.1, "struct_cutoff": 0.6},
    "task": {"shape": "disk", "pose": [7.5, 7.5, 0.0, 5.0], "palette": "ember", "texture": 0.3,
             "gen_label": 0, "app_label": 1},
    # DRF reuses sampler.omega so both branches see one guidance scale
    "drf": {"enabled": True, **{k: v for k, v in DRFConfig().to_dict().items() if k != "omega"}},
    "bench": {"axes": ["drf"], "values": {}, "seeds": 50, "workers": 1, "plots": False,
              "save_runs": True},
    "gradcheck": {"instances": 100, "max_dim": 8, "tol": 1e-4, "rel_step": 1e-4},
    "io": {"out_dir": "out", "formats": ["ppm", "jsonl", "csv"]},
}


def load_config(path=None):
    """Defaults merged with the file at ``path`` (TOML, or JSON for ``.json``)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}", field="config") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else tomli.loads(text)
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}", field="config") from None
    _merge(cfg, data, "")
    return cfg


def _merge(dst, src, prefix):
    for key, value in src.items():
        path = f"{prefix}{key}"
        if key not in dst:
            raise ConfigError("unknown key", field=path)
        if isinstance(dst[key], dict) and key != "values":
            if not isinstance(value, dict):
                raise ConfigError("expected a table", field=path)
            _merge(dst[key], value, path + ".")
        else:
            dst[key] = value


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(cfg, assignment):
    """Apply one ``dotted.key=value`` override in place; values parse as TOML literals."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value", field="--set")
    key, _, raw = assignment.partition("=")
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError("unknown section", field=".".join(parts[: i + 1]))
        node = node[part]
    leaf = parts[-1]
    if leaf not in node and not (len(parts) >= 2 and parts[-2] == "values"):
        raise ConfigError("unknown key", field=key.strip())
    node[leaf] = _parse_value(raw.strip())
    return cfg


def config_hash(cfg) -> str:
    """Stable digest of a resolved config (key order and float formatting independent)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ResolvedConfig:
    """Validated objects built from a config dict."""

    def __init__(self, cfg):
        self.raw = cfg
        self.hash = config_hash(cfg)
        self.seed = _int(cfg["seed"], "seed")
        s = cfg["schedule"]
        self.sched = make_schedule(s["kind"], _int(s["T_train"], "schedule.T_train"),
                                   s["beta_min"], s["beta_max"])
        sm = cfg["sampler"]
        self.sampler = SamplerKind(sm["kind"], sm["eta"])
        self.steps = _int(sm["steps"], "sampler.steps")
        self.omega = float(sm["omega"])
        if not self.omega >= 0:
            raise ConfigError(f"must be >= 0, got {self.omega!r}", field="sampler.omega")
        d = dict(cfg["drf"])
        self.drf_enabled = bool(d.pop("enabled"))
        d["omega"] = self.omega
        self.drf = _build(DRFConfig, d, "drf")
        t = cfg["task"]
        self.task = _build(TaskSpec, {
            "structure_shape": t["shape"], "pose": tuple(t["pose"]),
            "palette": t["palette"] if isinstance(t["palette"], str) else tuple(map(tuple, t["palette"])),
            "texture": t["texture"], "gen_label": t["gen_label"], "app_label": t["app_label"],
            "seed": self.seed,
        }, "task")
        c = cfg["control"]
        self.control = {k: float(c[k]) for k in ("struct_strength", "app_strength", "struct_cutoff")}
        b = cfg["bench"]
        axes = list(b["axes"])
        for axis in list(axes) + list(b["values"]):
            if axis not in AXES:
                raise ConfigError(f"unknown axis {axis!r}; choose from {AXES}", field="bench.axes")
        self.bench_axes = axes
        self.bench_values = dict(b["values"])
        self.bench_seeds = _seed_list(b["seeds"], self.seed)
        self.workers = _int(b["workers"], "bench.workers")
        if self.workers < 1:
            raise ConfigError(f"must be >= 1, got {self.workers}", field="bench.workers")
        self.model_cfg = cfg["model"]
        if self.model_cfg["kind"] not in ("toy_gmm", "gmm_json", "denoiser"):
            raise ConfigError(f"unknown model kind {self.model_cfg['kind']!r}", field="model.kind")
        if self.model_cfg["kind"] != "toy_gmm" and not self.model_cfg["path"]:
            raise ConfigError("a weights path is required for this model kind", field="model.path")
        self.gradcheck = cfg["gradcheck"]
        self.out_dir = Path(cfg["io"]["out_dir"])
        if self.drf_enabled:
            self.drf.check_grid(self.steps)

    def variant(self):
        return Variant("drf" if self.drf_enabled else "baseline",
                       self.drf if self.drf_enabled else None, self.sampler)

    def plan(self, validate=False):
        kwargs = dict(task=self.task, seeds=self.bench_seeds, steps=self.steps, omega=self.omega,
                      workers=self.workers, plots=bool(self.raw["bench"]["plots"]),
                      save_runs=bool(self.raw["bench"]["save_runs"]), **self.control)
        try:
            plan = ablation_plan(self.bench_axes, self.drf, self.bench_values, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc), field="bench.values") from None
        if self.sampler != SamplerKind() and "sampler" not in self.bench_axes:
            plan = ExperimentPlan(tuple(
                Variant(v.name, v.drf, self.sampler) for v in plan.variants
            ), **kwargs)
        return plan.validate() if validate else plan

    def model(self):
        from .bench import build_toy_model
        from .denoiser import ToyDenoiser
        from .score import GaussianMixtureScore

        kind = self.model_cfg["kind"]
        if kind == "toy_gmm":
            return build_toy_model(self.sched, float(self.model_cfg["variance"]))
        if kind == "gmm_json":
            return GaussianMixtureScore.from_json(self.model_cfg["path"], self.sched)
        return ToyDenoiser.load(self.model_cfg["path"], self.sched)


def _int(v, name):
    if isinstance(v, bool) or int(v) != v:
        raise ConfigError(f"must be an integer, got {v!r}", field=name)
    return int(v)


def _seed_list(seeds, base):
    if isinstance(seeds, list):
        return tuple(_int(s, "bench.seeds") for s in seeds)
    n = _int(seeds, "bench.seeds")
    if n < 0:
        raise ConfigError(f"must be >= 0, got {n}", field="bench.seeds")
    return tuple(range(base, base + n))


def _build(cls, kwargs, section):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), field=section) from None


def resolve(path=None, overrides=(), **flags):
    """Load, override and validate; ``flags`` are CLI conveniences (seed, out, workers)."""
    cfg = load_config(path)
    for o in overrides:
        apply_override(cfg, o)
    if flags.get("seed") is not None:
        cfg["seed"] = int(flags["seed"])
    if flags.get("out") is not None:
        cfg["io"]["out_dir"] = str(flags["out"])
    if flags.get("workers") is not None:
        cfg["bench"]["workers"] = int(flags["workers"])
    return ResolvedConfig(cfg)
