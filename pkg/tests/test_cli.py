import csv
import json

import numpy as np
import pytest

from drfsample.cli import main
from drfsample.config import DEFAULTS, apply_override, config_hash, load_config, resolve
from drfsample.errors import ConfigError
from drfsample.ppm import read_ppm
from drfsample.score import GaussianMixtureScore


def write(path, text):
    path.write_text(text)
    return str(path)


class TestConfig:
    def test_defaults_resolve(self):
        rc = resolve()
        assert rc.steps == 50 and rc.drf_enabled and rc.drf.omega == rc.omega == 5.0
        assert rc.variant().name == "drf"

    def test_toml_and_json_agree(self, tmp_path):
        t = write(tmp_path / "a.toml", "seed = 4\n[drf]\nN = 2\n[sampler]\nkind = 'dpm_solver_pp_2m'\n")
        j = write(tmp_path / "a.json", json.dumps({"seed": 4, "drf": {"N": 2}, "sampler": {"kind": "dpm_solver_pp_2m"}}))
        assert resolve(t).hash == resolve(j).hash
        assert resolve(t).drf.N == 2

    def test_unknown_key_names_path(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(write(tmp_path / "b.toml", "[drf]\nlambda = 2.0\n"))
        assert info.value.field == "drf.lambda"

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_config(tmp_path / "nope.toml")
        assert "nope.toml" in str(info.value)

    def test_override_parsing(self):
        cfg = load_config()
        apply_override(cfg, "drf.N=4")
        apply_override(cfg, "drf.weight_kind=linear")
        apply_override(cfg, "bench.values.N=[1, 3]")
        apply_override(cfg, "task.pose=[7.5, 7.5, 0.0, 4.0]")
        assert cfg["drf"]["N"] == 4 and cfg["drf"]["weight_kind"] == "linear"
        assert cfg["bench"]["values"]["N"] == [1, 3]

    @pytest.mark.parametrize("bad,field", [("drf.nope=1", "drf.nope"), ("nope.x=1", "nope"), ("drf.N", "--set")])
    def test_bad_override(self, bad, field):
        with pytest.raises(ConfigError) as info:
            apply_override(load_config(), bad)
        assert info.value.field == field

    def test_validation_after_overrides(self):
        with pytest.raises(ConfigError) as info:
            resolve(overrides=["drf.lam=-1"])
        assert info.value.field == "drf.lam"
        with pytest.raises(ConfigError):
            resolve(overrides=["sampler.steps=20"])
        resolve(overrides=["sampler.steps=20", "drf.enabled=false"])

    def test_hash_stable_and_sensitive(self):
        assert config_hash(load_config()) == config_hash(json.loads(json.dumps(DEFAULTS)))
        assert resolve().hash == resolve().hash
        assert resolve(overrides=["drf.N=2"]).hash != resolve().hash
        assert resolve(seed=1).hash != resolve().hash

    def test_plan_from_config(self):
        rc = resolve(overrides=["bench.axes=['N']", "bench.values.N=[1, 3]", "bench.seeds=4"])
        plan = rc.plan(validate=True)
        assert [v.name for v in plan.variants] == ["N1", "N3"] and plan.seeds == (0, 1, 2, 3)

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            resolve(overrides=["bench.axes=['temperature']"])


class TestCLI:
    def test_help_documents_exit_codes(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["sample", "--help"])
        assert info.value.code == 0
        out = capsys.readouterr().out
        assert "exit codes" in out and "DRF_LOG" in out

    def test_sample_artifacts(self, tmp_path, capsys):
        cfg = write(tmp_path / "demo.toml", "[sampler]\nsteps = 30\n")
        assert main(["sample", "--config", cfg, "--set", "drf.N=3", "--out", str(tmp_path / "o")]) == 0
        out = tmp_path / "o"
        for name in ("out.ppm", "structure.ppm", "appearance.ppm", "trace.jsonl", "steps.csv", "metrics.csv",
                     "config.json"):
            assert (out / name).exists()
        assert read_ppm(out / "out.ppm").shape == (16, 16, 3)
        stored = json.loads((out / "config.json").read_text())
        assert stored["hash"] in capsys.readouterr().out
        assert stored["config"]["drf"]["N"] == 3

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["sample", "--config", str(tmp_path / "missing.toml")]) == 2
        assert "missing.toml" in capsys.readouterr().err

    def test_invalid_value_exits_2_with_field(self, capsys):
        assert main(["sample", "--set", "control.app_strength=3"]) == 2
        assert "control.app_strength" in capsys.readouterr().err

    def test_empty_window_matches_baseline(self, tmp_path):
        base = ["sample", "--seed", "7", "--set", "sampler.steps=30"]
        assert main(base + ["--set", "drf.window_len=0", "--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--set", "drf.enabled=false", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "out.ppm").read_bytes() == (tmp_path / "b" / "out.ppm").read_bytes()
        with (tmp_path / "a" / "metrics.csv").open() as fa, (tmp_path / "b" / "metrics.csv").open() as fb:
            ra, rb = next(csv.DictReader(fa)), next(csv.DictReader(fb))
        assert ra["app_stat_dist"] == rb["app_stat_dist"]

    def test_numeric_failure_exits_3(self, monkeypatch, capsys):
        def broken(self, z, y, t):
            return np.full(np.shape(z), np.nan)

        monkeypatch.setattr(GaussianMixtureScore, "predict", broken)
        assert main(["sample", "--set", "sampler.steps=30"]) == 3
        assert "step" in capsys.readouterr().err

    def test_bench_weight_kinds(self, tmp_path, capsys):
        args = ["bench", "--out", str(tmp_path), "--set", "bench.axes=['weight_kind']", "--set", "bench.seeds=2",
                "--set", "sampler.steps=30", "--set", "bench.save_runs=false"]
        assert main(args) == 0
        with (tmp_path / "aggregate.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["config_id"] for r in rows] == ["weight_exponential", "weight_linear", "weight_cosine"]

    def test_bench_sampler_axis_runtime_columns(self, tmp_path):
        args = ["bench", "--out", str(tmp_path), "--set", "bench.axes=['sampler']",
                "--set", "bench.values.sampler=['ddim', 'dpm_solver_pp_2m']", "--set", "bench.seeds=2",
                "--set", "sampler.steps=30", "--set", "bench.save_runs=false"]
        assert main(args) == 0
        with (tmp_path / "aggregate.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["sampler"] for r in rows] == ["ddim", "dpm_solver_pp_2m"]
        assert all(float(r["runtime_median_s"]) > 0 for r in rows)

    def test_bench_empty_plan(self, tmp_path):
        assert main(["bench", "--out", str(tmp_path), "--set", "bench.axes=[]"]) == 0
        assert len((tmp_path / "results.csv").read_text().splitlines()) == 1

    def test_bench_deterministic(self, tmp_path):
        args = ["bench", "--set", "bench.seeds=2", "--set", "sampler.steps=30", "--set", "bench.save_runs=false"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--set", "gradcheck.instances=20"]) == 0
        out = capsys.readouterr().out
        assert "full_vjp" in out and "identity_jacobian" in out

    def test_gradcheck_corrupted_vjp_exits_1(self, monkeypatch, capsys):
        real = GaussianMixtureScore.vjp
        monkeypatch.setattr(GaussianMixtureScore, "vjp", lambda self, z, y, t, u: 1.05 * real(self, z, y, t, u))
        assert main(["gradcheck", "--set", "gradcheck.instances=5"]) == 1
        out = capsys.readouterr().out
        assert "FAILED" in out and "worst instance" in out

    def test_module_entry_point(self):
        import subprocess
        import sys

        proc = subprocess.run([sys.executable, "-m", "drfsample", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout
