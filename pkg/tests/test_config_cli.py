import json
from pathlib import Path

import pytest

from hmmle import __version__
from hmmle.cli import main
from hmmle.config import ConfigError, build_config, load_config, parse_kv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_cfg(tmp_path, text, name="run.cfg"):
    (tmp_path / "two_state.model").write_text((CONFIGS / "two_state.model").read_text())
    f = tmp_path / name
    f.write_text(text)
    return f


ESTIMATE = """model.file = two_state.model
run.theta0 = 1.0
run.T = 20
run.seed = 7
output.dir = out
"""


class TestConfig:
    def test_parse_kv_comments_and_duplicates(self):
        assert parse_kv("# c\na = 1\n\nb= x y\n") == {"a": "1", "b": "x y"}
        with pytest.raises(ConfigError, match="duplicate"):
            parse_kv("a = 1\na = 2\n")

    def test_bundled_configs_parse(self):
        for f in CONFIGS.glob("*.cfg"):
            cfg = load_config(f.stem if f.stem in ("estimate", "simulate", "filter", "fisher",
                                                     "profile", "identifiability")
                              else {"consistency": "study-consistency",
                                    "normality": "study-normality", "moments": "study-moments",
                                    "lln": "study-lln", "stability": "stability-suite"}[f.stem],
                              f)
            assert cfg.seed == 20240601

    def test_missing_seed(self, tmp_path):
        f = write_cfg(tmp_path, ESTIMATE.replace("run.seed = 7\n", ""))
        with pytest.raises(ConfigError, match="seed"):
            load_config("estimate", f)

    def test_nonpositive_dt(self, tmp_path):
        f = write_cfg(tmp_path, ESTIMATE + "run.dt = 0\n")
        with pytest.raises(ConfigError, match="dt"):
            load_config("estimate", f)

    def test_unknown_key(self, tmp_path):
        f = write_cfg(tmp_path, ESTIMATE + "run.bogus = 1\n")
        with pytest.raises(ConfigError, match="bogus"):
            load_config("estimate", f)

    def test_overrides(self, tmp_path):
        cfg = build_config("estimate", parse_kv(ESTIMATE), CONFIGS, seed=11, out=str(tmp_path),
                           workers=3)
        assert (cfg.seed, cfg.workers, Path(cfg.out_dir)) == (11, 3, tmp_path)


class TestCli:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip() == f"hmmle {__version__}"

    def test_missing_model_file(self, tmp_path, capsys):
        f = tmp_path / "run.cfg"
        f.write_text(ESTIMATE.replace("two_state.model", "nowhere.model"))
        assert main(["estimate", "--config", str(f)]) == 1
        assert str(tmp_path / "nowhere.model") in capsys.readouterr().err

    def test_unknown_command(self, tmp_path, capsys):
        f = write_cfg(tmp_path, ESTIMATE)
        assert main(["fly", "--config", str(f)]) == 1
        assert "unknown command" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["estimate", "--config", str(tmp_path / "none.cfg")]) == 1
        assert "none.cfg" in capsys.readouterr().err

    def test_precondition_violation_exit_1(self, tmp_path, capsys):
        f = write_cfg(tmp_path, ESTIMATE.replace("run.theta0 = 1.0", "run.theta0 = 9.0"))
        assert main(["estimate", "--config", str(f)]) == 1

    def test_estimate_deterministic_and_manifest(self, tmp_path):
        f = write_cfg(tmp_path, ESTIMATE)
        assert main(["estimate", "--config", str(f), "--out", str(tmp_path / "a")]) == 0
        assert main(["estimate", "--config", str(f), "--out", str(tmp_path / "b")]) == 0
        for name in ("records.csv", "mle.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        man = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert man["command"] == "estimate"
        assert man["version"] == __version__
        assert man["config"]["seed"] == 7
        assert man["wall_time_s"] > 0
        assert set(man["files"]) == {p.name for p in (tmp_path / "a").iterdir()}

    def test_seed_changes_result(self, tmp_path):
        f = write_cfg(tmp_path, ESTIMATE)
        main(["estimate", "--config", str(f), "--out", str(tmp_path / "a")])
        main(["estimate", "--config", str(f), "--out", str(tmp_path / "b"), "--seed", "8"])
        assert (tmp_path / "a" / "records.csv").read_bytes() != \
            (tmp_path / "b" / "records.csv").read_bytes()

    def test_simulate_and_filter_from_file(self, tmp_path):
        sim = write_cfg(tmp_path, ESTIMATE.replace("run.T = 20", "run.T = 2"), "sim.cfg")
        assert main(["simulate", "--config", str(sim), "--out", str(tmp_path / "s")]) == 0
        header = (tmp_path / "s" / "obs.csv").read_text().splitlines()[0]
        assert header.startswith("k,")
        filt = write_cfg(tmp_path, "model.file = two_state.model\nrun.theta = 1.0\n"
                         "run.obs_file = s/obs.csv\nrun.seed = 1\noutput.dir = f\n", "f.cfg")
        assert main(["filter", "--config", str(filt)]) == 0
        rows = (tmp_path / "f" / "filter.csv").read_text().splitlines()
        assert len(rows) == 2 + 2000
