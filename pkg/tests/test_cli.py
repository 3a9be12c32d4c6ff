from pathlib import Path

import pytest

from plumetrace import mesh as meshmod
from plumetrace.cli import load_config, main
from plumetrace.experiment import ScenarioConfig

DESK_HASH = "1d6eeab85a34ae50"
CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

TINY_CFG = """\
[mesh]
x0 = 0
y0 = 0
x1 = 10
y1 = 10
nx = 4
ny = 4

[flow]
kind = uniform
u = 0.05
v = 0.0

[physics]
diffusivity = 0.02
dt = auto
steps = 3
source_x = 5.0
source_y = 5.0
field_noise = 1e-4
strength_walk = 1e-4

[sensors]
layout = random
count = 5
detect_rate = 0.9
scale = 8.0
levels = 64
noise = 1e-4

[estimator]
kind = rbpf
size = 6
init_cov = 4.0

[run]
trials = 2
seed = 11
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


class TestConfigFile:
    def test_desk_config_matches_defaults(self):
        config = load_config(CONFIG_DIR / "desk.cfg")
        assert config == ScenarioConfig()
        assert config.scenario_hash() == DESK_HASH

    def test_enkf_variant_shares_scenario(self):
        config = load_config(CONFIG_DIR / "desk_enkf.cfg")
        assert config.estimator == "enkf"
        assert config.scenario_hash() == DESK_HASH

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[turbulence]\nintensity = 3\n")
        with pytest.raises(ValueError, match=r"unknown config section"):
            load_config(path)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[physics]\nviscosity = 3\n")
        with pytest.raises(ValueError, match=r"unknown key 'viscosity'"):
            load_config(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[physics]\nsteps = many\n")
        with pytest.raises(ValueError, match=r"bad value for \[physics\] steps"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_auto_dt_and_tuple_slots(self, tiny_cfg):
        config = load_config(tiny_cfg)
        assert config.dt is None
        assert config.domain == (0.0, 0.0, 10.0, 10.0)
        assert config.source == (5.0, 5.0)
        assert config.sensor_layout == "random"
        assert config.quantiser_scale == 8.0

    def test_invalid_config_rejected_on_load(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[sensors]\ncount = 0\n")
        with pytest.raises(ValueError, match="at least one sensor"):
            load_config(path)


class TestMeshCommand:
    def test_rect_mesh_written(self, tmp_path, capsys):
        out = tmp_path / "grid.txt"
        code = main(["mesh", "--rect", "0", "0", "1", "1",
                     "--nx", "3", "--ny", "2", "--out", str(out)])
        assert code == 0
        captured = capsys.readouterr().out
        assert "nodes 12  elements 12" in captured
        grid = meshmod.load_mesh(out)
        assert grid.node_count == 12

    def test_stability_printout(self, tmp_path, capsys):
        out = tmp_path / "grid.txt"
        code = main(["mesh", "--rect", "0", "0", "1", "1",
                     "--nx", "10", "--ny", "10", "--out", str(out),
                     "--diffusivity", "1e-3", "--flow-u", "0.04",
                     "--dt", "1e9"])
        assert code == 0
        captured = capsys.readouterr().out
        assert "critical_dt=" in captured
        assert "peclet: max=2" in captured
        assert "warning: Pe > 1" in captured
        assert "UNSTABLE" in captured

    def test_roundtrip_through_infile(self, tmp_path, capsys):
        first = tmp_path / "a.txt"
        main(["mesh", "--rect", "0", "0", "2", "1", "--out", str(first)])
        capsys.readouterr()
        second = tmp_path / "b.txt"
        code = main(["mesh", "--in", str(first), "--out", str(second)])
        assert code == 0
        assert first.read_bytes() == second.read_bytes()

    def test_requires_rect_or_infile(self, tmp_path):
        assert main(["mesh", "--out", str(tmp_path / "m.txt")]) == 2

    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            main(["calibrate"])


class TestPipeline:
    def test_simulate_estimate_compare(self, tiny_cfg, tmp_path, capsys):
        out = tmp_path / "out"
        args = ["--config", str(tiny_cfg), "--out", str(out)]
        assert main(["simulate"] + args) == 0
        for name in ("truth.csv", "observations.csv", "sensors.txt"):
            assert (out / name).is_file()

        assert main(["estimate"] + args) == 0
        assert (out / "estimates_rbpf.csv").is_file()
        lines = (out / "estimates_rbpf.csv").read_text().splitlines()
        assert len(lines) == 2 + 2 * 3  # header rows + trials x steps

        enkf_cfg = tmp_path / "tiny_enkf.cfg"
        enkf_cfg.write_text(TINY_CFG.replace("kind = rbpf", "kind = enkf"))
        assert main(["estimate", "--config", str(enkf_cfg),
                     "--out", str(out)]) == 0
        assert (out / "estimates_enkf.csv").is_file()

        capsys.readouterr()
        assert main(["compare", "--out", str(out),
                     str(out / "summary_rbpf.json"),
                     str(out / "summary_enkf.json")]) == 0
        table = capsys.readouterr().out
        assert "rbpf" in table and "enkf" in table
        rows = (out / "comparison.csv").read_text().splitlines()
        assert rows[1] == "method,size,aee,runtime_s"
        assert len(rows) == 4

    def test_estimate_rejects_foreign_observations(self, tiny_cfg, tmp_path,
                                                   capsys):
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(tiny_cfg),
                     "--out", str(out)]) == 0
        code = main(["estimate", "--config", str(tiny_cfg), "--seed", "99",
                     "--out", str(out)])
        assert code == 2
        assert "hashes to" in capsys.readouterr().err

    def test_estimate_without_observations(self, tiny_cfg, tmp_path, capsys):
        code = main(["estimate", "--config", str(tiny_cfg),
                     "--out", str(tmp_path / "fresh")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.cfg"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_compare_rejects_mixed_scenarios(self, tmp_path, capsys):
        import json
        docs = []
        for i, h in enumerate(("aaaa", "bbbb")):
            doc = {"estimator": "rbpf", "size": 5, "aee": 1.0,
                   "runtime_total": 0.1, "config_hash": h}
            path = tmp_path / f"s{i}.json"
            path.write_text(json.dumps(doc))
            docs.append(str(path))
        code = main(["compare", "--out", str(tmp_path)] + docs)
        assert code == 2
        assert "different scenarios" in capsys.readouterr().err

    def test_pipeline_is_byte_deterministic(self, tiny_cfg, tmp_path):
        outs = [tmp_path / "r1", tmp_path / "r2"]
        for out in outs:
            args = ["--config", str(tiny_cfg), "--out", str(out)]
            assert main(["simulate"] + args) == 0
            assert main(["estimate"] + args) == 0
        for name in ("truth.csv", "observations.csv", "sensors.txt",
                     "estimates_rbpf.csv"):
            a = (outs[0] / name).read_bytes()
            b = (outs[1] / name).read_bytes()
            assert a == b, name

    def test_seed_override_changes_draws(self, tiny_cfg, tmp_path):
        base, other = tmp_path / "base", tmp_path / "other"
        assert main(["simulate", "--config", str(tiny_cfg),
                     "--out", str(base)]) == 0
        assert main(["simulate", "--config", str(tiny_cfg), "--seed", "123",
                     "--out", str(other)]) == 0
        assert ((base / "observations.csv").read_bytes()
                != (other / "observations.csv").read_bytes())
