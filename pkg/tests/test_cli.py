import json

import numpy as np
import pytest

from conveyor.cli import main
from conveyor.config import ConfigError, RunConfig, config_to_dict, parse_config
from conveyor.control_chain import ImpulseResponse
from conveyor.results import columns, read_csv_table

SWEEP = {"protocol": {"kinds": ["linear", "parabolic"], "tau_over_tau_ho": [1.5, 2.0]}}


def write_config(path, **sections):
    doc = {"spec_version": "1", **sections}
    path.write_text(json.dumps(doc))
    return str(path)


def body(path):
    return "".join(line for line in open(path) if not line.startswith("# generated"))


def run(tmp_path, command, name="out", extra=(), **sections):
    cfg = write_config(tmp_path / f"{name}.json", **sections)
    out = tmp_path / name
    code = main([command, "--config", cfg, "--out", str(out), *extra])
    return code, out


class TestConfig:
    @pytest.mark.parametrize("doc", [
        {"spec_version": "2"},
        {"spec_version": "1", "colour": "red"},
        {"spec_version": "1", "lattice": {"u0": 150, "depth": 3}},
        {"spec_version": "1", "protocol": {"kinds": ["zigzag"]}},
        {"spec_version": "1", "protocol": {"tau_over_tau_ho": [-1.0]}},
        {"spec_version": "1", "grid": {"n_sites": 12, "pts_per_site": 64}},
        {"spec_version": "1", "seed": "seven"},
        {"spec_version": "1", "output": {"format": "xml"}},
        {"spec_version": "1", "control": {"gain": -0.5}},
        [],
    ])
    def test_rejected(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_round_trip(self):
        cfg = parse_config({"spec_version": "1", "seed": 3, "lattice": {"u0": 70}, "thermal": {"t_perp_uk": 2.0}})
        assert cfg.optimizer.seed == 3
        assert cfg.lattice.u0 == 70
        again = parse_config(json.loads(json.dumps(config_to_dict(cfg))))
        assert again == cfg

    def test_defaults(self):
        cfg = parse_config({"spec_version": "1"})
        assert cfg == RunConfig()

    def test_exit_code_for_bad_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"spec_version": "1", "unknown": 1}')
        assert main(["sweep", "--config", str(bad)]) == 2
        assert "unknown" in capsys.readouterr().err
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        assert main(["sweep", "--config", str(broken)]) == 2
        assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == 2
        assert main(["sweep", "--config", str(broken), "--workers", "0"]) == 2


class TestSweep:
    def test_schema_and_determinism(self, tmp_path):
        code, a = run(tmp_path, "sweep", "a", **SWEEP)
        assert code == 0
        rows = read_csv_table(a / "sweep.csv")
        assert tuple(rows[0]) == columns()["sweep"]
        assert len(rows) == 4
        assert [(r["protocol"], r["tau_over_tau_ho"]) for r in rows] == sorted(
            (r["protocol"], r["tau_over_tau_ho"]) for r in rows)
        assert all(float(r["aa_residual"]) < 0.01 for r in rows)
        code, b = run(tmp_path, "sweep", "b", extra=("--workers", "2"), **SWEEP)
        assert code == 0
        assert body(a / "sweep.csv") == body(b / "sweep.csv")
        assert (a / "sweep.dat").read_text().count("# linear") == 1

    def test_failed_cell_is_partial(self, tmp_path):
        code, out = run(tmp_path, "sweep", protocol={"kinds": ["classical_ansatz"], "tau_over_tau_ho": [0.7, 1.5]})
        assert code == 4
        rows = read_csv_table(out / "sweep.csv")
        status = {r["tau_over_tau_ho"]: r["status"] for r in rows}
        assert status["1.5"] == "ok"
        assert status["0.7"].startswith("failed") and "tau_CB" in status["0.7"]

    def test_json_format(self, tmp_path):
        code, out = run(tmp_path, "sweep", extra=("--format", "json"),
                        protocol={"kinds": ["parabolic"], "tau_over_tau_ho": [2.0]})
        assert code == 0
        doc = json.loads((out / "sweep.json").read_text())
        assert doc["columns"] == list(columns()["sweep"])
        assert doc["rows"][0]["fidelity"] > 0.99


class TestOtherCommands:
    def test_geometry_report(self, tmp_path):
        code, out = run(tmp_path, "geometry", protocol={"kinds": ["parabolic"], "tau_over_tau_ho": [2.0]})
        assert code == 0
        (report,) = out.glob("geometry_*.json")
        rep = json.loads(report.read_text())
        fields = ["ell", "delta_e", "ell_geo", "ell_qgt", "ell_qb_est", "delta_e_upper", "tau_mt", "aa_residual",
                  "bound_flags"]
        assert all(rep.get(f) is not None for f in fields)
        assert rep["aa_residual"] < 0.01
        assert rep["bound_flags"]["ell_above_qgt"]
        (row,) = read_csv_table(out / "geometry.csv")
        assert row["eq7_flag"] == "true"

    def test_interferometer(self, tmp_path):
        code, out = run(tmp_path, "interferometer", protocol={"kinds": ["adiabatic_sine"], "tau_over_tau_ho": [2.0]})
        assert code == 0
        (row,) = read_csv_table(out / "interferometer.csv")
        assert float(row["contrast_uncompensated"]) < float(row["contrast"])

    def test_optimize_writes_result(self, tmp_path):
        code, out = run(tmp_path, "optimize", optimizer={"j_max": 6, "max_evals": 30, "polish_evals": 0},
                        protocol={"tau_over_tau_ho": [1.5]})
        assert code == 0
        (res,) = out.glob("optimum_*.json")
        doc = json.loads(res.read_text())
        assert len(doc["coefficients"]) == 6
        (row,) = read_csv_table(out / "optimize.csv")
        assert float(row["fidelity"]) == pytest.approx(doc["fidelity"], rel=1e-11)

    def test_landscape_tables(self, tmp_path):
        code, out = run(tmp_path, "landscape", optimizer={"j_max": 6, "max_evals": 20, "polish_evals": 0},
                        protocol={"tau_over_tau_ho": [1.5, 0.7]})
        assert code == 0
        (trans,) = read_csv_table(out / "transition.csv")
        assert tuple(trans) == columns()["transition"]
        assert 0.7 < float(trans["tau_star_over_tau_ho"]) < 1.5
        assert trans["controlled_levels"] == "6"
        assert len(read_csv_table(out / "landscape.csv")) == 2


class TestControl:
    def residuals(self, out):
        return [float(r["max_residual_sites"]) for r in read_csv_table(out / "residuals.csv")]

    def test_default_plant(self, tmp_path):
        code, out = run(tmp_path, "control", protocol={"kinds": ["adiabatic_sine"], "tau_over_tau_ho": [2.0]},
                        control={"max_iter": 10})
        assert code == 0
        hist = self.residuals(out)
        assert len(hist) <= 10 and hist[-1] < 0.02
        for name in ("drive.csv", "actual.csv", "target.csv"):
            assert (out / name).exists()

    def test_identity_kernel(self, tmp_path):
        kernel = tmp_path / "kernel.csv"
        ImpulseResponse.identity(0.05).to_csv(kernel)
        code, out = run(tmp_path, "control", protocol={"kinds": ["adiabatic_sine"], "tau_over_tau_ho": [2.0]},
                        control={"kernel_csv": str(kernel), "slew_limit": None, "reg": 0.0})
        assert code == 0
        assert self.residuals(out)[0] < 1e-12

    def test_zero_gain(self, tmp_path):
        code, out = run(tmp_path, "control", protocol={"kinds": ["adiabatic_sine"], "tau_over_tau_ho": [1.0]},
                        control={"gain": 0.0, "max_iter": 4, "slew_limit": 0.3})
        assert code == 0
        hist = self.residuals(out)
        assert len(hist) == 4 and np.ptp(hist) == 0.0

    def test_instability_exit_code(self, tmp_path):
        # a loose inverse keeps the first residual above the convergence threshold
        code, out = run(tmp_path, "control", protocol={"kinds": ["adiabatic_sine"], "tau_over_tau_ho": [2.0]},
                        control={"gain": 2.5, "slew_limit": None, "reg": 0.1})
        assert code == 3
        hist = self.residuals(out)
        assert hist[-1] > hist[0]

    def test_target_file(self, tmp_path):
        t = np.arange(0.0, 40.0, 0.05)
        target = tmp_path / "target.csv"
        np.savetxt(target, np.column_stack([t, 0.5 * np.clip((t - 5) / 30, 0, 1) ** 2]), delimiter=",",
                   header="time_us,x_over_lambda", comments="")
        code, out = run(tmp_path, "control", control={"target_csv": str(target), "slew_limit": None})
        assert code == 0
        assert self.residuals(out)[-1] < 0.02
