import json
import os

import numpy as np
import pytest

from nlkacz.cli import main

MINI_CONFIG = """
[experiment]
preset = "custom"
seed = 11

[grid]
pixels = 12
extent_cm = 2.0

[geometry]
views = 10
detectors = 11
detector_extent_cm = 2.2
angle_offsets = [0.0, 0.0327249]

[spectra]
bins = 8

[solver]
strategy = "max_residual"
max_epochs = 8
residual_tolerance_rel = 0.0
dd_max_epochs = 4000
step2_max_epochs = 20
"""


def write_config(tmp_path, text=MINI_CONFIG, name="config.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def read_tree(root):
    out = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for fn in filenames:
            full = os.path.join(dirpath, fn)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


class TestSimulate:
    def test_happy_path_writes_expected_files(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", cfg, "--out", out]) == 0
        for name in (
            "manifest.json", "phantom.raw", "phantom.json",
            "projection_s1.sprj", "projection_s2.sprj",
            "data_s1.csv", "data_s2.csv",
        ):
            assert os.path.exists(os.path.join(out, name)), name
        assert "simulated" in capsys.readouterr().out

    def test_missing_phantom_path_exits_1(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path, MINI_CONFIG + "\n[phantom]\npath = \"nope.json\"\n"
        )
        rc = main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "nope.json" in capsys.readouterr().err

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        out1 = str(tmp_path / "out1")
        out2 = str(tmp_path / "out2")
        assert main(["simulate", "--config", cfg, "--out", out1]) == 0
        assert main(["simulate", "--config", cfg, "--out", out2]) == 0
        t1, t2 = read_tree(out1), read_tree(out2)
        assert set(t1) == set(t2)
        for name in t1:
            assert t1[name] == t2[name], name

    def test_json_flag(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["n_spectra"] == 2


class TestSolve:
    def _simulate(self, tmp_path, config=MINI_CONFIG):
        cfg = write_config(tmp_path, config)
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", cfg, "--out", out]) == 0
        return cfg, out

    def test_onestep_writes_reports(self, tmp_path):
        cfg, out = self._simulate(tmp_path)
        assert main(["solve-onestep", "--config", cfg, "--out", out]) == 0
        sub = os.path.join(out, "solve_onestep")
        for name in ("iterations.csv", "epochs.csv", "recon.raw", "recon.json", "summary.json"):
            assert os.path.exists(os.path.join(sub, name)), name
        header = open(os.path.join(sub, "iterations.csv")).readline().strip()
        assert header == "iteration,selected_index,residual,res_norm,re_metric"
        header = open(os.path.join(sub, "epochs.csv")).readline().strip()
        assert header == "epoch,re_f,re_g"
        summary = json.loads(open(os.path.join(sub, "summary.json")).read())
        assert summary["mode"] == "onestep"
        assert "wall" not in " ".join(summary)

    def test_solve_uses_manifest_when_no_config(self, tmp_path):
        _, out = self._simulate(tmp_path)
        assert main(["solve-onestep", "--out", out]) == 0

    def test_dd_writes_reports(self, tmp_path):
        shared = MINI_CONFIG.replace("angle_offsets = [0.0, 0.0327249]",
                                     "angle_offsets = [0.0, 0.0]")
        cfg, out = self._simulate(tmp_path, shared)
        assert main(["solve-dd", "--config", cfg, "--out", out]) == 0
        sub = os.path.join(out, "solve_dd")
        for name in ("iterations.csv", "sinogram_d0.csv", "sinogram_d1.csv",
                     "recon.raw", "summary.json"):
            assert os.path.exists(os.path.join(sub, name)), name

    def test_dd_requires_shared_geometry(self, tmp_path, capsys):
        cfg, out = self._simulate(tmp_path)
        rc = main(["solve-dd", "--config", cfg, "--out", out])
        assert rc == 1
        assert "angle_offsets" in capsys.readouterr().err

    def test_missing_data_exits_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rc = main(["solve-onestep", "--config", cfg, "--out", str(tmp_path / "empty")])
        assert rc == 1
        assert "simulate" in capsys.readouterr().err

    def test_manifest_round_trip_reproduces_outputs(self, tmp_path):
        cfg, out = self._simulate(tmp_path)
        manifest = os.path.join(out, "manifest.json")
        out2 = str(tmp_path / "out2")
        assert main(["simulate", "--config", manifest, "--out", out2]) == 0
        t1, t2 = read_tree(out), read_tree(out2)
        for name in t1:
            assert t1[name] == t2[name], name

    def test_threads_do_not_change_outputs(self, tmp_path):
        shared = MINI_CONFIG.replace("angle_offsets = [0.0, 0.0327249]",
                                     "angle_offsets = [0.0, 0.0]")
        cfg, out = self._simulate(tmp_path, shared)
        assert main(["solve-dd", "--config", cfg, "--out", out, "--threads", "1"]) == 0
        t1 = read_tree(os.path.join(out, "solve_dd"))
        assert main(["solve-dd", "--config", cfg, "--out", out, "--threads", "4"]) == 0
        t4 = read_tree(os.path.join(out, "solve_dd"))
        for name in t1:
            if name == "summary.json":
                s1 = json.loads(t1[name])
                s4 = json.loads(t4[name])
                s1.pop("threads")
                s4.pop("threads")
                assert s1 == s4
            else:
                assert t1[name] == t4[name], name


class TestVerify:
    def test_report_fields_populated(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["verify", "--config", cfg, "--out", out, "--json"]) == 0
        doc = json.loads(open(os.path.join(out, "verify.json")).read())
        for key in ("kappa_f", "gamma_hat", "gamma_b", "det_sign", "rate_bound",
                    "curvature_samples", "verdicts"):
            assert key in doc
        for verdict in ("rgdc_global", "rate_hypothesis", "dd_pipeline", "onestep_pipeline"):
            assert doc["verdicts"][verdict]["status"] in ("holds", "fails", "not-checked")
        assert doc["verdicts"]["onestep_pipeline"]["status"] == "not-checked"
        assert doc["det_sign"] in (True, False)
        assert len(doc["curvature_samples"]) > 0

    def test_verify_after_simulate_uses_true_rays(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "out")
        assert main(["simulate", "--config", cfg, "--out", out]) == 0
        assert main(["verify", "--config", cfg, "--out", out]) == 0
        doc = json.loads(open(os.path.join(out, "verify.json")).read())
        assert len(doc["kappa_f"]) > 0

    def test_degenerate_model_reports_failures(self, tmp_path):
        # identical decomposition columns: gamma_B = 0, strict convexity gone
        import nlkacz.config as cfgmod
        from nlkacz.cli import build_condition_report
        from nlkacz.spectral import SpectralModel

        model = SpectralModel(
            spectra=np.array([[0.5, 0.5], [0.2, 0.8]]),
            b_matrix=np.array([[1.0, 1.0], [2.0, 2.0]]),
            energies=np.array([40.0, 80.0]),
        )
        cfg = cfgmod.ExperimentConfig(output_dir=str(tmp_path / "none")).validate()
        rep = build_condition_report(cfg, model)
        assert rep.gamma_b_upper == 0.0
        assert rep.gamma_b_tilde is None  # non-strict extreme columns
        assert any("unavailable" in note for note in rep.notes)

    def test_crafted_det_sign_violation_reported(self, tmp_path):
        import nlkacz.config as cfgmod
        from nlkacz.cli import build_condition_report
        from nlkacz.spectral import SpectralModel

        model = SpectralModel(
            spectra=np.array([[0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]),
            b_matrix=np.array([[1.0, 0.2, 1.1], [0.2, 1.0, 0.1]]),
            energies=np.array([30.0, 60.0, 90.0]),
        )
        from nlkacz.conditions import det_sign_condition

        if det_sign_condition(model.spectra, model.b_matrix):
            pytest.skip("crafted matrix unexpectedly satisfies the condition")
        cfg = cfgmod.ExperimentConfig(output_dir=str(tmp_path / "none")).validate()
        rep = build_condition_report(cfg, model)
        assert rep.det_sign is False
        assert rep.det_sign_witness is not None


class TestDemo:
    def test_table_output(self, capsys):
        assert main(["demo"]) == 0
        out = capsys.readouterr().out
        for name in ("cyclic", "max_residual", "theta_residual", "positive_cyclic"):
            assert name in out

    def test_json_output(self, capsys):
        assert main(["demo", "--json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 4
        for row in rows:
            assert row["iterations_to_1e-8"] is not None
            assert row["final_distance"] <= 1e-8


class TestUsage:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_no_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_config_key_exits_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "[solver]\nbogus_key = 1\n")
        rc = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "bogus_key" in capsys.readouterr().err
