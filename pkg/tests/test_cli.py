import json
import subprocess
import sys

import numpy as np
import pytest

from spheremorph.cli import EXIT_CODES, run
from spheremorph.fields import FeatureMap, LabelMap
from spheremorph.grid import make_grid
from spheremorph.io import MapKind, read_map, read_map_kind, write_map

FAST = ["--iters", "40", "--no-plots"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    rc = run(["synth", "--grid", "16x32", "--subjects", "4", "--regions", "6", "--seed", "3",
              "--out", str(out)])
    assert rc == 0
    return out


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()
    assert len(line) == 1
    return line[0]


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestSynth:
    def test_layout(self, data):
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["grid"] == [16, 32] and manifest["subjects"] == 4
        for name in ("template.smgm", "template_labels.smgm", "atlas_mean.smgm", "atlas_var.smgm",
                     "subjects/subject_000.smgm", "subjects/subject_003_labels.smgm",
                     "truths/subject_002_truth.smgm"):
            assert (data / name).exists(), name
            assert (data / (name + ".prov.json")).exists(), name
        assert read_map_kind(data / "atlas_var.smgm") == MapKind.VARIANCE
        assert read_map_kind(data / "truths/subject_000_truth.smgm") == MapKind.DEFORMATION
        assert (data / "template.png").exists()

    def test_provenance_sidecar(self, data):
        side = json.loads((data / "atlas_mean.smgm.prov.json").read_text())
        assert side["seed"] == 3
        assert side["command"][:2] == ["spheremorph", "synth"]
        assert len(side["config_sha256"]) == 64

    def test_matches_library(self, data):
        from spheremorph.synth import make_atlas, make_subjects, make_template

        tmpl, labels = make_template(make_grid(16, 32), 6, seed=3)
        subs = make_subjects(tmpl, labels, 4, 0.15, seed=4)
        atlas = make_atlas(subs)
        f32 = np.float32
        np.testing.assert_array_equal(read_map(data / "atlas_mean.smgm").data, atlas.mean.data.astype(f32))
        np.testing.assert_array_equal(read_map(data / "atlas_var.smgm").data, atlas.variance.data.astype(f32))
        np.testing.assert_array_equal(read_map(data / "subjects/subject_002.smgm").data,
                                      subs[2].features.data.astype(f32))

    def test_bad_grid(self, tmp_path, capsys):
        assert run(["synth", "--grid", "16by32", "--out", str(tmp_path)]) == 2
        assert _err(capsys).startswith("error category=usage ")

    def test_too_few_subjects(self, tmp_path, capsys):
        assert run(["synth", "--grid", "8x16", "--subjects", "1", "--out", str(tmp_path)]) == 2
        assert "category=usage" in _err(capsys)


class TestRegister:
    def _args(self, data, out, moving="subjects/subject_000.smgm"):
        return ["register", "--moving", str(data / moving), "--atlas-mean", str(data / "atlas_mean.smgm"),
                "--atlas-var", str(data / "atlas_var.smgm"), "--out", str(out)]

    def test_atlas_to_itself(self, data, tmp_path, capsys):
        assert run(self._args(data, tmp_path, "atlas_mean.smgm") + ["--no-plots"]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["mean_displacement_rad"] < 1e-3
        assert _stdout_json(capsys)["mean_displacement_rad"] < 1e-3

    def test_outputs(self, data, tmp_path):
        assert run(self._args(data, tmp_path) + ["--iters", "40"]) == 0
        assert read_map_kind(tmp_path / "phi.smgm") == MapKind.DEFORMATION
        assert read_map_kind(tmp_path / "mu.smgm") == MapKind.VELOCITY
        assert read_map_kind(tmp_path / "sigma.smgm") == MapKind.VARIANCE
        for name in ("jacobian.png", "displacement.png", "loss.png", "report.json.prov.json"):
            assert (tmp_path / name).exists(), name
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["config"]["iters"] == 40
        assert len(rep["loss_trace"]) >= 1

    def test_config_file_and_flag_precedence(self, data, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"lambda": 1e3, "iters": 5, "moving": str(data / "subjects/subject_001.smgm"),
                                   "atlas_mean": str(data / "atlas_mean.smgm"),
                                   "atlas_var": str(data / "atlas_var.smgm"), "out": str(tmp_path / "o")}))
        assert run(["register", "--config", str(cfg), "--iters", "7", "--no-plots"]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep["config"]["lambda"] == 1e3 and rep["config"]["iters"] == 7

    def test_unknown_config_key(self, data, tmp_path, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"lamda": 1.0}))
        assert run(self._args(data, tmp_path) + ["--config", str(cfg)]) == 3
        assert _err(capsys).startswith("error category=config ")

    def test_invalid_flag_value(self, data, tmp_path, capsys):
        assert run(self._args(data, tmp_path) + ["--lambda", "-1"]) == 3
        assert "category=config" in _err(capsys)

    def test_amortized_mode_rejected(self, data, tmp_path, capsys):
        assert run(self._args(data, tmp_path) + ["--mode", "amortized"]) == 3

    def test_missing_input(self, data, tmp_path, capsys):
        assert run(self._args(data, tmp_path, "subjects/none.smgm")) == 4
        assert "category=io" in _err(capsys)

    def test_missing_required(self, data, tmp_path, capsys):
        assert run(["register", "--out", str(tmp_path)]) == 2
        assert "--moving" in _err(capsys)

    def test_wrong_kind(self, data, tmp_path, capsys):
        assert run(self._args(data, tmp_path, "subjects/subject_000_labels.smgm")) == 5
        assert "category=format" in _err(capsys)

    def test_corrupt_file(self, data, tmp_path, capsys):
        buf = bytearray((data / "subjects/subject_000.smgm").read_bytes())
        buf[40] ^= 0xFF
        (tmp_path / "bad.smgm").write_bytes(bytes(buf))
        assert run(self._args(data, tmp_path / "o", "x")[:2] + [str(tmp_path / "bad.smgm")]
                   + self._args(data, tmp_path / "o")[3:]) == 5
        assert "CRC" in _err(capsys)

    def test_grid_mismatch(self, data, tmp_path, capsys):
        g = make_grid(8, 16)
        write_map(FeatureMap(g, np.zeros((1, 8, 16))), tmp_path / "small.smgm")
        args = self._args(data, tmp_path / "o")
        args[2] = str(tmp_path / "small.smgm")
        assert run(args) == 6
        assert "category=grid-mismatch" in _err(capsys)


class TestWarpEvaluate:
    def test_identical_labels(self, data, tmp_path, capsys):
        lab = str(data / "template_labels.smgm")
        assert run(["evaluate", "--a", lab, "--b", lab, "--out", str(tmp_path / "rep.json")]) == 0
        rep = _stdout_json(capsys)
        assert rep["overall_dice"] == 1.0
        assert rep["overall_mmd"] == 0.0
        saved = json.loads((tmp_path / "rep.json").read_text())
        assert saved["overall_dice"] == 1.0
        assert (tmp_path / "rep.json.prov.json").exists()
        assert (tmp_path / "rep.dice.png").exists()

    def test_evaluate_with_phi(self, data, capsys):
        lab = str(data / "template_labels.smgm")
        assert run(["evaluate", "--a", lab, "--b", lab, "--phi",
                    str(data / "truths/subject_000_truth.smgm")]) == 0
        rep = _stdout_json(capsys)
        assert 0.0 <= rep["jacobian"]["fraction_nonpositive"] <= 1.0

    def test_warp_kinds(self, data, tmp_path, capsys):
        phi = str(data / "truths/subject_000_truth.smgm")
        assert run(["warp", "--phi", phi, "--input", str(data / "template_labels.smgm"),
                    "--out", str(tmp_path / "l.smgm")]) == 0
        assert isinstance(read_map(tmp_path / "l.smgm"), LabelMap)
        assert run(["warp", "--phi", phi, "--input", str(data / "atlas_var.smgm"),
                    "--out", str(tmp_path / "v.smgm")]) == 0
        assert read_map_kind(tmp_path / "v.smgm") == MapKind.VARIANCE
        assert (tmp_path / "v.smgm.prov.json").exists()
        assert run(["warp", "--phi", phi, "--input", phi, "--out", str(tmp_path / "p.smgm")]) == 2

    def test_warp_identity_phi(self, data, tmp_path):
        from spheremorph.fields import DeformationField

        g = make_grid(16, 32)
        write_map(DeformationField.zeros(g), tmp_path / "id.smgm")
        assert run(["warp", "--phi", str(tmp_path / "id.smgm"), "--input", str(data / "template.smgm"),
                    "--out", str(tmp_path / "w.smgm")]) == 0
        assert (tmp_path / "w.smgm").read_bytes() == (data / "template.smgm").read_bytes()


class TestAmortizedCommands:
    def test_train_predict(self, data, tmp_path, capsys):
        subs = [str(data / f"subjects/subject_{k:03d}.smgm") for k in range(4)]
        atlas = ["--atlas-mean", str(data / "atlas_mean.smgm"), "--atlas-var", str(data / "atlas_var.smgm")]
        assert run(["train", "--subjects", *subs, *atlas, "--epochs", "3", "--channels", "4", "4", "4", "4",
                    "--out", str(tmp_path / "m")]) == 0
        out = _stdout_json(capsys)
        assert out["epochs"] == 3
        assert (tmp_path / "m" / "model.smtb").exists()
        assert (tmp_path / "m" / "model.smtb.prov.json").exists()
        assert len(json.loads((tmp_path / "m" / "history.json").read_text())["epoch_loss"]) == 3
        assert run(["predict", "--model", str(tmp_path / "m" / "model.smtb"), "--moving", subs[0], *atlas,
                    "--out", str(tmp_path / "p"), "--no-plots"]) == 0
        assert _stdout_json(capsys)["wall_time"] < 1.0
        assert read_map_kind(tmp_path / "p" / "phi.smgm") == MapKind.DEFORMATION

    def test_train_requires_subjects(self, data, tmp_path, capsys):
        assert run(["train", "--atlas-mean", str(data / "atlas_mean.smgm"), "--atlas-var",
                    str(data / "atlas_var.smgm"), "--out", str(tmp_path)]) == 2

    def test_predict_bad_model(self, data, tmp_path, capsys):
        (tmp_path / "m.smtb").write_bytes(b"garbage")
        assert run(["predict", "--model", str(tmp_path / "m.smtb"), "--moving", str(data / "atlas_mean.smgm"),
                    "--atlas-mean", str(data / "atlas_mean.smgm"), "--atlas-var", str(data / "atlas_var.smgm"),
                    "--out", str(tmp_path / "o")]) == 5


class TestMisc:
    def test_gradcheck(self, capsys):
        assert run(["gradcheck"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines and all(line.endswith("ok") for line in lines)

    def test_gradcheck_failure(self, monkeypatch, capsys):
        monkeypatch.setattr("spheremorph.gradcheck.standard_suite", lambda seed: {"op": (1.0, 1e-9)})
        assert run(["gradcheck"]) == 8
        assert "category=check-failed" in _err(capsys)

    def test_lambda_search(self, data, tmp_path, capsys):
        assert run(["lambda-search", "--data", str(data), "--validation", "1", "--lambdas", "1e3", "1e5",
                    "--iters", "10", "--out", str(tmp_path), "--no-plots"]) == 0
        res = json.loads((tmp_path / "lambda_search.json").read_text())
        assert res["best"] in (1e3, 1e5) and len(res["dice"]) == 2

    def test_lambda_search_no_manifest(self, tmp_path, capsys):
        assert run(["lambda-search", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 4

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["synth", "--out", "x", "--wat"]])
    def test_usage_errors(self, argv, capsys):
        assert run(argv) == 2
        line = _err(capsys)
        cat, msg = line.split(" message=", 1)
        assert cat == "error category=usage"
        json.loads(msg)

    def test_threads_env(self, data, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SPHEREMORPH_THREADS", "zero")
        lab = str(data / "template_labels.smgm")
        assert run(["evaluate", "--a", lab, "--b", lab]) == 3
        monkeypatch.setenv("SPHEREMORPH_THREADS", "1")
        assert run(["evaluate", "--a", lab, "--b", lab]) == 0

    def test_exit_codes_distinct(self):
        assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)
        assert 0 not in EXIT_CODES.values()

    def test_console_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "spheremorph.cli", "--version"], capture_output=True,
                             text=True, check=True)
        assert out.stdout.strip()


class TestDeterminism:
    def test_pipeline_bit_for_bit(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPHEREMORPH_THREADS", "1")
        outputs = []
        for k in range(2):
            root = tmp_path / f"run{k}"
            assert run(["synth", "--grid", "16x32", "--subjects", "3", "--regions", "5", "--seed", "11",
                        "--out", str(root / "d"), "--no-plots"]) == 0
            d = root / "d"
            assert run(["register", "--moving", str(d / "subjects/subject_000.smgm"), "--atlas-mean",
                        str(d / "atlas_mean.smgm"), "--atlas-var", str(d / "atlas_var.smgm"),
                        "--seed", "5", "--out", str(root / "r"), *FAST]) == 0
            assert run(["warp", "--phi", str(root / "r" / "phi.smgm"), "--input",
                        str(d / "subjects/subject_000_labels.smgm"), "--out", str(root / "w.smgm")]) == 0
            assert run(["evaluate", "--a", str(root / "w.smgm"), "--b", str(d / "template_labels.smgm"),
                        "--out", str(root / "e.json"), "--no-plots"]) == 0
            files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in (".smgm", ".json")
                           and not p.name.endswith(".prov.json") and p.name != "report.json")
            outputs.append({str(p.relative_to(root)): p.read_bytes() for p in files})
            rep = json.loads((root / "r" / "report.json").read_text())
            rep["diagnostics"].pop("wall_time", None)
            outputs[-1]["report"] = json.dumps(rep, sort_keys=True).encode()
        assert outputs[0].keys() == outputs[1].keys()
        for key in outputs[0]:
            assert outputs[0][key] == outputs[1][key], key
