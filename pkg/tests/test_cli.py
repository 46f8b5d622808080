"""
End-to-end tests of the ccnn command line.
"""
import csv
import json
import logging

import pytest

from cli.commands import main
from cli.provenance import sha256_file, stable_sha256
from core.coded_aperture import load_apertures
from core.database import RunRegistry
from core.forward_model import load_measurement


@pytest.fixture
def scene(tmp_path):
    cube, labels = tmp_path / "scene.hsc", tmp_path / "gt.pgm"
    status = main(["synth", "--n", "16", "--m", "16", "--l", "4", "--classes", "3", "--seed", "5",
                   "--out", str(cube), "--labels", str(labels)])
    assert status == 0
    return cube, labels


def scene_flags(scene):
    return ["--scene", str(scene[0]), "--labels", str(scene[1])]


TINY = ["--snapshots", "2", "--block", "2", "--patch", "3", "--epochs", "1", "--batch", "32"]


class TestSynthAndApertures:

    def test_synth_provenance(self, scene, tmp_path):
        record = json.loads((tmp_path / "run.json").read_text())
        assert record["command"] == "synth"
        assert record["seed"] == 5
        assert record["config"]["synth"]["n"] == 16
        roles = {a["role"]: a for a in record["artifacts"]}
        assert set(roles) == {"output:scene", "output:labels"}
        assert roles["output:scene"]["sha256"] == sha256_file(scene[0])
        assert "total" in record["timing"]

    def test_synth_rejects_tiny_scene(self, tmp_path):
        status = main(["synth", "--n", "4", "--out", str(tmp_path / "s.hsc"), "--labels", str(tmp_path / "l.pgm")])
        assert status == 2

    def test_periodic_apertures(self, tmp_path):
        path = tmp_path / "a.apt.json"
        assert main(["aperture", "--snapshots", "3", "--block", "4", "--seed", "1", "--out", str(path)]) == 0
        apertures = load_apertures(path)
        assert apertures.k == 3 and apertures.b == 4

    def test_bluenoise_needs_size(self, tmp_path):
        assert main(["aperture", "--kind", "bluenoise", "--out", str(tmp_path / "a.apt.json")]) == 2

    def test_bluenoise_full(self, tmp_path):
        path = tmp_path / "b.apt.json"
        assert main(["aperture", "--kind", "bluenoise", "--rows", "16", "--cols", "19", "--snapshots", "2",
                     "--out", str(path)]) == 0
        assert load_apertures(path).pattern.shape == (2, 16, 19)


class TestSimulate:

    def test_measurement_and_matrix(self, scene, tmp_path):
        apt = tmp_path / "a.apt.json"
        main(["aperture", "--snapshots", "2", "--block", "3", "--out", str(apt)])
        out, matrix = tmp_path / "y.msc", tmp_path / "h.txt"
        status = main(["simulate", "--scene", str(scene[0]), "--apertures", str(apt),
                       "--out", str(out), "--matrix", str(matrix)])
        assert status == 0
        assert load_measurement(out).values.shape == (16, 16, 2)
        assert len(matrix.read_text().splitlines()) == 2 * 16 * 16 * 4
        record = json.loads((tmp_path / "run.json").read_text())
        assert {a["role"] for a in record["artifacts"]} == {
            "input:scene", "input:apertures", "output:measurement", "output:matrix"}

    def test_missing_scene(self, tmp_path, caplog):
        apt = tmp_path / "a.apt.json"
        main(["aperture", "--out", str(apt)])
        with caplog.at_level(logging.ERROR):
            assert main(["simulate", "--scene", str(tmp_path / "nope.hsc"), "--apertures", str(apt),
                         "--out", str(tmp_path / "y.msc")]) == 2
        assert "--scene: file not found" in caplog.text

    def test_missing_apertures(self, scene, tmp_path, caplog):
        with caplog.at_level(logging.ERROR):
            assert main(["simulate", "--scene", str(scene[0]), "--apertures", str(tmp_path / "nope.apt.json"),
                         "--out", str(tmp_path / "y.msc")]) == 2
        assert "--apertures: file not found" in caplog.text

    def test_bad_thread_setting(self, scene, tmp_path, monkeypatch):
        apt = tmp_path / "a.apt.json"
        main(["aperture", "--out", str(apt)])
        monkeypatch.setenv("CCNN_THREADS", "many")
        assert main(["simulate", "--scene", str(scene[0]), "--apertures", str(apt),
                     "--out", str(tmp_path / "y.msc")]) == 2


class TestTrainAndEval:

    def test_joint_model(self, scene, tmp_path):
        model_dir = tmp_path / "model"
        model = model_dir / "m.ccnn.json"
        assert main(["train"] + scene_flags(scene) + TINY + ["--out", str(model)]) == 0
        for name in ("split.json", "optimized.apt.json", "initial.apt.json", "optimized_tiled.apt.json",
                     "difference.json", "run.json"):
            assert (model_dir / name).exists(), name
        optimized = load_apertures(model_dir / "optimized.apt.json").stack()
        assert optimized.min() >= 0.0 and optimized.max() <= 1.0

        report, ppm = tmp_path / "eval" / "report.json", tmp_path / "eval" / "map.ppm"
        status = main(["eval"] + scene_flags(scene) + ["--model", str(model), "--split",
                                                       str(model_dir / "split.json"),
                                                       "--out", str(report), "--map", str(ppm)])
        assert status == 0
        data = json.loads(report.read_text())
        assert 0.0 <= data["oa"] <= 1.0
        assert data["compression_ratio"] == pytest.approx(0.5)
        assert ppm.read_bytes().startswith(b"P6")

    def test_raw_band_model(self, scene, tmp_path):
        model = tmp_path / "raw" / "m.net.json"
        assert main(["train"] + scene_flags(scene) + TINY + ["--raw", "--out", str(model)]) == 0
        report = tmp_path / "raw" / "report.json"
        assert main(["eval"] + scene_flags(scene) + ["--model", str(model), "--split",
                                                     str(tmp_path / "raw" / "split.json"),
                                                     "--out", str(report)]) == 0
        assert json.loads(report.read_text())["compression_ratio"] == 1.0

    def test_labels_without_scene(self, scene, tmp_path):
        status = main(["train", "--labels", str(scene[1])] + TINY + ["--out", str(tmp_path / "m.ccnn.json")])
        assert status == 2

    def test_corrupt_split(self, scene, tmp_path):
        model = tmp_path / "m" / "m.ccnn.json"
        main(["train"] + scene_flags(scene) + TINY + ["--out", str(model)])
        split = tmp_path / "bad_split.json"
        split.write_text('{"train": [[0, 0]]}')
        assert main(["eval"] + scene_flags(scene) + ["--model", str(model), "--split", str(split),
                                                     "--out", str(tmp_path / "r.json")]) == 2


class TestCompare:

    def test_csv_and_registry(self, scene, tmp_path):
        out_dir, db = tmp_path / "cmp", tmp_path / "runs.db"
        status = main(["compare"] + scene_flags(scene) + TINY + [
            "--methods", "ccnn,original-svm", "--svm-epochs", "5", "--out-dir", str(out_dir),
            "--registry", str(db)])
        assert status == 0
        with open(out_dir / "compare.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["method", "oa", "aa", "kappa", "seconds"]
        assert [r[0] for r in rows[1:]] == ["ccnn", "original-svm"]
        assert (out_dir / "run.json").exists()

        registry = RunRegistry(db)
        (run,) = registry.get_runs("compare")
        assert [r["method"] for r in registry.get_reports(run["id"])] == ["ccnn", "original-svm"]

    def test_rerun_provenance_is_identical(self, scene, tmp_path):
        out_dir = tmp_path / "cmp"
        argv = ["compare"] + scene_flags(scene) + TINY + [
            "--methods", "rand-compress-svm,original-svm", "--svm-epochs", "5", "--out-dir", str(out_dir)]
        records = []
        for _ in range(2):
            assert main(argv) == 0
            record = json.loads((out_dir / "run.json").read_text())
            record.pop("timing")
            records.append(record)
        assert records[0] == records[1]
        roles = {a["role"] for a in records[0]["artifacts"]}
        assert {"output:csv", "output:json"} <= roles

    def test_unknown_method(self, scene, tmp_path):
        status = main(["compare"] + scene_flags(scene) + ["--methods", "ccnn,best", "--out-dir", str(tmp_path)])
        assert status == 2

    def test_config_file_unknown_key(self, tmp_path):
        config = tmp_path / "exp.json"
        config.write_text('{"snapshots": 3, "colour": "red"}')
        assert main(["compare", "--config", str(config), "--out-dir", str(tmp_path)]) == 2


class TestGradcheck:

    def test_passes_on_smooth_network(self, tmp_path):
        out = tmp_path / "g.json"
        assert main(["gradcheck", "--activation", "tanh", "--sample", "4", "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        assert data["passed"] is True
        assert data["max_rel_error"] <= 1e-4

    def test_joint_check(self, tmp_path):
        out = tmp_path / "g.json"
        assert main(["gradcheck", "--joint", "--activation", "tanh", "--sample", "4", "--out", str(out)]) == 0

    def test_failure_exit_status(self, tmp_path):
        out = tmp_path / "g.json"
        assert main(["gradcheck", "--activation", "tanh", "--sample", "2", "--tol", "0", "--out", str(out)]) == 1
        assert json.loads(out.read_text())["passed"] is False

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == 2


class TestProvenance:

    def test_stable_checksum_ignores_timing(self, tmp_path):
        a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "c.json"
        a.write_text(json.dumps({"oa": 0.5, "timing": {"total": 1.0}, "rows": [{"timing": {"train": 2.0}}]}))
        b.write_text(json.dumps({"rows": [{"timing": {"train": 9.0}}], "timing": {"total": 3.0}, "oa": 0.5}))
        c.write_text(json.dumps({"oa": 0.6, "timing": {"total": 1.0}, "rows": [{}]}))
        assert stable_sha256(a) == stable_sha256(b)
        assert stable_sha256(a) != stable_sha256(c)

    def test_stable_checksum_drops_seconds_column(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        a.write_text("method,oa,aa,kappa,seconds\nccnn,0.5,0.5,0.4,1.234\n")
        b.write_text("method,oa,aa,kappa,seconds\nccnn,0.5,0.5,0.4,9.876\n")
        assert stable_sha256(a) == stable_sha256(b)
        assert sha256_file(a) != sha256_file(b)
