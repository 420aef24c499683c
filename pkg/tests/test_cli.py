import json
import subprocess
import sys

import numpy as np
import pytest

from chyp import checkpoint
from chyp.candidates import CandidateSet
from chyp.cli import main
from chyp.core import normalize_illuminant
from chyp.data import load_manifest, make_folds


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--scenes", "6", "--cameras", "2", "--seed", "1", "--out", str(root / "data")]) == 0
    manifest = root / "data" / "manifest.csv"
    (root / "folds.json").write_text(make_folds(load_manifest(manifest), 3, 0).to_json())
    return root, manifest


@pytest.fixture(scope="module")
def trained(dataset):
    root, manifest = dataset
    folds = str(root / "folds.json")
    assert main(["candidates", str(manifest), "--k", "3", "--out", str(root / "cands"),
                 "--folds", folds, "--holdout", "0"]) == 0
    assert main(["train", "--manifest", str(manifest), "--candidates", str(root / "cands"),
                 "--multi-device", "--epochs", "1", "--batch-size", "4", "--folds", folds,
                 "--holdout", "0", "--out", str(root / "run")]) == 0
    return root


def test_synth_cardinality(dataset):
    recs = load_manifest(dataset[1])
    assert len(recs) == 12 and len({r.scene_id for r in recs}) == 6


def test_synth_bytes(tmp_path):
    for d in ("a", "b"):
        main(["synth", "--scenes", "3", "--cameras", "2", "--seed", "4", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_synth_bad_counts(tmp_path):
    assert main(["synth", "--scenes", "0", "--cameras", "2", "--out", str(tmp_path)]) == 2


class TestCandidates:
    def test_kmeans_bytes(self, dataset, tmp_path, capsys):
        _, manifest = dataset
        for name in ("a", "b"):
            assert main(["candidates", str(manifest), "--k", "4", "--seed", "2", "--out", str(tmp_path / name)]) == 0
        assert "quantization floor" in capsys.readouterr().out
        for cam in ("cam0", "cam1"):
            a = (tmp_path / "a" / f"{cam}.json").read_bytes()
            assert a == (tmp_path / "b" / f"{cam}.json").read_bytes()
            assert len(CandidateSet.load(tmp_path / "a" / f"{cam}.json")) == 4

    def test_uniform_single_file(self, dataset, tmp_path):
        _, manifest = dataset
        out = tmp_path / "u.json"
        assert main(["candidates", str(manifest), "--method", "uniform", "--k", "9", "--camera", "cam1",
                     "--out", str(out)]) == 0
        assert len(CandidateSet.load(out)) == 9

    def test_uniform_non_square(self, dataset, tmp_path):
        assert main(["candidates", str(dataset[1]), "--method", "uniform", "--k", "8",
                     "--out", str(tmp_path)]) == 1

    def test_too_many(self, dataset, tmp_path):
        assert main(["candidates", str(dataset[1]), "--k", "50", "--out", str(tmp_path)]) == 1


class TestTrain:
    def test_outputs(self, trained):
        run = json.loads((trained / "run" / "run.json").read_text())
        assert run["config"]["multi_device"] and run["heads"].startswith("gain 1, bias 0")
        assert run["config"]["epochs"] == 1 and run["config"]["k_candidates"] == 3
        assert set(run["candidate_hashes"]) == {"cam0", "cam1"}
        assert "He-normal" in run["conv1"]
        params, meta = checkpoint.load(trained / "run" / "model.chkp")
        assert np.all(params.gains == 1) and meta["multi_device"]

    def test_default_config_echo(self):
        from chyp.cli import _config_from_args, build_parser

        args = build_parser().parse_args(["train", "--manifest", "m", "--candidates", "c", "--out", "o"])
        cfg = _config_from_args(args).to_dict()
        assert (cfg["epochs"], cfg["batch_size"], cfg["lr0"]) == (120, 32, 5e-3)
        assert cfg["lr_drop_epochs"] == [10, 50, 80] and not cfg["multi_device"]

    def test_several_cameras_need_multi_device(self, trained, tmp_path, capsys):
        code = main(["train", "--manifest", str(trained / "data" / "manifest.csv"), "--candidates",
                     str(trained / "cands"), "--epochs", "1", "--out", str(tmp_path)])
        assert code == 2 and "multi_device" in capsys.readouterr().err

    def test_missing_candidates_exit_2(self, trained, tmp_path, capsys):
        root = trained
        code = main(["train", "--manifest", str(root / "data" / "manifest.csv"), "--candidates",
                     str(root / "cands" / "cam0.json"), str(tmp_path / "cam1.json"), "--multi-device",
                     "--epochs", "1", "--out", str(tmp_path / "r")])
        assert code == 2
        assert "cam1" in capsys.readouterr().err

    def test_bad_config_field(self, trained, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 0}))
        code = main(["train", "--manifest", str(trained / "data" / "manifest.csv"), "--candidates",
                     str(trained / "cands"), "--multi-device", "--config", str(cfg), "--out", str(tmp_path)])
        assert code == 2 and "epochs" in capsys.readouterr().err


class TestInfer:
    def test_report_rows(self, trained, tmp_path):
        root = trained
        rep = tmp_path / "r.jsonl"
        assert main(["infer", str(root / "run" / "model.chkp"), "--manifest", str(root / "data" / "manifest.csv"),
                     "--candidates", str(root / "cands"), "--folds", str(root / "folds.json"), "--holdout", "0",
                     "--report", str(rep), "--emit-corrected", str(tmp_path / "img")]) == 0
        rows = [json.loads(line) for line in rep.read_text().splitlines()]
        assert len(rows) == 4
        for r in rows:
            assert {"image_id", "estimate", "top5", "angular_error_deg"} <= set(r)
            assert len(r["top5"]) == 3 and abs(sum(t["prob"] for t in r["top5"]) - 1) < 1e-9
        assert len(list((tmp_path / "img").glob("*_preview.png"))) == 4

    def test_single_image_no_truth(self, trained, tmp_path):
        root = trained
        img = sorted((root / "data" / "images").glob("cam0_*.chyp"))[0]
        rep = tmp_path / "r.jsonl"
        assert main(["infer", str(root / "run" / "model.chkp"), "--image", str(img), "--camera", "cam0",
                     "--saturation-level", "1", "--candidates", str(root / "cands" / "cam0.json"),
                     "--report", str(rep), "--time"]) == 0
        row = json.loads(rep.read_text())
        assert "angular_error_deg" not in row and row["ms"] > 0

    def test_foreign_candidates_need_reset(self, trained, tmp_path):
        root = trained
        other = CandidateSet("cam0", normalize_illuminant([[0.5, 0.6, 0.62], [0.6, 0.6, 0.5]]), "kmeans")
        other.save(tmp_path / "cam0.json")
        args = ["infer", str(root / "run" / "model.chkp"), "--manifest", str(root / "data" / "manifest.csv"),
                "--candidates", str(tmp_path / "cam0.json"), str(root / "cands" / "cam1.json"),
                "--report", str(tmp_path / "r.jsonl")]
        assert main(args) == 1
        assert main(args + ["--allow-head-reset"]) == 0


class TestEvaluate:
    def test_gray_world_folds(self, dataset, tmp_path):
        root, manifest = dataset
        out = tmp_path / "s.json"
        assert main(["evaluate", "--manifest", str(manifest), "--estimator", "gray-world",
                     "--folds", str(root / "folds.json"), "--summary", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert set(rep["per_fold"]) == {"0", "1", "2"}
        assert "summary" in rep and rep["pooled"]["n"] == 12

    def test_checkpoint(self, trained, tmp_path):
        root = trained
        out = tmp_path / "s.json"
        assert main(["evaluate", "--manifest", str(root / "data" / "manifest.csv"),
                     "--checkpoint", str(root / "run" / "model.chkp"), "--candidates", str(root / "cands"),
                     "--folds", str(root / "folds.json"), "--holdout", "0", "--summary", str(out)]) == 0
        assert json.loads(out.read_text())["pooled"]["n"] == 4

    def test_needs_source(self, dataset):
        assert main(["evaluate", "--manifest", str(dataset[1])]) == 2


def test_usage_error_exit_2():
    proc = subprocess.run([sys.executable, "-m", "chyp.cli", "train"], capture_output=True)
    assert proc.returncode == 2
