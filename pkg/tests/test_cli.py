"""End-to-end CLI behaviour: outputs, exit codes and config precedence."""

import json
import shutil

import numpy as np
import pytest
from PIL import Image

from fruitform.cli import main
from fruitform.data import DatasetManifest, Split
from fruitform.shapegen import GradeThresholds, symmetry_score
from fruitform.silhouette import load_mask

from conftest import make_manifest


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """shapegen -> split -> train single -> eval, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["--out", str(root / "gen"), "--seed", "1", "shapegen", "--per-class", "50"]) == 0
    assert main(["--out", str(root / "gen"), "--seed", "7", "dataset", "split",
                 "--manifest", str(root / "gen" / "procedural.manifest.jsonl"),
                 "--ratios", "0.8,0.1,0.1"]) == 0
    split = root / "gen" / "procedural-split.manifest.jsonl"
    assert main(["--out", str(root / "run"), "train", "single", "--manifest", str(split),
                 "--max-epochs", "2", "--batch-size", "16"]) == 0
    assert main(["--out", str(root / "reports"), "eval", "--manifest", str(split),
                 "--model-dir", str(root / "run")]) == 0
    return root, split


class TestShapegen:
    def test_counts_and_relabel(self, pipeline):
        root, _ = pipeline
        m = DatasetManifest.load(root / "gen" / "procedural.manifest.jsonl")
        assert len(m.records) == 200
        assert list(m.class_counts.values()) == [50, 50, 50, 50]
        t = GradeThresholds()
        for r in m.records[::10]:
            assert t.grade(symmetry_score(load_mask(root / "gen" / "masks", r.id))) is r.label

    def test_same_seed_same_manifest(self, pipeline, tmp_path):
        root, _ = pipeline
        assert main(["--out", str(tmp_path), "--seed", "1", "shapegen", "--per-class", "50"]) == 0
        a = DatasetManifest.load(root / "gen" / "procedural.manifest.jsonl")
        b = DatasetManifest.load(tmp_path / "procedural.manifest.jsonl")
        assert a.content_hash() == b.content_hash()


class TestDataset:
    def test_split_populated(self, pipeline):
        _, split = pipeline
        m = DatasetManifest.load(split)
        assert len(m.splits) == len(m.records) == 200
        assert len(m.split_records(Split.Test)) == 20

    def test_balance_table_counts(self, tmp_path, capsys):
        path = make_manifest((4050, 1741, 651, 1961)).save(tmp_path / "apple.manifest.jsonl")
        assert main(["--out", str(tmp_path), "dataset", "balance", "--manifest", str(path),
                     "--target", "5000"]) == 0
        plan = json.loads((tmp_path / "plan.json").read_text())
        assert plan["planned_per_class"] == {"ExtraClass": 950, "FirstClass": 3259,
                                             "SecondClass": 4349, "Ungraded": 3039}

    def test_invalid_ratios(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        code = main(["--out", str(tmp_path), "dataset", "split", "--manifest",
                     str(root / "gen" / "procedural.manifest.jsonl"), "--ratios", "0.8,0.3"])
        assert code == 2
        assert "ratios" in capsys.readouterr().err

    def test_missing_manifest_is_io_error(self, tmp_path):
        assert main(["--out", str(tmp_path), "dataset", "split", "--manifest",
                     str(tmp_path / "absent.jsonl")]) == 1

    def test_ingest_and_augment(self, image_tree, tmp_path):
        out = tmp_path / "o"
        assert main(["--out", str(out), "dataset", "ingest", "--root", str(image_tree),
                     "--fruit", "Apple"]) == 0
        assert main(["--out", str(out), "dataset", "balance", "--manifest",
                     str(out / "apple.manifest.jsonl"), "--target", "8"]) == 0
        assert main(["--out", str(out), "dataset", "augment", "--manifest",
                     str(out / "apple.manifest.jsonl"), "--plan", str(out / "plan.json")]) == 0
        m = DatasetManifest.load(out / "apple-augmented.manifest.jsonl")
        assert list(m.class_counts.values()) == [8, 8, 8, 8]


class TestSilhouette:
    def test_builtin_no_exclusions(self, pipeline, tmp_path):
        root, split = pipeline
        assert main(["--out", str(tmp_path), "silhouette", "builtin", "--manifest", str(split)]) == 0
        assert (tmp_path / "exclusions.csv").read_text().splitlines() == ["record_id,reason"]
        assert len(list((tmp_path / "masks").glob("*.mask.png"))) == 200

    def test_ingest_bad_size(self, pipeline, tmp_path):
        root, split = pipeline
        masks = tmp_path / "ext"
        shutil.copytree(root / "gen" / "masks", masks)
        victim = sorted(masks.iterdir())[0]
        Image.fromarray(np.zeros((10, 10), np.uint8)).save(victim)
        code = main(["--out", str(tmp_path / "o"), "silhouette", "ingest", "--manifest", str(split),
                     "--mask-dir", str(masks)])
        assert code == 2

    def test_ingest_report_written(self, pipeline, tmp_path):
        root, split = pipeline
        report = tmp_path / "rep.csv"
        assert main(["--out", str(tmp_path), "silhouette", "ingest", "--manifest", str(split),
                     "--mask-dir", str(root / "gen" / "masks"), "--report", str(report)]) == 0
        assert report.exists()


class TestTrainEval:
    def test_outputs(self, pipeline):
        root, _ = pipeline
        run = root / "run"
        assert {p.name for p in run.iterdir()} >= {"weights.npz", "model.json", "history.csv",
                                                   "history.json", "run.json"}
        assert len((run / "history.csv").read_text().splitlines()) == 1 + 2
        cfg = json.loads((run / "run.json").read_text())
        assert cfg["max_epochs"] == 2 and cfg["regime"] == "single" and cfg["lr"] == 1e-3

    def test_epoch_cap(self, pipeline, tmp_path):
        _, split = pipeline
        assert main(["--out", str(tmp_path), "train", "single", "--manifest", str(split),
                     "--max-epochs", "31"]) == 2
        assert not (tmp_path / "run.json").exists()

    def test_multi_without_masks(self, pipeline, tmp_path):
        _, split = pipeline
        assert main(["--out", str(tmp_path), "train", "multi", "--manifest", str(split),
                     "--max-epochs", "1"]) == 2

    def test_eval_writes_json_and_csv(self, pipeline):
        root, _ = pipeline
        js = root / "reports" / "procedural-tiny-single.report.json"
        d = json.loads(js.read_text())
        assert d["split"] == "Test" and d["regime"] == "single"
        assert js.with_suffix(".csv").exists()

    def test_rerun_identical(self, pipeline, tmp_path):
        root, split = pipeline
        args = ["train", "single", "--manifest", str(split), "--max-epochs", "2", "--batch-size", "16"]
        assert main(["--out", str(tmp_path / "again")] + args) == 0
        assert (tmp_path / "again" / "history.csv").read_bytes() == (root / "run" / "history.csv").read_bytes()
        assert main(["--out", str(tmp_path / "rep"), "eval", "--manifest", str(split),
                     "--model-dir", str(tmp_path / "again")]) == 0
        name = "procedural-tiny-single.report.json"
        assert (tmp_path / "rep" / name).read_bytes() == (root / "reports" / name).read_bytes()

    def test_config_precedence(self, pipeline, tmp_path):
        _, split = pipeline
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"max_epochs": 1, "batch_size": 64, "lr": 0.01}))
        assert main(["--out", str(tmp_path), "--config", str(cfg), "train", "single",
                     "--manifest", str(split), "--lr", "0.002"]) == 0
        eff = json.loads((tmp_path / "run.json").read_text())
        assert (eff["max_epochs"], eff["batch_size"], eff["lr"], eff["optimizer"]) == (1, 64, 0.002, "adam")

    def test_unknown_config_key(self, pipeline, tmp_path):
        _, split = pipeline
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 3}))
        assert main(["--out", str(tmp_path), "--config", str(cfg), "train", "single",
                     "--manifest", str(split)]) == 2


class TestReport:
    def test_marks_better_regime(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        reports = tmp_path / "reps"
        reports.mkdir()
        base = json.loads((root / "reports" / "procedural-tiny-single.report.json").read_text())
        for regime, acc in (("single", 0.5), ("multi", 0.75)):
            d = dict(base, regime=regime, test_accuracy=acc)
            (reports / f"{regime}.report.json").write_text(json.dumps(d))
        assert main(["--out", str(tmp_path), "report", "--reports", str(reports)]) == 0
        text = (tmp_path / "comparison.txt").read_text()
        assert "**0.7500**" in text and "**0.5000**" not in text
        assert (tmp_path / "comparison.csv").exists() and (tmp_path / "comparison.json").exists()

    def test_empty_dir(self, tmp_path):
        (tmp_path / "none").mkdir()
        assert main(["--out", str(tmp_path), "report", "--reports", str(tmp_path / "none")]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "sideways"])
    assert exc.value.code == 2
