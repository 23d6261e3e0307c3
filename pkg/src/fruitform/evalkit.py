"""Metric suite (confusion, macro precision/recall/F1) and comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fruitform.data.records import CLASS_NAMES, NUM_CLASSES, DatasetManifest, Split
from fruitform.errors import ValidationError
from fruitform.io_utils import PathLike, atomic_write_text
from fruitform.nets import Model
from fruitform.silhouette import SilhouetteMask
from fruitform.trainer import evaluate_tensors, load_split

METRIC_COLUMNS = ("val_accuracy", "val_loss", "precision", "recall", "f1_score", "test_accuracy")
AVERAGING = "macro"


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int],
                     n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError("y_true and y_pred differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    zero_precision: List[int]  # class codes whose precision denominator is 0
    zero_recall: List[int]


def per_class_scores(cm: np.ndarray) -> ClassScores:
    """Per-class precision/recall/F1; a zero denominator contributes 0 and is flagged."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return ClassScores(precision, recall, f1,
                       [int(c) for c in np.flatnonzero(pred_tot == 0)],
                       [int(c) for c in np.flatnonzero(true_tot == 0)])


def _micro_self_test(cm: np.ndarray) -> None:
    # micro precision == micro recall == accuracy for single-label classification
    tp = np.trace(cm)
    total = cm.sum()
    fp = cm.sum(axis=0) - np.diag(cm)
    fn = cm.sum(axis=1) - np.diag(cm)
    micro_p = tp / (tp + fp.sum())
    micro_r = tp / (tp + fn.sum())
    acc = tp / total
    if not (micro_p == micro_r == acc):
        raise AssertionError(f"micro/macro consistency broken: {micro_p} {micro_r} {acc}")


@dataclass
class MetricsReport:
    val_accuracy: Optional[float]
    val_loss: Optional[float]
    precision: float
    recall: float
    f1_score: float
    test_accuracy: float
    confusion: np.ndarray
    loss: float = 0.0  # mean cross-entropy on the evaluated split
    split: str = Split.Test.value
    averaging: str = AVERAGING
    zero_division: Dict[str, List[str]] = field(default_factory=dict)
    config_ref: str = ""

    @classmethod
    def from_confusion(cls, cm: np.ndarray, **kw) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        if cm.shape != (NUM_CLASSES, NUM_CLASSES) or (cm < 0).any():
            raise ValidationError("confusion matrix must be a non-negative 4x4 count matrix")
        if cm.sum() == 0:
            raise ValidationError("empty confusion matrix")
        _micro_self_test(cm)
        s = per_class_scores(cm)
        kw.setdefault("val_accuracy", None)
        kw.setdefault("val_loss", None)
        return cls(precision=float(s.precision.mean()), recall=float(s.recall.mean()),
                   f1_score=float(s.f1.mean()), test_accuracy=float(np.trace(cm) / cm.sum()),
                   confusion=cm,
                   zero_division={"precision": [CLASS_NAMES[c] for c in s.zero_precision],
                                  "recall": [CLASS_NAMES[c] for c in s.zero_recall]},
                   **kw)

    def to_dict(self) -> dict:
        d = {c: getattr(self, c) for c in METRIC_COLUMNS}
        d.update(loss=self.loss, split=self.split, averaging=self.averaging,
                 confusion=self.confusion.tolist(), zero_division=self.zero_division,
                 config_ref=self.config_ref, classes=list(CLASS_NAMES))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{c: d[c] for c in METRIC_COLUMNS}, confusion=np.asarray(d["confusion"], dtype=np.int64),
                   loss=d.get("loss", 0.0), split=d.get("split", Split.Test.value),
                   averaging=d.get("averaging", AVERAGING), zero_division=d.get("zero_division", {}),
                   config_ref=d.get("config_ref", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerow([_fmt(getattr(self, c)) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def save(self, json_path: PathLike) -> Tuple[Path, Path]:
        json_path = Path(json_path)
        csv_path = json_path.with_suffix(".csv")
        atomic_write_text(json_path, self.to_json())
        atomic_write_text(csv_path, self.to_csv())
        return json_path, csv_path


def evaluate(model: Model, manifest: DatasetManifest, split: Split = Split.Test,
             masks: Optional[Mapping[str, SilhouetteMask]] = None,
             config_ref: str = "") -> MetricsReport:
    """Metrics of ``model`` on ``split``; val columns come from the Val split when present."""
    split = Split(split)
    data = load_split(model, manifest, split, masks)
    loss, preds = evaluate_tensors(model, data)
    cm = confusion_matrix(data.labels.numpy(), preds)
    val_acc = val_loss = None
    if split is Split.Val:
        val_acc, val_loss = float(np.trace(cm) / cm.sum()), loss
    elif manifest.split_records(Split.Val):
        vdata = load_split(model, manifest, Split.Val, masks)
        val_loss, vpreds = evaluate_tensors(model, vdata)
        val_acc = float((vpreds == vdata.labels.numpy()).mean())
    return MetricsReport.from_confusion(cm, val_accuracy=val_acc, val_loss=val_loss, loss=loss,
                                        split=split.value, config_ref=config_ref)


# -- comparison tables -------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


@dataclass
class ComparisonTable:
    rows: List[dict]
    text: str
    csv: str
    json: str

    def save(self, out_dir: PathLike, stem: str = "comparison") -> List[Path]:
        out_dir = Path(out_dir)
        return [atomic_write_text(out_dir / f"{stem}.txt", self.text),
                atomic_write_text(out_dir / f"{stem}.csv", self.csv),
                atomic_write_text(out_dir / f"{stem}.json", self.json)]


def render_comparison(reports: Mapping[Tuple[str, str, str], MetricsReport]) -> ComparisonTable:
    """One row per (fruit, model, regime); the best test accuracy per fruit is marked."""
    if not reports:
        raise ValidationError("no reports to compare")
    keys = list(reports)
    best: Dict[str, float] = {}
    for (fruit, _, _), rep in reports.items():
        best[fruit] = max(best.get(fruit, -1.0), round(rep.test_accuracy, 4))
    rows = []
    for key in keys:
        fruit, model, regime = key
        rep = reports[key]
        row = {"fruit": fruit, "model": model, "regime": regime}
        row.update({c: getattr(rep, c) for c in METRIC_COLUMNS})
        row["best"] = round(rep.test_accuracy, 4) == best[fruit]
        rows.append(row)

    header = ["fruit", "model", "regime", *METRIC_COLUMNS, "best"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r["fruit"], r["model"], r["regime"], *(_fmt(r[c]) for c in METRIC_COLUMNS),
                    int(r["best"])])

    cells = [header[:-1]]
    for r in rows:
        vals = [_fmt(r[c]) for c in METRIC_COLUMNS]
        if r["best"]:
            vals[-1] = f"**{vals[-1]}**"
        cells.append([r["fruit"], r["model"], r["regime"], *vals])
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(cells[0]))]
    lines = ["  ".join(str(v).ljust(w_) for v, w_ in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w_ for w_ in widths))

    js_rows = [{**r, **{c: (None if r[c] is None else round(r[c], 4)) for c in METRIC_COLUMNS}}
               for r in rows]
    return ComparisonTable(rows, "\n".join(lines) + "\n", buf.getvalue(),
                           json.dumps(js_rows, indent=2) + "\n")
