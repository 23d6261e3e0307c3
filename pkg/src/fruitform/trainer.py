"""Training loops: single-input, synthetic->real fine-tuning, and joint multi-input."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from fruitform.data.preprocess import letterbox, preprocess
from fruitform.data.records import DatasetManifest, ImageRecord, Split
from fruitform.errors import TrainingError, ValidationError
from fruitform.io_utils import PathLike, atomic_write_text, sha256_bytes
from fruitform.nets import Model, MultiInputNet, SingleInputNet, is_multi, weights_hash
from fruitform.silhouette import SilhouetteMask

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "nadam", "rmsprop")
MAX_EPOCHS_CAP = 30
FINE_TUNE_LR = 1e-4
EVAL_BATCH = 64
CACHE_ENV = "FRUITFORM_CACHE"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = MAX_EPOCHS_CAP
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 1 <= self.max_epochs <= MAX_EPOCHS_CAP:
            raise ValidationError(f"max_epochs must be in [1, {MAX_EPOCHS_CAP}], got {self.max_epochs}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = "cross_entropy"
        d["checkpoint_metric"] = "val_accuracy"
        return d


def make_optimizer(name: str, params, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "nadam":
        return torch.optim.NAdam(params, lr=lr)
    return torch.optim.RMSprop(params, lr=lr)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


def select_best_epoch(rows: Sequence[EpochRow]) -> int:
    """1-based epoch with the highest val accuracy; ties -> lowest val loss -> earliest."""
    if not rows:
        raise ValidationError("empty history")
    best = min(rows, key=lambda r: (-r.val_accuracy, r.val_loss, r.epoch))
    return best.epoch


def _better(row: EpochRow, best: Optional[EpochRow]) -> bool:
    if best is None:
        return True
    return (-row.val_accuracy, row.val_loss, row.epoch) < (-best.val_accuracy, best.val_loss, best.epoch)


@dataclass
class TrainHistory:
    rows: List[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    steps_per_epoch: int = 0
    config: Optional[TrainConfig] = None
    dataset_hash: str = ""
    initial_weights_hash: str = ""
    best_weights_hash: str = ""
    # weights after the last epoch, kept alongside the restored best
    final_state: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def best(self) -> EpochRow:
        return self.rows[self.best_epoch - 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy)])
        return buf.getvalue()

    def sidecar(self) -> dict:
        cfg = self.config.to_dict() if self.config else {}
        return {"best_epoch": self.best_epoch, "config": cfg, "seed": cfg.get("seed"),
                "dataset_hash": self.dataset_hash}

    def save(self, csv_path: PathLike) -> Tuple[Path, Path]:
        csv_path = Path(csv_path)
        json_path = csv_path.with_suffix(".json")
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_text(json_path, json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = [EpochRow(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                         float(r["val_accuracy"])) for r in csv.DictReader(io.StringIO(text))]
        return cls(rows=rows, best_epoch=select_best_epoch(rows) if rows else 0)


# -- data ---------------------------------------------------------------------

class SplitData(NamedTuple):
    inputs: Tuple[torch.Tensor, ...]
    labels: torch.Tensor
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


def _cache_file(records: Sequence[ImageRecord], side: int, kind: str) -> Optional[Path]:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    key = [kind, side] + [[r.id, r.path, os.path.getmtime(r.path)] for r in records]
    return Path(root) / f"{kind}-{sha256_bytes(json.dumps(key).encode())[:24]}.npy"


def load_rgb_batch(records: Sequence[ImageRecord], side: int) -> torch.Tensor:
    """(N, 3, side, side) float32 tensor of preprocessed images."""
    cache = _cache_file(records, side, "rgb") if records else None
    if cache is not None and cache.exists():
        return torch.from_numpy(np.load(cache))
    arr = np.stack([preprocess(r, side) for r in records]).transpose(0, 3, 1, 2)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache, arr)
    return torch.from_numpy(arr)


def mask_to_input(mask: SilhouetteMask, side: int) -> np.ndarray:
    """Letterbox a mask with the same geometry as its image, re-binarised at 0.5."""
    soft = letterbox(mask.grid.astype(np.float32), side)
    return (soft >= 0.5).astype(np.float32)


def load_mask_batch(records: Sequence[ImageRecord], masks: Mapping[str, SilhouetteMask],
                    side: int) -> torch.Tensor:
    arr = np.stack([mask_to_input(masks[r.id], side) for r in records])[:, None]
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def check_masks(records: Sequence[ImageRecord], masks: Optional[Mapping[str, SilhouetteMask]]) -> None:
    masks = masks or {}
    missing = [r.id for r in records if r.id not in masks or not masks[r.id].passed]
    if missing:
        raise ValidationError(f"{len(missing)} records lack a passing silhouette mask: {missing}")


def load_split(model: Model, manifest: DatasetManifest, split: Split,
               masks: Optional[Mapping[str, SilhouetteMask]] = None) -> SplitData:
    records = manifest.split_records(split)
    if not records:
        raise ValidationError(f"split {Split(split).value} is empty")
    side = model.input_side
    inputs: Tuple[torch.Tensor, ...] = (load_rgb_batch(records, side),)
    if is_multi(model):
        check_masks(records, masks)
        inputs = inputs + (load_mask_batch(records, masks, side),)
    labels = torch.tensor([int(r.label) for r in records], dtype=torch.long)
    return SplitData(inputs, labels, [r.id for r in records])


def evaluate_tensors(model: Model, data: SplitData) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and predicted class codes, in fixed-size batches."""
    model.eval()
    total, preds = 0.0, []
    with torch.no_grad():
        for start in range(0, len(data), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            logits = model(*(x[sl] for x in data.inputs))
            total += nn.functional.cross_entropy(logits, data.labels[sl], reduction="sum").item()
            preds.append(torch.argmax(logits, dim=1).numpy())
    return total / len(data), np.concatenate(preds)


# -- training -------------------------------------------------------------------

def _fit(model: Model, train_data: SplitData, val_data: SplitData, config: TrainConfig,
         dataset_hash: str = "") -> Tuple[Model, TrainHistory]:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValidationError("model has no trainable parameters")
    opt = make_optimizer(config.optimizer, params, config.learning_rate)
    n = len(train_data)
    steps = math.ceil(n / config.batch_size)
    history = TrainHistory(steps_per_epoch=steps, config=config, dataset_hash=dataset_hash,
                           initial_weights_hash=weights_hash(model))
    best_row: Optional[EpochRow] = None
    best_state: Optional[Dict[str, torch.Tensor]] = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            order = torch.from_numpy(np.random.default_rng([config.seed, epoch]).permutation(n))
            running = 0.0
            for step in range(steps):
                idx = order[step * config.batch_size:(step + 1) * config.batch_size]
                logits = model(*(x[idx] for x in train_data.inputs))
                loss = nn.functional.cross_entropy(logits, train_data.labels[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {step + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            val_loss, preds = evaluate_tensors(model, val_data)
            val_acc = float((preds == val_data.labels.numpy()).mean())
            row = EpochRow(epoch, running / n, val_loss, val_acc)
            history.rows.append(row)
            log.info("epoch %d: train_loss=%.4f val_loss=%.4f val_acc=%.4f",
                     epoch, row.train_loss, val_loss, val_acc)
            if _better(row, best_row):
                best_row = row
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    history.final_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    history.best_epoch = best_row.epoch
    history.best_weights_hash = weights_hash(model)
    assert history.best_epoch == select_best_epoch(history.rows)
    return model, history


def train(model: SingleInputNet, manifest: DatasetManifest,
          config: TrainConfig = TrainConfig()) -> Tuple[SingleInputNet, TrainHistory]:
    """Train for ``config.max_epochs`` epochs and restore the best-epoch weights."""
    if is_multi(model):
        raise ValidationError("use train_multi for multi-input models")
    train_data = load_split(model, manifest, Split.Train)
    val_data = load_split(model, manifest, Split.Val)
    return _fit(model, train_data, val_data, config, manifest.content_hash())


def train_multi(model: MultiInputNet, manifest: DatasetManifest,
                masks: Mapping[str, SilhouetteMask],
                config: TrainConfig = TrainConfig()) -> Tuple[MultiInputNet, TrainHistory]:
    if not is_multi(model):
        raise ValidationError("train_multi needs a multi-input model")
    check_masks(manifest.split_records(Split.Train) + manifest.split_records(Split.Val), masks)
    train_data = load_split(model, manifest, Split.Train, masks)
    val_data = load_split(model, manifest, Split.Val, masks)
    return _fit(model, train_data, val_data, config, manifest.content_hash())


def _label_set(manifest: DatasetManifest) -> set:
    return {r.label for r in manifest.records}


def pretrain_then_finetune(model: SingleInputNet, synthetic: DatasetManifest, real: DatasetManifest,
                           cfg_pre: TrainConfig = TrainConfig(),
                           cfg_fine: TrainConfig = TrainConfig(learning_rate=FINE_TUNE_LR)
                           ) -> Tuple[SingleInputNet, TrainHistory, TrainHistory]:
    """Phase 1 on synthetic images, phase 2 on real images from phase 1's best weights."""
    if synthetic.classes != real.classes or _label_set(synthetic) != _label_set(real):
        raise ValidationError("synthetic and real manifests do not share the class taxonomy")
    model, hist_pre = train(model, synthetic, cfg_pre)
    model, hist_fine = train(model, real, cfg_fine)
    return model, hist_pre, hist_fine
