"""
Evaluation, score files, ensembling and attention export.

Score file (CSV): header `sample_id,label,score_0,...,score_{K-1}`, one row
per sample holding softmax probabilities.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.metrics import confusion_matrix

from . import tensor_engine as te
from .data import DatasetManifest, ModalityKind, SkeletonGraph
from .data.loader import SkeletonDataset
from .data.preprocessing import derive_modality, preprocess
from .data.skeleton_io import read_sample
from .errors import ConfigError, DataError, ShapeError
from .network import SitMlpModel
from .tensor_engine import save_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray            # NaN for classes without samples
    confusion: np.ndarray            # [K, K], rows = true class
    scores: np.ndarray               # [N, K]
    labels: np.ndarray               # [N]
    sample_ids: List[str]

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
            "confusion": self.confusion.tolist(),
            "num_samples": self.num_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report_from_scores(scores: np.ndarray, labels: np.ndarray,
                       sample_ids: Optional[Sequence[str]] = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError(f"Score matrix {scores.shape} does not match {labels.shape[0]} labels")
    K = scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"Labels outside [0, {K})")
    preds = scores.argmax(axis=1)
    confusion = confusion_matrix(labels, preds, labels=np.arange(K))
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    accuracy = float(np.trace(confusion) / labels.size) if labels.size else 0.0
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(labels.size)]
    return EvalReport(accuracy, per_class, confusion, scores, labels, ids)


def predict_scores(model: SitMlpModel, dataset: SkeletonDataset, batch_size: int = 64,
                   workers: int = 0) -> np.ndarray:
    """Softmax probabilities [N, K] in dataset order; eval mode records nothing"""
    model.eval()

    def run(batch) -> np.ndarray:
        with te.no_grad():
            return te.softmax(model(batch.data), axis=-1).data.astype(np.float64)

    batches = list(dataset.batches(batch_size))
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    return np.concatenate(parts, axis=0)


def evaluate(
    model: SitMlpModel,
    manifest: DatasetManifest,
    batch_size: int = 64,
    modality: Union[ModalityKind, str] = ModalityKind.JOINT,
    graph: Optional[SkeletonGraph] = None,
    workers: int = 0,
    num_classes: Optional[int] = None,
) -> EvalReport:
    """
    Raises:
        ConfigError: dataset classes do not fit the model's classifier
    """
    K = model.cfg.num_classes
    if num_classes is not None and num_classes != K:
        raise ConfigError(f"Dataset has {num_classes} classes, model predicts {K}")
    if manifest.entries and manifest.labels.max() >= K:
        raise ConfigError(f"Label {manifest.labels.max()} outside the model's {K} classes")
    dataset = SkeletonDataset(manifest, model.cfg.frames, model.cfg.persons, modality, graph,
                              dtype=model.cfg.np_dtype)
    scores = predict_scores(model, dataset, batch_size, workers)
    return report_from_scores(scores, dataset.labels, dataset.sample_ids)


# ============================================================
# Score Files / Ensemble
# ============================================================

def write_scores(path: PathLike, report: EvalReport):
    K = report.scores.shape[1]
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label"] + [f"score_{k}" for k in range(K)])
        for sid, label, row in zip(report.sample_ids, report.labels, report.scores):
            writer.writerow([sid, int(label)] + [repr(float(v)) for v in row])


def read_scores(path: PathLike) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Score file not found: {path}")
    with path.open(encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ["sample_id", "label"]:
        raise DataError(f"{path}: expected header sample_id,label,score_0,...")
    K = len(rows[0]) - 2
    ids, labels, scores = [], [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != K + 2:
            raise DataError(f"{path}:{lineno}: expected {K + 2} columns, got {len(row)}")
        try:
            labels.append(int(row[1]))
            scores.append([float(v) for v in row[2:]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric label or score") from None
        ids.append(row[0])
    return report_from_scores(np.array(scores).reshape(-1, K), np.array(labels, dtype=np.int64), ids)


def ensemble(score_files: Sequence[PathLike], weights: Optional[Sequence[float]] = None) -> EvalReport:
    """
    Weighted sum of per-modality score matrices, then argmax.

    Weights default to uniform and are normalized to sum 1.

    Raises:
        ConfigError: weight count mismatch, negative or all-zero weights
        DataError: files disagree on samples, labels or class count
    """
    if not score_files:
        raise ConfigError("ensemble needs at least one score file")
    weights = [1.0] * len(score_files) if weights is None else [float(w) for w in weights]
    if len(weights) != len(score_files):
        raise ConfigError(f"{len(weights)} weights for {len(score_files)} score files")
    if any(w < 0 for w in weights) or sum(weights) == 0:
        raise ConfigError("Ensemble weights must be >= 0 and not all zero")

    reports = [read_scores(p) for p in score_files]
    base = reports[0]
    for path, r in zip(score_files[1:], reports[1:]):
        if r.scores.shape != base.scores.shape:
            raise DataError(f"{path}: scores {r.scores.shape} != {base.scores.shape}")
        if r.sample_ids != base.sample_ids or not np.array_equal(r.labels, base.labels):
            raise DataError(f"{path}: sample order or labels differ from {score_files[0]}")
    total = sum(weights)
    combined = sum(w * r.scores for w, r in zip(weights, reports)) / total
    return report_from_scores(combined, base.labels, base.sample_ids)


# ============================================================
# Attention Export
# ============================================================

def sample_attention(model: SitMlpModel, sample: np.ndarray, block: int = 0) -> np.ndarray:
    """
    Attention map of one STGU block for a preprocessed [M, T, V, D] sample.

    Returns [M, T_block, V, d_model] (persons are the folded batch axis).
    """
    stgu_blocks = model.stgu_blocks()
    if not stgu_blocks:
        raise ConfigError(f"Model variant {model.cfg.variant!r} has no STGU blocks")
    if not 0 <= block < len(stgu_blocks):
        raise ConfigError(f"Block index {block} outside [0, {len(stgu_blocks)})")
    target = stgu_blocks[block]
    model.eval()
    target.capture = True
    try:
        with te.no_grad():
            model(np.asarray(sample, dtype=model.cfg.np_dtype)[None])
        return target.export_attention().data
    finally:
        target.capture = False


def load_sample_for_model(model: SitMlpModel, path: PathLike, modality: Union[ModalityKind, str] = "joint",
                          graph: Optional[SkeletonGraph] = None) -> np.ndarray:
    seq = read_sample(path)
    if seq.joints != model.cfg.joints or seq.coord_dim != model.cfg.coord_dim:
        raise ShapeError(f"Sample has V={seq.joints}, D={seq.coord_dim}; model expects "
                         f"V={model.cfg.joints}, D={model.cfg.coord_dim}")
    x = preprocess(seq, model.cfg.frames, model.cfg.persons)
    return derive_modality(x, modality, graph)


def write_attention(path: PathLike, attention: np.ndarray, fmt: str = "csv"):
    """CSV rows (batch, frame, joint, channel, value) or one SITT tensor"""
    if fmt == "bin":
        save_tensor(path, attention)
        return
    if fmt != "csv":
        raise ConfigError(f"Unknown attention format {fmt!r}; expected csv or bin")
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["batch", "frame", "joint", "channel", "value"])
        for index in np.ndindex(*attention.shape):
            writer.writerow(list(index) + [repr(float(attention[index]))])
