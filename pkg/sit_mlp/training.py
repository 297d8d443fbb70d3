"""
Training
========

SGD with momentum and classical weight decay, linear warmup followed by
cosine annealing (updated once per epoch), and the fit loop that writes a
run directory:

    run/
      config.toml   model + train config
      log.csv       "# {json}" header line, then epoch,lr,loss,acc
      best.ckpt     lowest mean train loss so far
      final.ckpt    weights after the last epoch
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import tensor_engine as te
from .checkpoint import save_checkpoint
from .config import TrainConfig, dump_config
from .data import DatasetManifest, ModalityKind, SkeletonGraph
from .data.loader import SkeletonDataset
from .errors import ConfigError, ContractError, DataError, TrainingError
from .network import SitMlpModel
from .tensor_engine import Tape, Tensor

logger = logging.getLogger(__name__)

NO_DECAY = ("gamma", "beta", "pe")


# ============================================================
# Loss / Schedule / Optimizer
# ============================================================

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch"""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= K):
        raise DataError(f"Labels must be integers in [0, {K})")
    return te.softmax_cross_entropy(logits, labels)


def lr_at(cfg: TrainConfig, epoch: float) -> float:
    """Linear warmup 0 -> base_lr, then cosine annealing base_lr -> end_lr"""
    if not 0 <= epoch <= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    if epoch == cfg.warmup_epochs:
        return cfg.base_lr
    if epoch == cfg.epochs:
        return cfg.end_lr
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.end_lr + 0.5 * (cfg.base_lr - cfg.end_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Momentum buffer per parameter name"""
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in NO_DECAY


def sgd_step(
    params: Sequence[Tuple[str, Tensor]],
    grads: Optional[Mapping[str, np.ndarray]],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
):
    """
    g = grad + wd * p (weights only); buf = momentum * buf + g; p -= lr * buf

    grads None reads each parameter's .grad.

    Raises:
        ContractError: a gradient is missing, or the parameter set differs
            from the one the momentum buffers were built for
    """
    names = [name for name, _ in params]
    if not state.buffers:
        state.buffers = {name: np.zeros_like(p.data) for name, p in params}
    elif set(names) != set(state.buffers):
        raise ContractError("Parameter set changed since the optimizer state was created")

    for name, p in params:
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise ContractError(f"No gradient for parameter {name}; run backward first")
        g = np.asarray(g, dtype=p.dtype)
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * p.data
        buf = state.buffers[name]
        buf *= cfg.momentum
        buf += g
        p.data -= lr * buf
    state.steps += 1


# ============================================================
# Fit
# ============================================================

@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    acc: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.loss!r},{self.acc!r}"


@dataclass
class FitResult:
    history: List[EpochLog]
    best_loss: float
    run_dir: Optional[Path]


LOG_COLUMNS = "epoch,lr,loss,acc"


def train_epoch(model: SitMlpModel, dataset: SkeletonDataset, state: OptimizerState,
                lr: float, cfg: TrainConfig, shuffle_seed: int) -> Tuple[float, float]:
    """One pass over the dataset; returns (mean loss, accuracy)"""
    model.train()
    params = model.named_parameters()
    total_loss, correct, seen = 0.0, 0, 0
    for batch in dataset.batches(cfg.batch_size, shuffle_seed):
        if len(batch) < 2:
            logger.warning(f"Skipping batch of size {len(batch)}; batch statistics need at least 2 samples")
            continue
        model.zero_grad()
        with Tape() as tape:
            logits = model(batch.data)
            loss = cross_entropy(logits, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"Non-finite loss {value} on batch starting with {batch.sample_ids[0]} at lr={lr}")
        te.backward(loss, tape)
        sgd_step(params, None, state, lr, cfg)
        total_loss += value * len(batch)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        seen += len(batch)
    if seen == 0:
        raise TrainingError("No batch with at least 2 samples; lower batch_size or add data")
    return total_loss / seen, correct / seen


def fit(
    model: SitMlpModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    modality: Union[ModalityKind, str] = ModalityKind.JOINT,
    graph: Optional[SkeletonGraph] = None,
    quiet: bool = False,
) -> FitResult:
    """
    Train for cfg.epochs epochs; epoch e (1-based) runs at lr_at(cfg, e).

    Deterministic given cfg.seed: epoch e shuffles with seed cfg.seed + e.

    Raises:
        DataError: empty manifest or labels outside the model's classes
        TrainingError: non-finite loss
    """
    modality = ModalityKind.parse(modality)
    mcfg = model.cfg
    manifest.validate(mcfg.num_classes)
    dataset = SkeletonDataset(manifest, mcfg.frames, mcfg.persons, modality, graph,
                              workers=cfg.workers, dtype=mcfg.np_dtype)
    state = OptimizerState()

    run_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(dump_config(mcfg, cfg), encoding="utf-8")
        header = {
            "model": mcfg.to_dict(),
            "train": cfg.to_dict(),
            "modality": modality.value,
            "ablation": mcfg.ablation.active(),
            "variant": mcfg.variant,
        }
        log_file = (run_dir / "log.csv").open("w", encoding="utf-8")
        log_file.write("# " + json.dumps(header, sort_keys=True) + "\n" + LOG_COLUMNS + "\n")

    history: List[EpochLog] = []
    best = math.inf
    try:
        for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=quiet):
            lr = lr_at(cfg, epoch)
            loss, acc = train_epoch(model, dataset, state, lr, cfg, cfg.seed + epoch)
            entry = EpochLog(epoch, lr, loss, acc)
            history.append(entry)
            if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
                logger.info(f"epoch {epoch:3d}  lr {lr:.5f}  loss {loss:.4f}  acc {acc:.3f}")
            if log_file is not None:
                log_file.write(entry.csv_row() + "\n")
                log_file.flush()
            if loss < best:
                best = loss
                if run_dir is not None:
                    save_checkpoint(run_dir / "best.ckpt", model, modality.value, {"epoch": epoch, "loss": loss})
        if run_dir is not None:
            save_checkpoint(run_dir / "final.ckpt", model, modality.value,
                            {"epoch": cfg.epochs, "loss": history[-1].loss})
    finally:
        if log_file is not None:
            log_file.close()
    return FitResult(history, best, run_dir)


def read_log(path: Union[str, Path]) -> Tuple[dict, List[EpochLog]]:
    """(header JSON, rows) of a run's log.csv"""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0][2:]) if lines and lines[0].startswith("# ") else {}
    rows = []
    for line in lines[1:]:
        if not line or line == LOG_COLUMNS:
            continue
        epoch, lr, loss, acc = line.split(",")
        rows.append(EpochLog(int(epoch), float(lr), float(loss), float(acc)))
    return header, rows
