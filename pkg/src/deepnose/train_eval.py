"""Masked multi-dataset training, ensembles, AUROC reports and thresholds."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import nn_core as nn
from .errors import ConfigMismatch, DataMissing, ShapeMismatch
from .model import DeepNose, DeepNoseConfig, build_model
from .molecule_io import DATASETS, LabelTable, Molecule
from .rotation_grid import RotationGrid
from .voxelizer import center_molecule, voxelize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 100
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    box: float = 18.0
    step: float = 1.0
    float64: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    model: DeepNose
    losses: list[tuple[int, str, float]] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)

    def epoch_losses(self, split: str = "train") -> list[float]:
        return [loss for _, s, loss in self.losses if s == split]


def voxel_batch(molecules: Sequence[Molecule], grid: RotationGrid, box=18.0, step=1.0,
                dtype=np.float32) -> np.ndarray:
    """Stack voxel tensors of already-centered molecules into [B, O, 6, L, L, L]."""
    return np.stack([voxelize(m, grid, box, step, dtype).data for m in molecules])


def _resolve(molecules: dict, cids: Sequence[int]):
    present = [c for c in cids if c in molecules]
    missing = [c for c in cids if c not in molecules]
    if missing:
        log.warning("%d cids lack structures and are excluded: %s", len(missing), missing[:10])
    return present, missing


def training_step(model: DeepNose, opt: nn.Adam, vox: np.ndarray, labels: np.ndarray,
                  mask: np.ndarray, rng: np.random.Generator) -> float:
    """One forward/backward/Adam update; returns the batch loss."""
    opt.zero_grad()
    logits = model(vox, "train", rng)
    loss = nn.masked_bce_with_logits(logits, labels, mask)
    loss.backward()
    opt.step()
    return float(loss.data)


def batch_loss(model: DeepNose, vox, labels, mask) -> float:
    with nn.no_grad():
        return float(nn.masked_bce_with_logits(model(vox, "eval"), labels, mask).data)


def train_fold(molecules: dict[int, Molecule], table: LabelTable, train_cids: Sequence[int],
               grid: RotationGrid, config: TrainConfig, seed: int,
               model_config: DeepNoseConfig | None = None,
               test_cids: Sequence[int] = (),
               progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train one network on ``train_cids``.

    Cids without a structure are excluded before the first epoch. The run is
    fully determined by (seed, config, data): initialization, shuffling and
    dropout draw from generators seeded with ``seed``.
    """
    train_cids, missing = _resolve(molecules, list(train_cids))
    if not train_cids:
        raise DataMissing("no training molecules with structures")
    test_cids, _ = _resolve(molecules, list(test_cids))
    model_config = model_config or DeepNoseConfig(outputs=len(table.vocab), n_dirs=grid.n_dirs,
                                                  n_axial=grid.n_axial, grid_L=int(config.box / config.step))
    if model_config.outputs != len(table.vocab):
        raise ShapeMismatch(f"model has {model_config.outputs} outputs, vocabulary {len(table.vocab)}")
    dtype = np.float64 if config.float64 else np.float32
    model = build_model(model_config, seed, dtype)
    opt = nn.Adam(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    centered = {c: center_molecule(molecules[c]) for c in set(train_cids) | set(test_cids)}
    rows = table.row_of()
    all_labels, all_mask = table.labels, table.label_mask()
    result = TrainResult(model, excluded=missing)
    order = np.array(train_cids)
    for epoch in range(config.epochs):
        perm = order[shuffle_rng.permutation(len(order))]
        total, count = 0.0, 0
        for s in range(0, len(perm), config.batch_size):
            batch = perm[s:s + config.batch_size]
            r = [rows[c] for c in batch]
            vox = voxel_batch([centered[c] for c in batch], grid, config.box, config.step, dtype)
            loss = training_step(model, opt, vox, all_labels[r], all_mask[r], dropout_rng)
            total += loss * len(batch)
            count += len(batch)
        result.losses.append((epoch, "train", total / count))
        msg = f"epoch {epoch + 1}/{config.epochs} train loss {total / count:.5f}"
        if test_cids:
            tl = _eval_loss(model, [centered[c] for c in test_cids], [rows[c] for c in test_cids],
                            all_labels, all_mask, grid, config)
            result.losses.append((epoch, "test", tl))
            msg += f" test loss {tl:.5f}"
        log.info(msg)
        if progress:
            progress(msg)
    return result


def _eval_loss(model, mols, rows, labels, mask, grid, config) -> float:
    total, count = 0.0, 0
    dtype = model.dtype
    for s in range(0, len(mols), config.batch_size):
        vox = voxel_batch(mols[s:s + config.batch_size], grid, config.box, config.step, dtype)
        r = rows[s:s + config.batch_size]
        m = mask[r]
        n = int(m.sum())
        total += batch_loss(model, vox, labels[r], m) * n
        count += n
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def molecule_features(models: Sequence[DeepNose], mol: Molecule, grid: RotationGrid) -> np.ndarray:
    """Ensemble-mean feature vector of one molecule."""
    return np.mean([m.molecule_features(mol, grid) for m in models], axis=0)


def _check_shared_config(models: Sequence[DeepNose]):
    if not models:
        raise ConfigMismatch("empty ensemble")
    cfg = models[0].config
    for m in models[1:]:
        if m.config.block_channels != cfg.block_channels or m.config.outputs != cfg.outputs \
                or m.config.hidden != cfg.hidden or m.config.grid_L != cfg.grid_L:
            raise ConfigMismatch("ensemble members have different architectures")


def ensemble_predict(models: Sequence[DeepNose], molecules: Sequence[Molecule], grid: RotationGrid,
                     average: str = "logits", centered: bool = False) -> np.ndarray:
    """Mean eval-mode output of the ensemble, [N, outputs].

    ``average="probabilities"`` averages sigmoid outputs instead of logits.
    """
    _check_shared_config(models)
    if average not in ("logits", "probabilities"):
        raise ValueError(f"unknown averaging {average!r}")
    out = np.zeros((len(molecules), models[0].config.outputs), dtype=np.float64)
    for model in models:
        feats = np.stack([model.molecule_features(m, grid, center=not centered) for m in molecules])
        z = model.predict_features(feats).astype(np.float64)
        out += nn.sigmoid(z) if average == "probabilities" else z
    return out / len(models)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with midranks for ties; None when a class is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    p = int(labels.sum())
    q = labels.size - p
    if p == 0 or q == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - p * (p + 1) / 2.0) / (p * q))


@dataclass
class EvalReport:
    descriptor_auroc: np.ndarray  # [n_descriptors], NaN where undefined
    dataset_mean: np.ndarray  # [4], NaN for datasets without any defined descriptor
    skipped: np.ndarray  # [4] undefined descriptors per dataset
    fold: int | str | None = None

    def defined(self) -> np.ndarray:
        return ~np.isnan(self.descriptor_auroc)


def dataset_report(scores: np.ndarray, labels: np.ndarray, dataset_mask: np.ndarray,
                   vocab, fold=None) -> EvalReport:
    """Per-descriptor AUROC over molecules present in the descriptor's dataset."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.shape[1] != len(vocab):
        raise ShapeMismatch(f"scores {scores.shape}, labels {labels.shape}, vocabulary {len(vocab)}")
    col_ds = vocab.column_dataset()
    per = np.full(len(vocab), np.nan)
    for j in range(len(vocab)):
        rows = np.asarray(dataset_mask)[:, col_ds[j]]
        a = auroc(scores[rows, j], labels[rows, j]) if rows.any() else None
        if a is not None:
            per[j] = a
    means = np.full(len(DATASETS), np.nan)
    skipped = np.zeros(len(DATASETS), dtype=np.int64)
    for d in range(len(DATASETS)):
        block = per[vocab.block_slice(d)]
        skipped[d] = int(np.isnan(block).sum())
        if (~np.isnan(block)).any():
            means[d] = float(np.nanmean(block))
    return EvalReport(per, means, skipped, fold)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Fold average: mean of per-fold dataset means and per-descriptor AUROCs."""
    per = np.array([r.descriptor_auroc for r in reports])
    means = np.array([r.dataset_mean for r in reports])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns stay NaN
        return EvalReport(np.nanmean(per, axis=0), np.nanmean(means, axis=0),
                          np.sum([r.skipped for r in reports], axis=0), "mean")


def calibrate_thresholds(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Equal-error-rate threshold per descriptor, from training rows.

    Candidates are midpoints between consecutive distinct scores plus one
    point below the minimum and one above the maximum; the candidate
    minimizing |TPR - (1 - FPR)| with prediction ``score > t`` wins (lowest t
    on ties). Descriptors without positives get +inf.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.ndim == 1:
            mask = mask[:, None]
    out = np.full(scores.shape[1], np.inf)
    for j in range(scores.shape[1]):
        rows = slice(None) if mask is None else mask[:, j]
        s, y = scores[rows, j], labels[rows, j]
        p = int(y.sum())
        if p == 0:
            continue
        q = y.size - p
        uniq = np.unique(s)
        cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
        # counts with score > candidate, via sorted search
        order = np.sort(s[y])
        neg = np.sort(s[~y])
        tp = p - np.searchsorted(order, cands, side="right")
        fp = q - np.searchsorted(neg, cands, side="right")
        tpr = tp / p
        fpr = fp / q if q else np.zeros_like(tpr)
        gap = np.abs(tpr - (1.0 - fpr))
        out[j] = cands[int(np.argmin(gap))]
    return out


def binarize(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores)
    thresholds = np.asarray(thresholds)
    if scores.shape[-1] != thresholds.shape[-1]:
        raise ShapeMismatch(f"scores {scores.shape} vs thresholds {thresholds.shape}")
    return (scores > thresholds).astype(np.uint8)


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------

def _csv(rows, header, provenance: dict | None = None) -> str:
    buf = io.StringIO()
    for k, v in (provenance or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def metrics_csv(reports: Sequence[EvalReport], vocab, provenance=None) -> str:
    names = vocab.descriptor_names()
    rows = [(word, ds, r.fold, _fmt(float(a))) for r in reports
            for (ds, word), a in zip(names, r.descriptor_auroc)]
    return _csv(rows, ["descriptor", "dataset", "fold", "auroc"], provenance)


def summary_csv(reports: Sequence[EvalReport], provenance=None) -> str:
    rows = []
    for r in reports:
        for d, name in enumerate(DATASETS):
            rows.append((name, r.fold, _fmt(float(r.dataset_mean[d])), int(r.skipped[d])))
    return _csv(rows, ["dataset", "fold", "mean_auroc", "skipped"], provenance)


def loss_csv(losses, provenance=None) -> str:
    return _csv([(e, s, f"{l:.6f}") for e, s, l in losses], ["epoch", "split", "loss"], provenance)


def thresholds_csv(thresholds: np.ndarray, vocab, provenance=None) -> str:
    rows = [(f"{ds}:{word}", repr(float(t))) for (ds, word), t in zip(vocab.descriptor_names(), thresholds)]
    return _csv(rows, ["descriptor", "threshold"], provenance)
