"""Zero-shot mixture embeddings and their agreement with perceptual distances.

A mixture's feature vector is the plain mean of its components' ensemble
feature vectors; no parameters are fitted here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataMissing, DegenerateVariance, MalformedRow
from .molecule_io import Molecule
from .rotation_grid import RotationGrid
from .train_eval import _csv, molecule_features


@dataclass(frozen=True)
class MixturePairRecord:
    dataset: str
    pair_id: str
    components_a: tuple[int, ...]
    components_b: tuple[int, ...]
    perceptual_distance: float

    def __post_init__(self):
        if not self.components_a or not self.components_b:
            raise ValueError(f"pair {self.pair_id}: empty component list")
        if not math.isfinite(self.perceptual_distance):
            raise ValueError(f"pair {self.pair_id}: non-finite distance")


def _cid_list(text: str, line: int) -> tuple[int, ...]:
    try:
        cids = tuple(int(t) for t in text.split(";") if t.strip())
    except ValueError:
        raise MalformedRow(f"bad cid list {text!r}", line) from None
    if not cids:
        raise MalformedRow("empty cid list", line)
    return cids


def parse_mixture_csv(text: str) -> list[MixturePairRecord]:
    """Read ``dataset,pair_id,cids_a,cids_b,distance`` rows (cids separated by ';')."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines, strict=True)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["dataset", "pair_id", "cids_a", "cids_b", "distance"]:
        raise MalformedRow("header must be dataset,pair_id,cids_a,cids_b,distance", 1)
    out = []
    for i, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise MalformedRow(f"expected 5 fields, got {len(row)}", i)
        try:
            dist = float(row[4])
        except ValueError:
            raise MalformedRow(f"bad distance {row[4]!r}", i) from None
        if not math.isfinite(dist):
            raise MalformedRow("distance must be finite", i)
        out.append(MixturePairRecord(row[0].strip(), row[1].strip(), _cid_list(row[2], i),
                                     _cid_list(row[3], i), dist))
    return out


class FeatureCache:
    """Ensemble feature vectors per cid, computed on first use."""

    def __init__(self, models: Sequence, grid: RotationGrid, structures: dict[int, Molecule],
                 progress: Callable[[str], None] | None = None):
        self.models, self.grid, self.structures = models, grid, structures
        self.progress = progress
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, cid: int) -> np.ndarray:
        if cid not in self._cache:
            if cid not in self.structures:
                raise DataMissing(f"no structure for cid {cid}")
            self._cache[cid] = molecule_features(self.models, self.structures[cid], self.grid).astype(np.float64)
            if self.progress:
                self.progress(f"features for cid {cid} ({len(self._cache)} cached)")
        return self._cache[cid]


def mixture_features(cids: Sequence[int], features: Callable[[int], np.ndarray]) -> np.ndarray:
    """Mean of component feature vectors; any missing component raises DataMissing."""
    if len(cids) == 0:
        raise ValueError("mixture has no components")
    missing = []
    vecs = []
    for c in cids:
        try:
            vecs.append(features(c))
        except DataMissing:
            missing.append(c)
    if missing:
        raise DataMissing(f"missing structures for cids {missing}")
    return np.mean(vecs, axis=0)


def mixture_distance(f1, f2) -> float:
    return float(np.linalg.norm(np.asarray(f1, dtype=np.float64) - np.asarray(f2, dtype=np.float64)))


def pearson(x, y) -> float:
    """Sample Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and the same length")
    if len(x) < 3:
        raise DegenerateVariance(f"need at least 3 points, got {len(x)}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise DegenerateVariance("zero variance in " + ("predicted" if sx == 0 else "observed") + " values")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass
class MixtureReport:
    pair_ids: list[str]
    datasets: list[str]
    predicted: np.ndarray
    observed: np.ndarray
    r: float | None
    r_by_dataset: dict[str, float | None]
    unscorable: list[tuple[str, str]] = field(default_factory=list)
    problems: dict[str, str] = field(default_factory=dict)


def _safe_r(x, y, key: str, problems: dict) -> float | None:
    try:
        return pearson(x, y)
    except DegenerateVariance as exc:
        problems[key] = f"DegenerateVariance: {exc}"
        return None


def evaluate_mixture_datasets(records: Sequence[MixturePairRecord],
                              features: Callable[[int], np.ndarray]) -> MixtureReport:
    """Predicted vs observed distances, correlated overall and per source dataset."""
    ids, dsets, pred, obs, bad = [], [], [], [], []
    for rec in records:
        try:
            fa = mixture_features(rec.components_a, features)
            fb = mixture_features(rec.components_b, features)
        except DataMissing as exc:
            bad.append((rec.pair_id, str(exc)))
            continue
        ids.append(rec.pair_id)
        dsets.append(rec.dataset)
        pred.append(mixture_distance(fa, fb))
        obs.append(rec.perceptual_distance)
    pred, obs = np.array(pred), np.array(obs)
    problems: dict[str, str] = {}
    r_all = _safe_r(pred, obs, "all", problems)
    by = {}
    for ds in sorted(set(dsets)):
        sel = np.array([d == ds for d in dsets])
        by[ds] = _safe_r(pred[sel], obs[sel], ds, problems)
    return MixtureReport(ids, dsets, pred, obs, r_all, by, bad, problems)


def mixture_report_csv(report: MixtureReport, provenance: dict | None = None) -> str:
    rows = [(d, p, repr(float(a)), repr(float(b)))
            for d, p, a, b in zip(report.datasets, report.pair_ids, report.predicted, report.observed)]
    return _csv(rows, ["dataset", "pair_id", "predicted", "observed"], provenance)


def mixture_summary_csv(report: MixtureReport, provenance: dict | None = None) -> str:
    def fmt(r):
        return "" if r is None else f"{r:.6f}"
    n_by = {ds: report.datasets.count(ds) for ds in report.r_by_dataset}
    rows = [("all", len(report.pair_ids), fmt(report.r), report.problems.get("all", ""))]
    rows += [(ds, n_by[ds], fmt(r), report.problems.get(ds, "")) for ds, r in report.r_by_dataset.items()]
    rows += [(f"unscorable:{pid}", 0, "", why) for pid, why in report.unscorable]
    return _csv(rows, ["dataset", "n_pairs", "pearson_r", "note"], provenance)
