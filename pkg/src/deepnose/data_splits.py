"""Multi-label iterative stratification into k folds.

Second-order variant: besides single descriptors, every descriptor pair that
co-occurs in at least ``min_pair_count`` rows is treated as an extra label,
so pairwise label statistics are balanced across folds as well.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange
from .molecule_io import LabelTable


@dataclass
class FoldAssignment:
    assignment: dict[int, int]
    k: int
    seed: int
    order: int = 2

    def folds(self) -> list[list[int]]:
        out = [[] for _ in range(self.k)]
        for cid, f in self.assignment.items():
            out[f].append(cid)
        return out

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "order": self.order,
                           "assignment": {str(c): f for c, f in sorted(self.assignment.items())}},
                          indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        obj = json.loads(text)
        return cls({int(c): int(f) for c, f in obj["assignment"].items()},
                   int(obj["k"]), int(obj["seed"]), int(obj.get("order", 2)))

    @classmethod
    def load(cls, path) -> "FoldAssignment":
        return cls.from_json(Path(path).read_text())


def _row_label_sets(labels: np.ndarray, order: int, min_pair_count: int) -> list[list[int]]:
    n_labels = labels.shape[1]
    singles = [list(np.flatnonzero(row)) for row in labels]
    if order == 1:
        return singles
    pair_counts = Counter(p for s in singles for p in combinations(s, 2))
    pair_id = {}
    for p, cnt in sorted(pair_counts.items()):
        if cnt >= min_pair_count:
            pair_id[p] = n_labels + len(pair_id)
    return [s + [pair_id[p] for p in combinations(s, 2) if p in pair_id] for s in singles]


def iterative_stratification(table: LabelTable, k: int = 5, order: int = 2, seed: int = 0,
                             min_pair_count: int = 2) -> FoldAssignment:
    """Greedy fold assignment, rarest label first.

    For the rarest label with unassigned rows, each of its rows goes to the
    fold that still wants most of that label; ties go to the fold whose
    demand for the row's single descriptors, each as a fraction of that
    descriptor's total, sums highest; then to the fold with most remaining
    capacity, then to a seeded random choice. Rows without labels are placed
    by remaining capacity alone.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    rng = np.random.default_rng(seed)
    n = len(table)
    n_single = np.asarray(table.labels).shape[1]
    row_labels = _row_label_sets(np.asarray(table.labels), order, min_pair_count)
    n_univ = max((max(s) for s in row_labels if s), default=-1) + 1

    rows_of: list[list[int]] = [[] for _ in range(n_univ)]
    for r, s in enumerate(row_labels):
        for lab in s:
            rows_of[lab].append(r)
    totals = np.array([len(rs) for rs in rows_of], dtype=np.float64)
    demand = np.tile(totals / k, (k, 1))  # [k, labels]
    capacity = np.full(k, n / k)
    remaining = totals.astype(np.int64).copy()
    fold_of = np.full(n, -1, dtype=np.int64)

    def pick(candidates: np.ndarray) -> int:
        if len(candidates) == 1:
            return int(candidates[0])
        cap = capacity[candidates]
        candidates = candidates[cap == cap.max()]
        return int(candidates[0] if len(candidates) == 1 else rng.choice(candidates))

    def assign(r: int, f: int):
        fold_of[r] = f
        capacity[f] -= 1
        for lab in row_labels[r]:
            demand[f, lab] -= 1
            remaining[lab] -= 1
            if remaining[lab] > 0:
                heapq.heappush(heap, (int(remaining[lab]), lab))

    # lazy min-heap keyed by unassigned-row count; stale entries are skipped
    heap = [(int(remaining[lab]), lab) for lab in range(n_univ) if remaining[lab] > 0]
    heapq.heapify(heap)
    while heap:
        cnt, lab = heapq.heappop(heap)
        if cnt != remaining[lab] or cnt == 0:
            continue
        for r in rows_of[lab]:
            if fold_of[r] >= 0:
                continue
            d = demand[:, lab]
            cands = np.flatnonzero(d == d.max())
            if len(cands) > 1:
                singles = [x for x in row_labels[r] if x < n_single]
                score = (demand[np.ix_(cands, singles)] / totals[singles]).sum(axis=1)
                cands = cands[score == score.max()]
            assign(r, pick(cands))
    for r in np.flatnonzero(fold_of < 0):
        assign(int(r), pick(np.arange(k)))
    return FoldAssignment({int(c): int(f) for c, f in zip(table.cids, fold_of)}, k, seed, order)


def train_test_view(assignment: FoldAssignment, test_fold: int) -> tuple[list[int], list[int]]:
    if not 0 <= test_fold < assignment.k:
        raise IndexOutOfRange(f"test fold {test_fold} not in [0, {assignment.k})")
    train = sorted(c for c, f in assignment.assignment.items() if f != test_fold)
    test = sorted(c for c, f in assignment.assignment.items() if f == test_fold)
    return train, test
