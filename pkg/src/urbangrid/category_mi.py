"""Entropy, mutual information and NMI between categories via cell co-occurrence."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .aggregation import categories_of
from .core import EventDataset, SourceChannel

# cell x row x col entries materialized at once in MinCount mode
_MIN_CHUNK_ENTRIES = 4_000_000


class CategoryError(ValueError):
    pass


class CooccurrenceMode(str, enum.Enum):
    PAIR_PRODUCT = "product"
    MIN_COUNT = "min"
    PRESENCE = "presence"


@dataclass(frozen=True)
class ContingencyTable:
    row_labels: tuple
    col_labels: tuple
    weights: np.ndarray
    mode: Optional[CooccurrenceMode] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape != (len(self.row_labels), len(self.col_labels)):
            raise CategoryError(f"weights shape {w.shape} does not match labels")
        if (w < 0).any() or not np.isfinite(w).all():
            raise CategoryError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))

    @classmethod
    def from_array(cls, weights, mode=None) -> "ContingencyTable":
        w = np.asarray(weights, dtype=np.float64)
        return cls(tuple(range(w.shape[0])), tuple(range(w.shape[1])), w, mode)

    # correctly rounded sums keep results independent of memory layout,
    # so a table and its transpose agree bit for bit
    @property
    def total(self) -> float:
        return math.fsum(self.weights.ravel())

    @property
    def empty(self) -> bool:
        return self.total == 0

    @property
    def row_marginal(self) -> np.ndarray:
        return np.array([math.fsum(r) for r in self.weights])

    @property
    def col_marginal(self) -> np.ndarray:
        return np.array([math.fsum(c) for c in self.weights.T])

    def transpose(self) -> "ContingencyTable":
        return ContingencyTable(self.col_labels, self.row_labels, self.weights.T, self.mode)


def _as_table(table) -> ContingencyTable:
    return table if isinstance(table, ContingencyTable) else ContingencyTable.from_array(table)


def _per_cell_counts(frame: pd.DataFrame, cell_codes: np.ndarray, n_cells: int, source: SourceChannel, labels):
    mask = frame["source"].to_numpy() == source.code
    cats = pd.Categorical(frame["category"][mask], categories=list(labels)).codes.astype(np.int64)
    keep = cats >= 0
    cells = cell_codes[mask][keep]
    flat = np.bincount(cells * len(labels) + cats[keep], minlength=n_cells * len(labels))
    return flat.reshape(n_cells, len(labels))


def cooccurrence_table(
    dataset: EventDataset,
    row_source: SourceChannel,
    col_source: SourceChannel,
    mode=CooccurrenceMode.PAIR_PRODUCT,
    row_categories: Optional[Sequence[str]] = None,
    col_categories: Optional[Sequence[str]] = None,
) -> ContingencyTable:
    """Cross-category co-occurrence mass accumulated over cells.

    For per-cell counts ``n_i`` (row source) and ``m_j`` (column source):
    ``product`` adds ``n_i * m_j``, ``min`` adds ``min(n_i, m_j)`` and
    ``presence`` adds 1 when both are positive.
    """
    mode = CooccurrenceMode(mode)
    row_source, col_source = SourceChannel(row_source), SourceChannel(col_source)
    frame = dataset.frame
    present = set(np.unique(frame["source"].to_numpy()).tolist())
    for s in (row_source, col_source):
        if s.code not in present:
            raise CategoryError(f"dataset has no {s.value} events")
    rows = tuple(row_categories) if row_categories is not None else tuple(categories_of(dataset, row_source))
    cols = tuple(col_categories) if col_categories is not None else tuple(categories_of(dataset, col_source))

    cell_codes, uniques = pd.factorize(frame["cell_id"], sort=True)
    cell_codes = cell_codes.astype(np.int64)
    n_cells = len(uniques)
    n = _per_cell_counts(frame, cell_codes, n_cells, row_source, rows)
    m = _per_cell_counts(frame, cell_codes, n_cells, col_source, cols)

    if mode is CooccurrenceMode.PAIR_PRODUCT:
        weights = n.T @ m
    elif mode is CooccurrenceMode.PRESENCE:
        weights = (n > 0).astype(np.int64).T @ (m > 0).astype(np.int64)
    else:
        weights = np.zeros((len(rows), len(cols)), dtype=np.int64)
        occupied = np.flatnonzero((n.sum(axis=1) > 0) & (m.sum(axis=1) > 0))
        step = max(1, _MIN_CHUNK_ENTRIES // max(1, len(rows) * len(cols)))
        for start in range(0, len(occupied), step):
            idx = occupied[start:start + step]
            weights += np.minimum(n[idx][:, :, None], m[idx][:, None, :]).sum(axis=0)
    return ContingencyTable(rows, cols, weights.astype(np.float64), mode)


def entropy(marginal) -> float:
    """Shannon entropy in nats of a probability vector (0 log 0 = 0)."""
    p = np.asarray(marginal, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise CategoryError("entropy needs a non-empty 1-D probability vector")
    if (p < 0).any() or abs(math.fsum(p) - 1.0) > 1e-9:
        raise CategoryError("entropy needs non-negative probabilities summing to 1")
    nz = p[p > 0]
    return -math.fsum(nz * np.log(nz))


def mutual_information(table, form: str = "probability") -> float:
    """Mutual information in nats of the joint distribution given by a table.

    ``form='probability'`` evaluates P(i,j) log(P(i,j) / (P(i) P'(j)));
    ``form='cardinality'`` evaluates the equivalent count form
    n_ij/N log(N n_ij / (n_i n_j)).
    """
    table = _as_table(table)
    w = table.weights
    total = table.total
    if total <= 0:
        raise CategoryError("mutual information of an empty table")
    rows, cols = table.row_marginal, table.col_marginal
    i, j = np.nonzero(w)
    nij = w[i, j]
    if form == "probability":
        pij = nij / total
        terms = pij * np.log(pij / ((rows[i] / total) * (cols[j] / total)))
    elif form == "cardinality":
        terms = nij / total * np.log(total * nij / (rows[i] * cols[j]))
    else:
        raise ValueError(f"unknown form {form!r}")
    return math.fsum(terms)


def normalized_mutual_information(table) -> float:
    """MI divided by the geometric mean of the two marginal entropies.

    Defined as 0 when either marginal is concentrated on one category.
    """
    table = _as_table(table)
    total = table.total
    if total <= 0:
        raise CategoryError("normalized mutual information of an empty table")
    hu = entropy(table.row_marginal / total)
    hv = entropy(table.col_marginal / total)
    if hu <= 0 or hv <= 0:
        return 0.0
    score = mutual_information(table) / math.sqrt(hu * hv)
    return min(1.0, max(0.0, score))


def collapse(table: ContingencyTable, i: int, j: int) -> np.ndarray:
    """2x2 table {(i, j), (i, not j), (not i, j), (not i, not j)}."""
    w = table.weights
    a = w[i, j]
    row = math.fsum(w[i])
    col = math.fsum(w[:, j])
    d = max(0.0, table.total - row - col + a)
    return np.array([[a, row - a], [col - a, d]])


@dataclass(frozen=True)
class RelevanceMatrix:
    rows: tuple
    cols: tuple
    scores: np.ndarray
    mode: CooccurrenceMode
    empty_rows: tuple = ()
    empty_cols: tuple = ()

    def argmax(self) -> tuple:
        i, j = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return self.rows[i], self.cols[j]

    def score(self, row: str, col: str) -> float:
        return float(self.scores[self.rows.index(row), self.cols.index(col)])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "rows": list(self.rows),
            "cols": list(self.cols),
            "scores": [[float(v) for v in r] for r in self.scores],
            "empty_rows": list(self.empty_rows),
            "empty_cols": list(self.empty_cols),
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["row_category", "col_category", "nmi"])
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                writer.writerow([r, c, repr(float(self.scores[i, j]))])
        return out.getvalue()


def matrix_from_table(table: ContingencyTable) -> RelevanceMatrix:
    if table.empty:
        raise CategoryError("no co-occurring events in any cell")
    scores = np.zeros(table.weights.shape)
    for i in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            scores[i, j] = normalized_mutual_information(collapse(table, i, j))
    empty_rows = tuple(l for l, s in zip(table.row_labels, table.row_marginal) if s == 0)
    empty_cols = tuple(l for l, s in zip(table.col_labels, table.col_marginal) if s == 0)
    return RelevanceMatrix(table.row_labels, table.col_labels, scores, table.mode, empty_rows, empty_cols)


def relevance_matrix(
    dataset: EventDataset,
    row_source=SourceChannel.MOBILE_DEVICE,
    col_source=SourceChannel.HOTLINE,
    mode=CooccurrenceMode.PAIR_PRODUCT,
    row_categories: Optional[Sequence[str]] = None,
    col_categories: Optional[Sequence[str]] = None,
) -> RelevanceMatrix:
    """Per-pair NMI of the collapsed 2x2 co-occurrence tables."""
    table = cooccurrence_table(dataset, row_source, col_source, mode, row_categories, col_categories)
    return matrix_from_table(table)
