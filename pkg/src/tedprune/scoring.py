"""Sample importance: mask-gradient scores, Polyak averaging and selection.

The instant score of sample ``k`` is the magnitude of the first-order change
in the full-data loss when the weight ``delta_k`` of that sample inside one
gradient step is perturbed::

    d L(D, theta - eta * sum_i delta_i g_i) / d delta_k = -eta <grad L(D, .), g_k>

so it reduces to ``eta * |<reference_grad, sample_grad>|``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset, PruneState, retained_count
from .model import ModelSpec, mean_loss, per_sample_grads, grad_batch

FRESH = np.inf  # score of a sample that has never been scored


def ted_instant_score(sample_grad, reference_grad, eta: float) -> float:
    sample_grad = np.asarray(sample_grad, dtype=np.float64)
    reference_grad = np.asarray(reference_grad, dtype=np.float64)
    if sample_grad.shape != reference_grad.shape:
        raise ValueError("gradient dimensions differ")
    if not eta > 0:
        raise ValueError("eta must be positive")
    return float(eta * abs(reference_grad @ sample_grad))


def ted_instant_scores(sample_grads: np.ndarray, reference_grad: np.ndarray, eta: float) -> np.ndarray:
    """Row-wise :func:`ted_instant_score` for a (batch, P) gradient matrix."""
    if sample_grads.shape[1] != reference_grad.shape[0]:
        raise ValueError("gradient dimensions differ")
    return eta * np.abs(sample_grads @ reference_grad)


def polyak_update(prev: float, instant: float, alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    return alpha * prev + (1.0 - alpha) * instant


def loss_baseline_score(loss: float) -> float:
    if loss < 0:
        raise ValueError("loss must be non-negative")
    return loss


@dataclass
class ScoreTable:
    """Polyak-averaged scores aligned with a dataset's id order."""

    ids: np.ndarray
    score: np.ndarray
    last_updated: np.ndarray
    alpha: float = 0.9
    _pos: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        self.last_updated = np.asarray(self.last_updated, dtype=np.int64)
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    @classmethod
    def fresh(cls, ids, alpha: float = 0.9) -> "ScoreTable":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.full(ids.size, FRESH), np.full(ids.size, -1), alpha)

    @property
    def n(self) -> int:
        return int(self.ids.size)

    def positions(self, ids) -> np.ndarray:
        return np.fromiter((self._pos[int(i)] for i in ids), dtype=np.int64)

    def update(self, positions, instant, epoch: int) -> None:
        """Polyak-average ``instant`` into the given rows; a fresh row takes the value as is."""
        positions = np.asarray(positions, dtype=np.int64)
        instant = np.asarray(instant, dtype=np.float64)
        prev = self.score[positions]
        seen = self.last_updated[positions] >= 0
        new = np.where(seen, self.alpha * np.where(seen, prev, 0.0) + (1.0 - self.alpha) * instant, instant)
        self.score[positions] = new
        self.last_updated[positions] = epoch

    def copy(self) -> "ScoreTable":
        return ScoreTable(self.ids.copy(), self.score.copy(), self.last_updated.copy(), self.alpha)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "score", "last_updated_epoch"])
            for i, s, e in zip(self.ids, self.score, self.last_updated):
                w.writerow([int(i), repr(float(s)), int(e)])

    @classmethod
    def from_csv(cls, path, alpha: float = 0.9) -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["id"]) for r in rows], [float(r["score"]) for r in rows],
                   [int(r["last_updated_epoch"]) for r in rows], alpha)


def select_retained(table: ScoreTable, keep_ratio: float, reverse: bool = False) -> PruneState:
    """Keep the top ``round(r*n)`` scores (bottom when ``reverse``); ties go to the lower id."""
    if table.n == 0:
        raise DataError("empty score table")
    if not 0.0 < keep_ratio <= 1.0:
        raise DataError("keep ratio must lie in (0, 1]")
    k = retained_count(keep_ratio, table.n)
    key = table.score if reverse else -table.score
    order = np.lexsort((table.ids, key))
    return PruneState.from_retained(table.ids, table.ids[order[:k]], keep_ratio)


def random_state(ids, keep_ratio: float, rng: np.random.Generator) -> PruneState:
    ids = np.asarray(ids, dtype=np.int64)
    k = retained_count(keep_ratio, ids.size)
    return PruneState.from_retained(ids, rng.choice(ids, size=k, replace=False), keep_ratio)


# --- one-step mask machinery -------------------------------------------------

def _masked_step(spec, X, y, params, eta, batch, k_local, delta, G=None):
    """theta' = theta - eta/|B| * sum_{i in B} delta_i g_i with delta_i = 1 except sample k."""
    if G is None:
        G = per_sample_grads(spec, params, X[batch], y[batch])
    weights = np.ones(len(batch))
    weights[k_local] = delta
    return params - eta / len(batch) * (weights @ G)


def mask_gradient_direct(spec: ModelSpec, dataset: Dataset, sample_id: int, params,
                         lam: float, eta: float = 0.1, batch_ids=None) -> float:
    """``|(L(delta_k=1) - L(delta_k=1+lam)) / lam|`` through one explicit step.

    The step runs on ``batch_ids`` (default: the whole dataset) and the loss is
    always evaluated on the full dataset.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    X, y = dataset.X, dataset.y
    batch = dataset.positions(dataset.ids if batch_ids is None else batch_ids)
    hits = np.flatnonzero(dataset.ids[batch] == sample_id)
    if hits.size != 1:
        raise DataError(f"sample {sample_id} is not in the step batch")
    G = per_sample_grads(spec, params, X[batch], y[batch])
    base = mean_loss(spec, _masked_step(spec, X, y, params, eta, batch, hits[0], 1.0, G), X, y)
    bumped = mean_loss(spec, _masked_step(spec, X, y, params, eta, batch, hits[0], 1.0 + lam, G), X, y)
    if not np.isfinite(base) or not np.isfinite(bumped):
        raise FloatingPointError("non-finite loss in mask perturbation")
    return abs((base - bumped) / lam)


def one_step_scores(spec: ModelSpec, dataset: Dataset, params, eta: float = 0.1, batch_ids=None) -> dict:
    """Analytic scores, direct one-step loss changes and ids for every sample of a step batch.

    ``score`` is :func:`ted_instant_score` with the post-step full-data
    gradient as reference and the per-sample step ``eta/|B|``;
    ``loss_change`` is the exact ``L(delta_k=0) - L(delta_k=1)``.
    """
    X, y = dataset.X, dataset.y
    batch = dataset.positions(dataset.ids if batch_ids is None else batch_ids)
    G = per_sample_grads(spec, params, X[batch], y[batch])
    stepped = _masked_step(spec, X, y, params, eta, batch, 0, 1.0, G)
    ref = grad_batch(spec, stepped, X, y)
    base = mean_loss(spec, stepped, X, y)
    eff = eta / len(batch)
    scores = ted_instant_scores(G, ref, eff)
    change = np.array([
        mean_loss(spec, stepped + eff * G[j], X, y) - base for j in range(len(batch))
    ])
    return {"ids": dataset.ids[batch].copy(), "score": scores, "loss_change": change}


def expected_batch_reference(G: np.ndarray, k: int, batch_size: int) -> np.ndarray:
    """E[mean gradient of a random size-B batch | the batch contains sample k]."""
    n = G.shape[0]
    if not 1 <= batch_size <= n:
        raise ValueError("batch size must lie in [1, n]")
    if n == 1:
        return G[0].copy()
    others = (G.sum(axis=0) - G[k]) / (n - 1)
    return (G[k] + (batch_size - 1) * others) / batch_size
