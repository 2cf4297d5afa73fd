"""Retrieval and multilabel evaluation.

Retrieval follows a leave-one-out protocol over a single pool: every item
queries all the others by cosine similarity. A retrieved item is relevant
when it shares at least one concept label with the query.

By default ``average_precision`` divides by the cutoff ``T`` and NDCG is
normalized by the all-relevant ideal, which is how the model was originally
evaluated. ``conventional=True`` / ``ideal="achievable"`` switch to the
usual IR definitions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CalibrationError, ContractError

__all__ = [
    "RelevanceJudge",
    "EvalReport",
    "cosine_similarity",
    "cosine_matrix",
    "retrieve",
    "average_precision",
    "ndcg_at",
    "map_at",
    "retrieval_report",
    "per_label_counts",
    "multilabel_metrics",
    "threshold_grid",
    "macro_f1_scan",
    "best_threshold",
    "concat_baseline_embed",
    "knn_label_probabilities",
    "knn_multilabel",
    "sets_to_indicator",
]


class RelevanceJudge:
    """Binary relevance: two items are relevant iff they share a label."""

    def __init__(self, label_sets):
        self.label_sets = [frozenset(s) for s in label_sets]
        universe = sorted({x for s in self.label_sets for x in s}, key=str)
        index = {x: i for i, x in enumerate(universe)}
        ind = np.zeros((len(self.label_sets), len(universe)), dtype=np.float64)
        for r, s in enumerate(self.label_sets):
            for x in s:
                ind[r, index[x]] = 1.0
        self._shared = ind @ ind.T

    def __len__(self):
        return len(self.label_sets)

    def relevant(self, q: int, d: int) -> bool:
        return bool(self._shared[q, d] >= 1)

    def relevance_row(self, q: int) -> np.ndarray:
        return (self._shared[q] >= 1).astype(np.int8)

    @classmethod
    def everything_relevant(cls, n: int) -> "RelevanceJudge":
        return cls([{0}] * n)


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def cosine_matrix(queries, corpus) -> np.ndarray:
    q = _unit_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    c = _unit_rows(np.atleast_2d(np.asarray(corpus, dtype=np.float64)))
    return q @ c.T


def _rank(scores: np.ndarray, exclude: int | None, T: int) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")  # stable -> ties by ascending index
    if exclude is not None:
        order = order[order != exclude]
    return order[:T]


def retrieve(query, corpus, T: int, query_index: int | None = None) -> np.ndarray:
    """Indices of the top-``T`` corpus rows by descending cosine similarity.

    ``query_index`` is the query's own row in ``corpus`` and is never returned.
    """
    sims = cosine_matrix(query, corpus)[0]
    return _rank(sims, query_index, T)


def average_precision(rel, T: int | None = None, conventional: bool = False) -> float:
    """Mean of Precision(n) over n = 1..T.

    With ``conventional=True`` precision is only accumulated at relevant
    positions and divided by the number of relevant items in the prefix.
    """
    rel = np.asarray(rel, dtype=np.float64)
    T = len(rel) if T is None else T
    if T <= 0:
        raise ContractError("cutoff T must be positive")
    r = np.zeros(T)
    r[:min(T, len(rel))] = rel[:T]
    precision = np.cumsum(r) / np.arange(1, T + 1)
    if conventional:
        hits = r.sum()
        return float((precision * r).sum() / hits) if hits else 0.0
    return float(precision.sum() / T)


def ndcg_at(rel, T: int = 10, ideal: str = "all", n_relevant: int | None = None) -> float:
    """DCG@T over binary relevance, normalized by an ideal DCG.

    ``ideal="all"`` uses the all-T-relevant maximum; ``"achievable"`` uses the
    best ordering of ``n_relevant`` relevant items (default: those in ``rel``).
    """
    rel = np.asarray(rel, dtype=np.float64)
    if T <= 0:
        raise ContractError("cutoff T must be positive")
    r = np.zeros(T)
    r[:min(T, len(rel))] = rel[:T]
    discounts = 1.0 / np.log2(np.arange(2, T + 2))
    dcg = float(r @ discounts)
    if ideal == "all":
        best = float(discounts.sum())
    elif ideal == "achievable":
        if n_relevant is None:
            n_relevant = np.count_nonzero(rel)
        n_rel = int(min(T, n_relevant))
        best = float(discounts[:n_rel].sum())
    else:
        raise ContractError(f"unknown ideal {ideal!r}")
    return dcg / best if best > 0 else 0.0


def _relevance_lists(embeddings, judge: RelevanceJudge, T: int, queries=None):
    emb = np.asarray(embeddings, dtype=np.float64)
    if len(judge) != emb.shape[0]:
        raise ContractError("judge and embeddings disagree on the number of items")
    sims = cosine_matrix(emb, emb)
    qs = range(emb.shape[0]) if queries is None else queries
    rels, totals = [], []
    for q in qs:
        row = judge.relevance_row(q)
        top = _rank(sims[q], q, T)
        rels.append(row[top])
        totals.append(int(row.sum()) - int(row[q]))
    return rels, totals


def map_at(embeddings, judge: RelevanceJudge, T: int = 100, queries=None,
           conventional: bool = False) -> float:
    """MAP@T with every item (or each of ``queries``) querying the rest."""
    rels, _ = _relevance_lists(embeddings, judge, T, queries)
    return float(np.mean([average_precision(r, T, conventional) for r in rels]))


@dataclass
class EvalReport:
    map_at_T: float | None = None
    ndcg_at_T: float | None = None
    recall: float | None = None
    precision: float | None = None
    macro_f1: float | None = None
    metadata: dict = field(default_factory=dict)
    per_query: list = field(default_factory=list)

    def to_json(self, include_queries: bool = False) -> str:
        d = asdict(self)
        if not include_queries:
            d.pop("per_query")
        return json.dumps(d, indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = []
        T_map = self.metadata.get("T_map", "T")
        T_ndcg = self.metadata.get("T_ndcg", "T")
        for key, label in (("map_at_T", f"MAP@{T_map}"), ("ndcg_at_T", f"NDCG@{T_ndcg}"),
                           ("recall", "Recall"), ("precision", "Precision"),
                           ("macro_f1", "Macro-F1")):
            val = getattr(self, key)
            if val is not None:
                rows.append((label, f"{val:.4f}"))
        width = max((len(r[0]) for r in rows), default=0)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)

    def per_query_csv(self) -> str:
        lines = ["query,ap,ndcg"]
        lines += [f"{q['query']},{q['ap']!r},{q['ndcg']!r}" for q in self.per_query]
        return "\n".join(lines) + "\n"


def retrieval_report(embeddings, label_sets, T_map: int = 100, T_ndcg: int = 10,
                     conventional: bool = False, ideal: str = "all",
                     metadata: dict | None = None) -> EvalReport:
    judge = RelevanceJudge(label_sets)
    T = max(T_map, T_ndcg)
    rels, totals = _relevance_lists(embeddings, judge, T)
    per_query = []
    for q, (r, total) in enumerate(zip(rels, totals)):
        per_query.append({"query": q,
                          "ap": average_precision(r[:T_map], T_map, conventional),
                          "ndcg": ndcg_at(r[:T_ndcg], T_ndcg, ideal, total)})
    meta = {"T_map": T_map, "T_ndcg": T_ndcg, "Q": len(rels)}
    meta.update(metadata or {})
    return EvalReport(map_at_T=float(np.mean([p["ap"] for p in per_query])),
                      ndcg_at_T=float(np.mean([p["ndcg"] for p in per_query])),
                      metadata=meta, per_query=per_query)


# -- multilabel ---------------------------------------------------------------

def sets_to_indicator(sets, n_labels: int) -> np.ndarray:
    out = np.zeros((len(sets), n_labels), dtype=bool)
    for r, s in enumerate(sets):
        for l in s:
            out[r, l] = True
    return out


def per_label_counts(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    return tp, pred.sum(axis=0).astype(np.float64), truth.sum(axis=0).astype(np.float64)


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def multilabel_metrics(predicted, truth, n_labels: int | None = None):
    """Macro-averaged (recall, precision, F1) over labels.

    Inputs are boolean indicator matrices or lists of label-index sets. A
    label with no true positives scores 0 on every measure.
    """
    if not isinstance(predicted, np.ndarray) or predicted.dtype != bool:
        if n_labels is None:
            n_labels = 1 + max((l for s in list(predicted) + list(truth) for l in s), default=-1)
        predicted = sets_to_indicator(predicted, n_labels)
        truth = sets_to_indicator(truth, n_labels)
    tp, n_pred, n_true = per_label_counts(predicted, truth)
    if tp.size == 0:
        return 0.0, 0.0, 0.0
    recall = _safe_div(tp, n_true)
    precision = _safe_div(tp, n_pred)
    f1 = _safe_div(2 * tp, n_pred + n_true)
    return float(recall.mean()), float(precision.mean()), float(f1.mean())


def threshold_grid(probs) -> np.ndarray:
    """Distinct observed probabilities plus midpoints between neighbours."""
    vals = np.unique(np.asarray(probs, dtype=np.float64).ravel())
    mids = (vals[:-1] + vals[1:]) / 2.0
    return np.unique(np.concatenate([vals, mids]))


def macro_f1_scan(probs, truth, grid) -> np.ndarray:
    """Macro-F1 of the rule ``probs >= tau`` for every ``tau`` in ``grid``.

    Uses per-label sorted sweeps, so cost is O(labels * (n + grid) log n).
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    grid = np.asarray(grid, dtype=np.float64)
    n_labels = probs.shape[1]
    total = np.zeros(grid.shape[0])
    for l in range(n_labels):
        p = np.sort(probs[:, l])
        pos = np.sort(probs[truth[:, l], l])
        n_pred = p.size - np.searchsorted(p, grid, side="left")
        tp = pos.size - np.searchsorted(pos, grid, side="left")
        den = n_pred + pos.size
        total += np.divide(2.0 * tp, den, out=np.zeros(grid.shape[0]), where=den > 0)
    return total / max(n_labels, 1)


def best_threshold(probs, truth):
    """Grid threshold maximizing macro-F1; ties go to the larger threshold.

    Returns ``(tau, f1)``.
    """
    truth = np.asarray(truth, dtype=bool)
    if truth.ndim != 2 or truth.shape[0] == 0 or not truth.any():
        raise CalibrationError("threshold calibration needs at least one positive label")
    grid = threshold_grid(probs)
    scores = macro_f1_scan(probs, truth, grid)
    best = scores.max()
    i = np.flatnonzero(scores >= best - 1e-12)[-1]
    return float(grid[i]), float(scores[i])


# -- baselines ----------------------------------------------------------------

def concat_baseline_embed(views) -> np.ndarray:
    """Scale each view's rows to unit L2 norm, then concatenate the views."""
    blocks = [_unit_rows(np.atleast_2d(np.asarray(v, dtype=np.float64))) for v in views]
    if not blocks:
        raise ContractError("no views to concatenate")
    if len({b.shape[0] for b in blocks}) != 1:
        raise ContractError("views disagree on the number of rows")
    return np.hstack(blocks)


def knn_label_probabilities(train_emb, train_labels, test_emb, k: int = 30,
                            exclude_self: bool = False) -> np.ndarray:
    """Fraction of the k cosine-nearest training rows carrying each label."""
    train_labels = np.asarray(train_labels, dtype=np.float64)
    sims = cosine_matrix(test_emb, train_emb)
    k = min(k, train_labels.shape[0] - (1 if exclude_self else 0))
    if k < 1:
        raise ContractError("k-NN needs at least one neighbour")
    out = np.empty((sims.shape[0], train_labels.shape[1]))
    for r in range(sims.shape[0]):
        nn = _rank(sims[r], r if exclude_self else None, k)
        out[r] = train_labels[nn].mean(axis=0)
    return out


def knn_multilabel(train_emb, train_labels, test_emb, k: int = 30, threshold: float | None = None):
    """k-NN multilabel prediction with a macro-F1-calibrated threshold.

    When ``threshold`` is None it is fitted on leave-one-out neighbour
    probabilities of the training rows. Returns ``(predicted, probs, tau)``
    where ``predicted`` is a boolean indicator matrix.
    """
    train_labels = np.asarray(train_labels, dtype=bool)
    if threshold is None:
        loo = knn_label_probabilities(train_emb, train_labels, train_emb, k, exclude_self=True)
        threshold, _ = best_threshold(loo, train_labels)
    probs = knn_label_probabilities(train_emb, train_labels, test_emb, k)
    return probs >= threshold, probs, threshold

