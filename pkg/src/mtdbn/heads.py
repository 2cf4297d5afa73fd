"""Typed supervised outputs on top of the shared representation.

Every head scores the top-level features affinely, ``g = bias + V f``.
Unstructured kinds (regression, logistic, poisson) have one output row;
structured kinds (multiclass, ranking, multilabel) have one row per label
and score a target as a sequence of softmax choices, each over a candidate
subset of the labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ContractError
from .metrics import best_threshold
from .rbm import sigmoid

__all__ = [
    "KINDS",
    "STRUCTURED",
    "TaskHead",
    "head_score",
    "loss_regression",
    "loss_logistic",
    "loss_poisson",
    "loss_poisson_full",
    "structured_prob",
    "candidate_sets",
    "loss_structured",
    "head_loss",
    "head_loss_grad",
    "batch_loss_grad",
    "normalize_target",
    "label_probabilities",
    "calibrate_threshold",
    "predict",
]

UNSTRUCTURED = ("regression", "logistic", "poisson")
STRUCTURED = ("multiclass", "ranking", "multilabel")
KINDS = UNSTRUCTURED + STRUCTURED


@dataclass
class TaskHead:
    name: str
    kind: str
    V: np.ndarray
    bias: np.ndarray
    label_names: list = field(default_factory=list)
    threshold: float | None = None
    weight: float = 1.0
    auxiliary: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown head kind {self.kind!r}")
        self.V = np.array(self.V, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        self.label_names = [str(x) for x in self.label_names]
        rows = self.V.shape[0]
        if self.bias.shape != (rows,):
            raise ContractError(f"head {self.name!r}: bias length {self.bias.size} != {rows} rows")
        if self.kind in STRUCTURED:
            if rows < 2 or len(self.label_names) != rows:
                raise ContractError(f"head {self.name!r}: structured heads need >= 2 named labels")
            if len(set(self.label_names)) != rows:
                raise ContractError(f"head {self.name!r}: duplicate label names")
        elif rows != 1:
            raise ContractError(f"head {self.name!r}: {self.kind} heads have exactly one output row")
        if self.threshold is not None and self.kind != "multilabel":
            raise ContractError("only multilabel heads carry a threshold")
        if not self.weight > 0:
            raise ContractError("task weight must be positive")

    @classmethod
    def create(cls, name, kind, n_features, labels=(), rng=None, scale=0.01,
               weight=1.0, auxiliary=False) -> "TaskHead":
        rows = len(labels) if kind in STRUCTURED else 1
        rng = rng if rng is not None else np.random.default_rng(0)
        V = rng.normal(0.0, scale, size=(rows, n_features))
        return cls(name, kind, V, np.zeros(rows), list(labels), None, weight, auxiliary)

    @property
    def n_features(self) -> int:
        return self.V.shape[1]

    @property
    def width(self) -> int:
        return self.V.shape[0]

    def label_index(self, label) -> int:
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if not 0 <= label < self.width:
                raise ContractError(f"label index {label} out of range for {self.name!r}")
            return int(label)
        try:
            return self.label_names.index(str(label))
        except ValueError:
            raise ContractError(f"unknown label {label!r} for head {self.name!r}") from None

    def copy(self) -> "TaskHead":
        return TaskHead(self.name, self.kind, self.V.copy(), self.bias.copy(),
                        list(self.label_names), self.threshold, self.weight, self.auxiliary)


def head_score(head: TaskHead, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != head.n_features:
        raise ContractError(f"head {head.name!r} expects {head.n_features} features, got {f.shape[-1]}")
    return f @ head.V.T + head.bias


# -- unstructured losses -----------------------------------------------------

def loss_regression(y, g):
    return 0.5 * (np.asarray(y, dtype=np.float64) - g) ** 2


def loss_logistic(y, g):
    return np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * g)


def loss_poisson(y, g):
    """Trainable part of the Poisson NLL with rate ``exp(g)``: ``exp(g) - y g``."""
    return np.exp(g) - np.asarray(y, dtype=np.float64) * g


def loss_poisson_full(y, g):
    y = np.asarray(y, dtype=np.float64)
    return loss_poisson(y, g) + np.vectorize(math.lgamma)(y + 1.0)


# -- structured ----------------------------------------------------------------

def _log_softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max()
    return scores - (m + math.log(np.exp(scores - m).sum()))


def candidate_sets(kind, target, labels):
    """Sequence of ``(chosen label, candidate labels)`` choices for a target.

    ``labels`` is the ordered label universe; candidates keep that order.
    """
    labels = list(labels)
    if kind == "multiclass":
        if target not in labels:
            raise ContractError(f"unknown label {target!r}")
        return [(target, list(labels))]
    target = list(target)
    missing = [t for t in target if t not in labels]
    if missing:
        raise ContractError(f"unknown labels {missing!r}")
    if len(set(target)) != len(target):
        raise ContractError("duplicate labels in target")
    if kind == "ranking":
        out, remaining = [], list(labels)
        for t in target:
            out.append((t, list(remaining)))
            remaining.remove(t)
        return out
    if kind == "multilabel":
        return [(t, list(labels)) for t in target]
    raise ContractError(f"{kind!r} is not a structured kind")


def normalize_target(head: TaskHead, target):
    """Validate a target and map label names to indices for structured kinds."""
    kind = head.kind
    if kind == "regression":
        y = float(target)
        if not math.isfinite(y):
            raise ContractError("regression target must be finite")
        return y
    if kind == "logistic":
        if target not in (-1, 1):
            raise ContractError(f"logistic target must be -1 or +1, got {target!r}")
        return int(target)
    if kind == "poisson":
        if int(target) != target or target < 0:
            raise ContractError(f"poisson target must be a non-negative integer, got {target!r}")
        return int(target)
    if kind == "multiclass":
        return head.label_index(target)
    idx = [head.label_index(t) for t in target]
    if len(set(idx)) != len(idx):
        raise ContractError(f"duplicate labels in {kind} target for {head.name!r}")
    if kind == "multilabel":
        if not idx:
            raise ContractError("multilabel target needs at least one label")
        return sorted(idx)
    return idx


def _choices(head: TaskHead, target):
    """Index-level candidate sets for an already-normalized target."""
    return candidate_sets(head.kind, target, range(head.width))


def structured_prob(head: TaskHead, f, label, candidates) -> float:
    scores = head_score(head, f)
    idx = [head.label_index(c) for c in candidates]
    l = head.label_index(label)
    if not idx or l not in idx:
        raise ContractError("label must belong to a nonempty candidate set")
    logp = _log_softmax(scores[idx])
    return float(math.exp(logp[idx.index(l)]))


def _structured_loss_grad(scores: np.ndarray, choices):
    loss = 0.0
    grad = np.zeros_like(scores)
    for l, cand in choices:
        cand = np.asarray(cand)
        logp = _log_softmax(scores[cand])
        pos = int(np.flatnonzero(cand == l)[0])
        loss -= logp[pos]
        p = np.exp(logp)
        grad[cand] += p
        grad[l] -= 1.0
    return loss, grad


def loss_structured(head: TaskHead, f, target) -> float:
    t = normalize_target(head, target)
    loss, _ = _structured_loss_grad(head_score(head, f), _choices(head, t))
    return float(loss)


# -- dispatch -------------------------------------------------------------------

def head_loss_grad(head: TaskHead, scores, target):
    """Loss of one instance and its gradient with respect to the head scores.

    ``target`` must already be normalized (see ``normalize_target``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    kind = head.kind
    if kind in STRUCTURED:
        return _structured_loss_grad(scores, _choices(head, target))
    g = scores[0]
    if kind == "regression":
        return float(loss_regression(target, g)), np.array([g - target])
    if kind == "logistic":
        return float(loss_logistic(target, g)), np.array([-target * sigmoid(-target * g)])
    return float(loss_poisson(target, g)), np.array([math.exp(g) - target])


def head_loss(head: TaskHead, f, target) -> float:
    loss, _ = head_loss_grad(head, head_score(head, f), normalize_target(head, target))
    return loss


def batch_loss_grad(head: TaskHead, scores: np.ndarray, targets):
    """Per-row losses and score gradients for a batch.

    ``targets`` holds one normalized target per row, or None where the row
    has no target for this head; such rows get zero loss and zero gradient.
    """
    n = scores.shape[0]
    losses = np.zeros(n)
    grad = np.zeros_like(scores)
    rows = [i for i, t in enumerate(targets) if t is not None]
    if not rows:
        return losses, grad
    kind = head.kind
    if kind in UNSTRUCTURED:
        y = np.array([targets[i] for i in rows], dtype=np.float64)
        g = scores[rows, 0]
        if kind == "regression":
            losses[rows] = loss_regression(y, g)
            grad[rows, 0] = g - y
        elif kind == "logistic":
            losses[rows] = loss_logistic(y, g)
            grad[rows, 0] = -y * sigmoid(-y * g)
        else:
            losses[rows] = loss_poisson(y, g)
            grad[rows, 0] = np.exp(g) - y
        return losses, grad
    if kind in ("multiclass", "multilabel"):
        # every choice is over the full label set: one softmax per row
        s = scores[rows]
        logp = s - s.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        ind = np.zeros_like(s)
        for r, i in enumerate(rows):
            ind[r, targets[i]] = 1.0
        losses[rows] = -(ind * logp).sum(axis=1)
        grad[rows] = ind.sum(axis=1, keepdims=True) * np.exp(logp) - ind
        return losses, grad
    for i in rows:
        losses[i], grad[i] = _structured_loss_grad(scores[i], _choices(head, targets[i]))
    return losses, grad


# -- prediction -------------------------------------------------------------------

def label_probabilities(head: TaskHead, f) -> np.ndarray:
    """Softmax over the full label set (rows follow ``f``)."""
    if head.kind not in STRUCTURED:
        raise ContractError(f"{head.kind} heads have no label distribution")
    s = head_score(head, f)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def calibrate_threshold(head: TaskHead, features, targets) -> float:
    """Fit the scalar multilabel threshold on a calibration set.

    Rows whose target is None are skipped. Sets and returns ``head.threshold``.
    """
    if head.kind != "multilabel":
        raise ContractError("threshold calibration applies to multilabel heads only")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    keep = [i for i, t in enumerate(targets) if t is not None]
    if not keep:
        raise CalibrationError(f"no calibration targets for head {head.name!r}")
    truth = np.zeros((len(keep), head.width), dtype=bool)
    for r, i in enumerate(keep):
        truth[r, normalize_target(head, targets[i])] = True
    probs = label_probabilities(head, features[keep])
    tau, _ = best_threshold(probs, truth)
    head.threshold = tau
    return tau


def predict(head: TaskHead, f) -> dict:
    """Kind-specific prediction payload for one feature vector."""
    scores = head_score(head, np.asarray(f, dtype=np.float64).reshape(-1))
    kind = head.kind
    if kind == "regression":
        return {"value": float(scores[0])}
    if kind == "poisson":
        return {"value": float(scores[0]), "rate": math.exp(scores[0])}
    if kind == "logistic":
        g = float(scores[0])
        return {"label": 1 if g >= 0 else -1, "probability": sigmoid(g)}
    if kind == "multiclass":
        return {"label": head.label_names[int(np.argmax(scores))]}
    if kind == "ranking":
        order = np.argsort(-scores, kind="stable")
        return {"ranking": [head.label_names[i] for i in order]}
    if head.threshold is None:
        raise CalibrationError(f"multilabel head {head.name!r} has no calibrated threshold")
    probs = _probs(scores)
    return {"labels": [head.label_names[i] for i in np.flatnonzero(probs >= head.threshold)]}


def _probs(scores):
    e = np.exp(scores - scores.max())
    return e / e.sum()
