"""Supervised fine-tuning of a pretrained stack against typed task heads.

The stack and every head form one feedforward network. The objective is the
task-weighted sum of head losses; an instance without a target for some head
contributes nothing to that head, which is how auxiliary tasks that exist
only at training time are handled.

Trainable groups, keyed by name:

    view/<name>/W, view/<name>/b   bottom layer of each view
    joint/W, joint/b               top layer
    head/<name>/V, head/<name>/bias

Visible biases never influence the feedforward map, so they are not trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError
from .heads import batch_loss_grad, head_score, normalize_target
from .rbm import WEIGHT_LIMIT, hidden_posterior
from .stack import DeepNet, _aligned_views

__all__ = [
    "FinetuneConfig",
    "GradientBundle",
    "GradientCheckReport",
    "parameter_groups",
    "prepare_targets",
    "objective",
    "total_loss",
    "backward",
    "finetune",
    "trace_to_csv",
]


@dataclass(frozen=True)
class FinetuneConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.1  # sgd step size; cg initial line-search step
    momentum: float = 0.9
    minibatch_size: int = 100
    epochs: int = 50
    task_weights: dict = field(default_factory=dict)
    rng_seed: int = 0
    cg_restart: int = 20

    def __post_init__(self):
        if self.optimizer not in ("sgd", "cg"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ContractError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.minibatch_size < 1 or self.epochs < 0 or self.cg_restart < 1:
            raise ContractError("minibatch_size and cg_restart must be >= 1, epochs >= 0")
        if any(not w > 0 for w in self.task_weights.values()):
            raise ContractError("task weights must be positive")


class GradientBundle(dict):
    """Mapping from parameter-group name to a gradient array."""

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.values()]) if self else np.zeros(0)

    def dot(self, other: "GradientBundle") -> float:
        return float(sum(np.vdot(self[k], other[k]) for k in self))

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle({k: c * v for k, v in self.items()})


def parameter_groups(net: DeepNet) -> dict:
    """Live references to every trainable array of ``net``, in a fixed order."""
    groups = {}
    for spec, p in net.views:
        groups[f"view/{spec.name}/W"] = p.W
        groups[f"view/{spec.name}/b"] = p.b
    groups["joint/W"] = net.joint.W
    groups["joint/b"] = net.joint.b
    for h in net.heads:
        groups[f"head/{h.name}/V"] = h.V
        groups[f"head/{h.name}/bias"] = h.bias
    return groups


def prepare_targets(net: DeepNet, targets, n_rows: int) -> dict:
    """Normalize per-head target columns; absent heads/rows become None."""
    out = {}
    for h in net.heads:
        col = (targets or {}).get(h.name)
        if col is None:
            out[h.name] = [None] * n_rows
            continue
        col = list(col)
        if len(col) != n_rows:
            raise ContractError(f"head {h.name!r}: {len(col)} targets for {n_rows} rows")
        out[h.name] = [None if t is None else normalize_target(h, t) for t in col]
    unknown = set(targets or {}) - {h.name for h in net.heads}
    if unknown:
        raise ContractError(f"targets for unknown heads: {sorted(unknown)}")
    return out


def _as_batch(net: DeepNet, instance, targets):
    """Accept a single instance (1-D views, scalar targets) or a batch."""
    single = all(np.ndim(instance.get(n, [])) == 1 for n in net.view_names)
    if single:
        instance = {k: np.asarray(v, dtype=np.float64)[None, :] for k, v in instance.items()}
        targets = {k: [v] for k, v in (targets or {}).items()}
    mats = _aligned_views(instance, net.specs)
    return mats, prepare_targets(net, targets, mats[0].shape[0])


def objective(net: DeepNet, mats, prepared, weights=None, with_grad=True):
    """Summed weighted loss over rows, per-head sums, and (optionally) gradients."""
    weights = weights or {}
    hidden = [hidden_posterior(p, x) for (_, p), x in zip(net.views, mats)]
    H = np.hstack(hidden)
    f = hidden_posterior(net.joint, H)
    total = 0.0
    per_head = {}
    grads = GradientBundle()
    df = np.zeros_like(f)
    head_grads = {}
    for h in net.heads:
        w = weights.get(h.name, h.weight)
        losses, dS = batch_loss_grad(h, head_score(h, f), prepared[h.name])
        per_head[h.name] = float(losses.sum())
        total += w * per_head[h.name]
        if with_grad:
            dS = w * dS
            head_grads[h.name] = (dS.T @ f, dS.sum(axis=0))
            df += dS @ h.V
    if not with_grad:
        return total, per_head, None

    dz2 = df * f * (1.0 - f)
    dH = dz2 @ net.joint.W.T
    start = 0
    for (spec, p), x, hs in zip(net.views, mats, hidden):
        dz1 = dH[:, start:start + spec.hidden] * hs * (1.0 - hs)
        start += spec.hidden
        grads[f"view/{spec.name}/W"] = x.T @ dz1
        grads[f"view/{spec.name}/b"] = dz1.sum(axis=0)
    grads["joint/W"] = H.T @ dz2
    grads["joint/b"] = dz2.sum(axis=0)
    for h in net.heads:
        grads[f"head/{h.name}/V"], grads[f"head/{h.name}/bias"] = head_grads[h.name]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", group=name)
    return total, per_head, grads


def total_loss(net: DeepNet, instance, targets=None) -> float:
    """Weighted sum of head losses (summed over rows for a batch)."""
    mats, prepared = _as_batch(net, instance, targets)
    return objective(net, mats, prepared, with_grad=False)[0]


def backward(net: DeepNet, instance, targets=None) -> GradientBundle:
    """Exact gradient of ``total_loss`` for every trainable group."""
    mats, prepared = _as_batch(net, instance, targets)
    return objective(net, mats, prepared)[2]


@dataclass
class GradientCheckReport:
    errors: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def flagged(self) -> list:
        return [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


# -- optimization ------------------------------------------------------------------

def _check_params(groups: dict, epoch: int):
    for name, arr in groups.items():
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("non-finite parameters", epoch=epoch, group=name)
        if name.endswith("/W") and np.max(np.abs(arr), initial=0.0) > WEIGHT_LIMIT:
            raise DivergenceError(f"|W| exceeded {WEIGHT_LIMIT:g}", epoch=epoch, group=name)


def _mean_loss(net, mats, prepared, weights, n):
    total, per_head, _ = objective(net, mats, prepared, weights, with_grad=False)
    return total / n, {k: v / n for k, v in per_head.items()}


def _rows(mats, prepared, idx):
    return [x[idx] for x in mats], {k: [col[i] for i in idx] for k, col in prepared.items()}


def finetune(net: DeepNet, data, targets, cfg: FinetuneConfig, cold_start: bool = False):
    """Discriminatively refine every layer; returns ``(net, trace)``.

    ``data`` maps view names to matrices and ``targets`` maps head names to
    per-row target lists (None where absent). The objective is the mean
    weighted loss per instance. ``trace[e]`` is a dict with the epoch, total
    loss and per-head losses, with ``trace[0]`` recorded before training.
    """
    if not net.pretrained and not cold_start:
        raise ContractError("net is not pretrained; pass cold_start=True to train from scratch")
    if not net.heads:
        raise ContractError("fine-tuning needs at least one task head")
    net = net.copy()
    mats = _aligned_views(data, net.specs)
    n = mats[0].shape[0]
    if n == 0:
        raise ContractError("fine-tuning needs at least one instance")
    prepared = prepare_targets(net, targets, n)
    weights = {h.name: cfg.task_weights.get(h.name, h.weight) for h in net.heads}
    for h in net.heads:
        h.weight = weights[h.name]
    groups = parameter_groups(net)
    rng = np.random.default_rng(cfg.rng_seed)

    def record(epoch):
        loss, per = _mean_loss(net, mats, prepared, weights, n)
        trace.append({"epoch": epoch, "total": loss, "heads": per})

    trace = []
    record(0)
    if cfg.optimizer == "sgd":
        velocity = {k: np.zeros_like(v) for k, v in groups.items()}
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                bm, bt = _rows(mats, prepared, idx)
                _, _, g = objective(net, bm, bt, weights)
                for k, arr in groups.items():
                    velocity[k] *= cfg.momentum
                    velocity[k] -= cfg.learning_rate * g[k] / len(idx)
                    arr += velocity[k]
            _check_params(groups, epoch)
            record(epoch)
    else:
        _conjugate_gradient(net, groups, mats, prepared, weights, n, cfg, record)
    return net, trace


def _conjugate_gradient(net, groups, mats, prepared, weights, n, cfg, record):
    """Polak-Ribiere+ nonlinear CG with Armijo backtracking; one step per epoch."""

    def evaluate(with_grad=True):
        total, _, g = objective(net, mats, prepared, weights, with_grad)
        return total / n, (g.scaled(1.0 / n) if g is not None else None)

    def place(origin, direction, step):
        for k, arr in groups.items():
            np.add(origin[k], step * direction[k], out=arr)

    loss, grad = evaluate()
    direction = grad.scaled(-1.0)
    step0 = cfg.learning_rate if cfg.learning_rate > 0 else 1.0
    since_restart = 0
    for epoch in range(1, cfg.epochs + 1):
        slope = grad.dot(direction)
        if slope >= 0 or since_restart >= cfg.cg_restart:
            direction = grad.scaled(-1.0)
            slope = -grad.dot(grad)
            since_restart = 0
        moved = False
        if slope < 0 and cfg.learning_rate > 0:
            origin = {k: arr.copy() for k, arr in groups.items()}
            step = step0
            for _ in range(40):
                place(origin, direction, step)
                trial, _ = evaluate(with_grad=False)
                if np.isfinite(trial) and trial <= loss + 1e-4 * step * slope:
                    moved = True
                    break
                step *= 0.5
            if not moved:
                for k, arr in groups.items():
                    arr[...] = origin[k]
        _check_params(groups, epoch)
        if moved:
            new_loss, new_grad = evaluate()
            beta = max(0.0, new_grad.dot(GradientBundle(
                {k: new_grad[k] - grad[k] for k in grad})) / max(grad.dot(grad), 1e-300))
            direction = GradientBundle({k: -new_grad[k] + beta * direction[k] for k in grad})
            loss, grad = new_loss, new_grad
            since_restart += 1
            step0 = min(2.0 * step, 1e3)
        else:
            since_restart = cfg.cg_restart  # force a steepest-descent restart
        record(epoch)


def trace_to_csv(trace) -> str:
    heads = sorted(trace[0]["heads"]) if trace else []
    lines = [",".join(["epoch", "total"] + heads)]
    for row in trace:
        vals = [str(row["epoch"]), repr(row["total"])] + [repr(row["heads"][h]) for h in heads]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
