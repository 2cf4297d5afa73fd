"""Central finite-difference check of the fine-tuning gradient.

Two ways to evaluate the perturbed loss:

* ``precision="double"`` reuses the float64 objective. Cheap, but the
  difference quotient carries roughly ``|L| * 1e-16 / eps`` absolute noise,
  which swamps gradient entries near 1e-8 (saturated hidden units).
* ``precision="mp"`` evaluates an independent arbitrary-precision
  re-implementation of the feedforward map and every head loss (mpmath,
  50 significant digits), leaving only the O(eps^2) truncation error.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .finetune import (
    GradientBundle,
    GradientCheckReport,
    _as_batch,
    objective,
    parameter_groups,
)
from .stack import DeepNet

__all__ = ["gradient_check", "mp_total_loss"]


def _mp_sigmoid(mp, z):
    return 1 / (1 + mp.exp(-z))


def _mp_structured(mp, scores, kind, target):
    n = len(scores)
    if kind == "multiclass":
        steps = [(target, list(range(n)))]
    elif kind == "multilabel":
        steps = [(t, list(range(n))) for t in target]
    else:
        remaining = list(range(n))
        steps = []
        for t in target:
            steps.append((t, list(remaining)))
            remaining.remove(t)
    loss = mp.mpf(0)
    for chosen, cand in steps:
        loss += mp.log(mp.fsum(mp.exp(scores[c]) for c in cand)) - scores[chosen]
    return loss


def _mp_loss(mp, params, net: DeepNet, mats, prepared, weights):
    """Weighted loss summed over rows, with every parameter an mpf."""
    total = mp.mpf(0)
    for r in range(mats[0].shape[0]):
        hidden = []
        for (spec, _), x in zip(net.views, mats):
            W = params[f"view/{spec.name}/W"]
            b = params[f"view/{spec.name}/b"]
            v = [mp.mpf(float(t)) for t in x[r]]
            for m in range(spec.hidden):
                z = b[m] + mp.fsum(W[i][m] * v[i] for i in range(spec.dim) if v[i])
                hidden.append(_mp_sigmoid(mp, z))
        W2, b2 = params["joint/W"], params["joint/b"]
        f = [_mp_sigmoid(mp, b2[k] + mp.fsum(W2[j][k] * hidden[j] for j in range(len(hidden))))
             for k in range(net.n_top)]
        for h in net.heads:
            target = prepared[h.name][r]
            if target is None:
                continue
            V, c = params[f"head/{h.name}/V"], params[f"head/{h.name}/bias"]
            scores = [c[l] + mp.fsum(V[l][k] * f[k] for k in range(len(f))) for l in range(h.width)]
            if h.kind == "regression":
                loss = (mp.mpf(target) - scores[0]) ** 2 / 2
            elif h.kind == "logistic":
                loss = mp.log(1 + mp.exp(-target * scores[0]))
            elif h.kind == "poisson":
                loss = mp.exp(scores[0]) - target * scores[0]
            else:
                loss = _mp_structured(mp, scores, h.kind, target)
            total += mp.mpf(weights.get(h.name, h.weight)) * loss
    return total


def _to_mp(mp, arr):
    if arr.ndim == 1:
        return [mp.mpf(float(x)) for x in arr]
    return [[mp.mpf(float(x)) for x in row] for row in arr]


def mp_total_loss(net: DeepNet, instance, targets=None, dps: int = 50) -> float:
    """High-precision evaluation of the same objective as ``total_loss``."""
    import mpmath

    mats, prepared = _as_batch(net, instance, targets)
    with mpmath.workdps(dps):
        params = {k: _to_mp(mpmath.mp, v) for k, v in parameter_groups(net).items()}
        return float(_mp_loss(mpmath.mp, params, net, mats, prepared, {}))


def gradient_check(net: DeepNet, instance, targets=None, eps: float = 1e-6, tol: float = 1e-6,
                   analytic: GradientBundle | None = None, precision: str = "double",
                   dps: int = 50) -> GradientCheckReport:
    """Compare ``backward`` (or a supplied bundle) with central differences.

    Every parameter is perturbed by ``+-eps``; the relative error per entry
    is ``|a - n| / max(|a|, |n|, 1e-8)`` and the report keeps the maximum per
    parameter group.
    """
    if precision not in ("double", "mp"):
        raise ContractError(f"unknown precision {precision!r}")
    mats, prepared = _as_batch(net, instance, targets)
    if analytic is None:
        analytic = objective(net, mats, prepared)[2]
    errors = {}
    if precision == "double":
        probe = net.copy()
        for name, arr in parameter_groups(probe).items():
            worst = 0.0
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up = objective(probe, mats, prepared, with_grad=False)[0]
                arr[idx] = orig - eps
                down = objective(probe, mats, prepared, with_grad=False)[0]
                arr[idx] = orig
                worst = max(worst, _rel((up - down) / (2 * eps), analytic[name][idx]))
            errors[name] = worst
        return GradientCheckReport(errors, tol)

    import mpmath

    mp = mpmath.mp
    with mpmath.workdps(dps):
        params = {k: _to_mp(mp, v) for k, v in parameter_groups(net).items()}
        h = mp.mpf(eps)
        for name, arr in parameter_groups(net).items():
            worst = 0.0
            slot = params[name]
            for idx in np.ndindex(arr.shape):
                row, col = (slot, idx[0]) if arr.ndim == 1 else (slot[idx[0]], idx[1])
                orig = row[col]
                row[col] = orig + h
                up = _mp_loss(mp, params, net, mats, prepared, {})
                row[col] = orig - h
                down = _mp_loss(mp, params, net, mats, prepared, {})
                row[col] = orig
                worst = max(worst, _rel(float((up - down) / (2 * h)), analytic[name][idx]))
            errors[name] = worst
    return GradientCheckReport(errors, tol)


def _rel(numeric: float, analytic: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
