"""Small data fixtures shared across test modules."""

import numpy as np

PROTOTYPES = np.array([[1, 1, 1, 1, 0, 0, 0, 0],
                       [0, 0, 0, 0, 1, 1, 1, 1]], dtype=float)


def two_prototype_binary(n=200, flip=0.05, seed=7):
    rng = np.random.default_rng(seed)
    x = PROTOTYPES[rng.integers(0, 2, n)]
    noise = rng.random(x.shape) < flip
    return np.abs(x - noise)


def random_rbm(unit, n, k, rng, scale=1.0):
    from mtdbn.rbm import RbmParams
    return RbmParams(unit, rng.normal(0, scale, (n, k)),
                     rng.normal(0, scale, n), rng.normal(0, scale, k))


def random_visible(unit, n, rng, rows=None):
    shape = (n,) if rows is None else (rows, n)
    if unit == "binary":
        return (rng.random(shape) < 0.5).astype(float)
    if unit == "real":
        return rng.normal(size=shape)
    return rng.poisson(2.0, size=shape).astype(float)
