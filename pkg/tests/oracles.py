"""Independent reference implementations used by the unit and acceptance tests.

Written with plain Python floats (64-bit) and explicit loops, sharing no code
with the package.
"""

import math

import numpy as np


def softmax_ce(q, k_plus, negatives, tau, literal=False):
    """-log softmax(positive) over [q.k+/tau, q.k-/tau ...] with max subtraction."""
    q = [float(x) for x in q]
    pos = sum(a * float(b) for a, b in zip(q, k_plus))
    logits = [pos if literal else pos / tau]
    for n in negatives:
        logits.append(sum(a * float(b) for a, b in zip(q, n)) / tau)
    top = max(logits)
    lse = top + math.log(math.fsum(math.exp(v - top) for v in logits))
    return lse - pos / tau


def dense_ce(queries, keys, corr, negatives, tau):
    terms = [softmax_ce(queries[s], keys[corr[s]], negatives, tau) for s in range(len(queries))]
    return math.fsum(terms) / len(terms)


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn(x)
        flat[i] = orig - h
        minus = fn(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
