"""Independent oracles: brute-force simplex projection, finite differences.

These deliberately avoid the library's own algorithms so that the tests
check against a second derivation, not a mirror of the implementation.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np


def project_simplex_bruteforce(q: np.ndarray) -> np.ndarray:
    """Exhaustive active-set search over all nonempty supports.

    Every candidate p is feasible (nonnegative, sums to one) by
    construction; the Euclidean projection is the feasible candidate with
    minimum distance to q. Exponential in len(q): keep K <= 12.
    """
    q = np.asarray(q, dtype=np.float64)
    size = len(q)
    best_p = None
    best_dist = np.inf
    indices = range(size)
    for support_size in range(1, size + 1):
        for support in combinations(indices, support_size):
            support = list(support)
            tau = (q[support].sum() - 1.0) / support_size
            p = np.zeros(size)
            p[support] = q[support] - tau
            if (p[support] < -1e-15).any():
                continue
            dist = float(np.sum((p - q) ** 2))
            if dist < best_dist - 1e-15:
                best_dist = dist
                best_p = p
    return best_p


def project_simplex_bruteforce_fast(q: np.ndarray) -> np.ndarray:
    """Same search, vectorized over all 2^K - 1 support masks."""
    q = np.asarray(q, dtype=np.float64)
    size = len(q)
    masks = ((np.arange(1, 2**size)[:, None] >> np.arange(size)) & 1).astype(np.float64)
    sizes = masks.sum(axis=1)
    taus = (masks @ q - 1.0) / sizes
    candidates = (q[None, :] - taus[:, None]) * masks
    feasible = (candidates >= -1e-15).all(axis=1)
    dists = np.sum((candidates - q[None, :]) ** 2, axis=1)
    dists[~feasible] = np.inf
    return candidates[np.argmin(dists)]


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = f(x)
        flat[i] = original - h
        down = f(x)
        flat[i] = original
        grad_flat[i] = (up - down) / (2 * h)
    return grad


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    scale = max(float(np.linalg.norm(approx)), float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(approx - exact)) / scale
