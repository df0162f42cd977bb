"""Shared numeric test helpers: the central finite-difference oracle and
gradient comparison. These stay independent of the library's backward
rules on purpose."""

import numpy as np


def finite_difference(f, arrays, h=1e-4):
    """Central-difference gradients of the scalar ``f()`` with respect to
    every element of ``arrays`` (perturbed in place, restored after)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, zero_floor=1e-7):
    """Worst elementwise relative error, treating near-zero pairs by
    absolute difference against the floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    small = scale < zero_floor
    rel = np.where(small, diff / zero_floor, diff / np.where(small, 1.0, scale))
    return float(rel.max()) if rel.size else 0.0


def assert_grads_close(analytic, numeric, tol=1e-3):
    worst = max_rel_err(analytic, numeric)
    assert worst < tol, f"gradient mismatch: max relative error {worst} >= {tol}"
