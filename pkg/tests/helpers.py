"""Shared independent oracles for the test suite.

These are deliberately naive implementations (finite differences, direct
enumeration) kept separate from the library code they check.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, arrays, h: float = 1e-5):
    """Central-difference gradient of scalar ``f(arrays)`` w.r.t. each array.

    Mutates entries in place during probing and restores them afterwards.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def grads_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    bound = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return bool((diff <= bound).all())


def max_grad_err(analytic, numeric) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
