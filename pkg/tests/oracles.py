"""Independent oracles the tests check the library against.

Everything here is deliberately naive -- central finite differences,
explicit rank-1 summation loops, materialized matrix products -- and never
calls the code paths it is used to verify.
"""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued f with respect to x.

    f takes no arguments and reads x in place; x must be float64 for the
    differences to be trustworthy.
    """
    assert x.dtype == np.float64
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over elements of |a - n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def rank1_sum(b_mat: np.ndarray, a_mat: np.ndarray, scaling: float, diag: np.ndarray | None = None) -> np.ndarray:
    """Explicit sum of scaled rank-1 outer products, optionally gated by a
    per-component diagonal weight."""
    r = a_mat.shape[0]
    m, n = b_mat.shape[0], a_mat.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(r):
        w = 1.0 if diag is None else float(diag[i])
        out += w * np.outer(b_mat[:, i].astype(np.float64), a_mat[i, :].astype(np.float64))
    return scaling * out


def softmax_rows(v: np.ndarray) -> np.ndarray:
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()
