"""
Symmetric banded matrices in LAPACK lower storage: ``ab[k, j] = A[j + k, j]``.

`cholesky_banded_counted` is a plain implementation that also counts
floating-point operations, used to check that factorization cost grows
linearly in the dimension for fixed bandwidth. Production code goes through
`BandedCholesky`, which wraps LAPACK via scipy.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

__all__ = ["bandwidth", "to_band", "from_band", "cholesky_banded_counted", "BandedCholesky"]


def bandwidth(A, tol=0.0):
    """Largest ``|i - j|`` with a nonzero entry."""
    A = np.asarray(A)
    i, j = np.nonzero(np.abs(A) > tol)
    return int(np.max(np.abs(i - j))) if len(i) else 0


def to_band(A, b):
    n = A.shape[0]
    ab = np.zeros((b + 1, n))
    for k in range(b + 1):
        ab[k, : n - k] = np.diagonal(A, -k)
    return ab


def from_band(ab):
    b, n = ab.shape[0] - 1, ab.shape[1]
    A = np.zeros((n, n))
    for k in range(b + 1):
        idx = np.arange(n - k)
        A[idx + k, idx] = ab[k, : n - k]
        A[idx, idx + k] = ab[k, : n - k]
    return A


def cholesky_banded_counted(ab):
    """
    Lower Cholesky factor in band storage plus the number of flops spent.
    Raises LinAlgError when the matrix is not positive definite.
    """
    w = np.array(ab, dtype=float)
    b, n = w.shape[0] - 1, w.shape[1]
    ops = 0
    for j in range(n):
        d = w[0, j]
        if not d > 0:
            raise LinAlgError(f"leading minor {j + 1} is not positive definite")
        d = np.sqrt(d)
        w[0, j] = d
        m = min(b, n - 1 - j)
        col = w[1 : m + 1, j] / d
        w[1 : m + 1, j] = col
        ops += 1 + m
        # rank-one update of the trailing band
        for k in range(1, m + 1):
            w[: m - k + 1, j + k] -= col[k - 1 :] * col[k - 1]
            ops += 2 * (m - k + 1)
    return w, ops


class BandedCholesky:
    """Factorization of an SPD banded matrix given in lower band storage."""

    def __init__(self, ab):
        self.factor = cholesky_banded(ab, lower=True)

    @classmethod
    def from_dense(cls, A, b=None):
        b = bandwidth(A) if b is None else b
        return cls(to_band(A, b))

    @property
    def logdet(self):
        return float(2.0 * np.sum(np.log(self.factor[0])))

    def solve(self, rhs):
        return cho_solve_banded((self.factor, True), rhs)

    def inverse(self):
        return self.solve(np.eye(self.factor.shape[1]))
