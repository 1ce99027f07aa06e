"""
Posterior summaries shared by both inference engines, and the evaluation
grid used by the metrics.

Quantiles use linear interpolation between order statistics (numpy's default
"linear" rule). Summaries are per grid cell and are read off at arbitrary
times as step functions: a time ``v`` in ``(k_i, k_{i+1}]`` takes the value
of cell ``i``, and ``v = 0`` belongs to the first cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genealogy import Grid

__all__ = ["EvalGrid", "PosteriorSummary", "TableSummary", "summarize", "field_quantiles"]

QUANTILES = (0.5, 0.025, 0.975)


@dataclass(frozen=True, eq=False)
class EvalGrid:
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, "v", v)
        if v.ndim != 1 or len(v) < 1:
            raise ValueError("evaluation grid needs at least one point")
        if len(v) > 2 and not np.allclose(np.diff(v), v[1] - v[0], rtol=1e-9, atol=1e-12):
            raise ValueError("evaluation grid must be regularly spaced")

    @classmethod
    def default(cls, t2, K=100, fraction=0.8):
        """``K`` regular points from 0 to ``fraction * t2``."""
        if K < 1:
            raise ValueError("K must be positive")
        return cls(np.linspace(0.0, fraction * t2, K))

    @property
    def K(self):
        return len(self.v)


def field_quantiles(x, q=QUANTILES):
    """Quantiles of ``exp(x)`` over draws, per column; rows are draws."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.quantile(np.exp(x), q, axis=0)


@dataclass(eq=False)
class PosteriorSummary:
    """
    Per-cell median and 2.5% / 97.5% quantiles of ``N_e = exp(theta)``
    and, for the adaptive model, of ``beta = exp(alpha)`` on cells ``1..M'``.
    """

    grid: Grid
    ne_median: np.ndarray
    ne_q025: np.ndarray
    ne_q975: np.ndarray
    beta_median: np.ndarray | None = None
    beta_q025: np.ndarray | None = None
    beta_q975: np.ndarray | None = None
    engine: str = ""

    @property
    def has_beta(self):
        return self.beta_median is not None

    def _at(self, values, t, limit):
        idx = self.grid.cell_index(np.asarray(t, dtype=float))
        out = np.asarray(values, dtype=float)[np.minimum(idx, limit - 1)]
        return np.where(idx < limit, out, np.nan)

    def ne_at(self, t):
        """``(median, q025, q975)`` of N_e at times ``t``."""
        M = self.grid.M
        return tuple(self._at(a, t, M) for a in (self.ne_median, self.ne_q025, self.ne_q975))

    def beta_at(self, t):
        """Beta quantiles at ``t``; NaN past cell M' or when beta was not modelled."""
        if not self.has_beta:
            nan = np.full(np.shape(t), np.nan)
            return nan, nan.copy(), nan.copy()
        m = len(self.beta_median)
        return tuple(self._at(a, t, m) for a in (self.beta_median, self.beta_q025, self.beta_q975))


def summarize(chains, grid=None, posterior=None):
    """Pool post burn-in draws over chains and summarize per cell."""
    posterior = posterior or chains.target
    grid = grid or posterior.spec.grid
    if grid is None:
        raise ValueError("a Grid is needed to summarize")
    theta, alpha = posterior.fields(chains.pooled())
    ne = field_quantiles(theta)
    kw = {}
    if alpha is not None:
        b = field_quantiles(alpha)
        kw = dict(beta_median=b[0], beta_q025=b[1], beta_q975=b[2])
    return PosteriorSummary(grid, ne[0], ne[1], ne[2], engine="hmc", **kw)


@dataclass(eq=False)
class TableSummary:
    """A summary tabulated at fixed times (as read back from a summary CSV)."""

    times: np.ndarray
    ne_median: np.ndarray
    ne_q025: np.ndarray
    ne_q975: np.ndarray
    beta_median: np.ndarray
    beta_q025: np.ndarray
    beta_q975: np.ndarray

    @property
    def has_beta(self):
        return bool(np.any(np.isfinite(self.beta_median)))

    def _rows(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.abs(self.times - t[..., None]).argmin(axis=-1)
        if not np.allclose(self.times[idx], t, rtol=1e-9, atol=1e-12):
            raise ValueError("requested times are not in the table")
        return idx

    def ne_at(self, t):
        i = self._rows(t)
        return self.ne_median[i], self.ne_q025[i], self.ne_q975[i]

    def beta_at(self, t):
        i = self._rows(t)
        return self.beta_median[i], self.beta_q025[i], self.beta_q975[i]
