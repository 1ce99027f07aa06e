"""
Convergence diagnostics: rank-normalized split-R-hat and bulk effective
sample size.

Each chain is split in half. Draws are pooled, ranked (average ranks for
ties) and mapped through ``Phi^-1((r - 3/8) / (S + 1/4))``. R-hat is the
larger of the classic split R-hat of the normalized draws and of the
normalized folded draws ``|x - median|``. ESS follows Geyer's initial
monotone sequence on the multi-chain autocorrelation estimate.

A parameter that is constant across all draws gets R-hat 1 and ESS NaN
(flagged as degenerate).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

__all__ = ["Diagnostics", "split_chains", "rank_normalize", "rhat", "ess", "diagnostics"]


class Diagnostics(NamedTuple):
    names: list
    rhat: np.ndarray
    ess: np.ndarray
    degenerate: np.ndarray
    n_divergent: int

    def as_dict(self):
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "rhat": {n: clean(r) for n, r in zip(self.names, self.rhat)},
            "ess": {n: clean(e) for n, e in zip(self.names, self.ess)},
            "degenerate": [n for n, d in zip(self.names, self.degenerate) if d],
            "divergences": int(self.n_divergent),
        }


def split_chains(x):
    """(chains, draws) -> (2*chains, draws//2); an odd middle draw is dropped."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)


def rank_normalize(x):
    x = np.asarray(x, dtype=float)
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x):
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _is_constant(x):
    return bool(np.all(x == x.flat[0]))


def rhat(x):
    """Rank-normalized split R-hat for one parameter, ``x`` of shape (chains, draws)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if _is_constant(x):
        return 1.0
    s = split_chains(x)
    if s.shape[1] < 2:
        return np.nan
    bulk = _rhat_basic(rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = 1.0 if _is_constant(folded) else _rhat_basic(rank_normalize(folded))
    return max(bulk, tail)


def _autocov(x):
    n = len(x)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _ess_basic(x):
    m, n = x.shape
    acov = np.array([_autocov(c) for c in x])
    means = x.mean(axis=1)
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n + (means.var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial positive sequence, then enforce monotonicity
    t = 0
    pairs = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return m * n / tau


def ess(x):
    """Bulk ESS of the rank-normalized split chains."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if _is_constant(x):
        return np.nan
    s = split_chains(x)
    if s.shape[1] < 4:
        return np.nan
    return float(_ess_basic(rank_normalize(s)))


def diagnostics(chains, names=None):
    """
    Per-parameter R-hat and ESS. ``chains`` is a `Chains` object or an array
    of shape (chains, draws, dim).
    """
    if hasattr(chains, "draws"):
        arr = chains.draws
        names = names or chains.names
        ndiv = int(np.sum(chains.divergent))
    else:
        arr = np.asarray(chains, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        ndiv = 0
    names = list(names) if names is not None else [f"z[{i + 1}]" for i in range(arr.shape[2])]
    r = np.array([rhat(arr[:, :, j]) for j in range(arr.shape[2])])
    e = np.array([ess(arr[:, :, j]) for j in range(arr.shape[2])])
    deg = np.array([_is_constant(arr[:, :, j]) for j in range(arr.shape[2])])
    return Diagnostics(names, r, e, deg, ndiv)
