"""
Accuracy statistics for estimated trajectories and WAIC.

All trajectory statistics are computed on an `EvalGrid` ``v_1..v_K``:

* SRE, sum of relative errors of the posterior median;
* MRW, mean width of the 95% band relative to the truth;
* ENV, fraction of points where the band covers the truth;
* RW, mean absolute width of the band.

Figures in the literature sometimes label MRW as RWD and SRE as DEV.
"""
from __future__ import annotations

import csv

import numpy as np
from scipy.special import logsumexp

from .summary import EvalGrid

__all__ = [
    "EvalGrid",
    "band_on_grid",
    "sre",
    "mrw",
    "env",
    "rw",
    "waic",
    "rank_models",
    "STAT_COLUMNS",
    "write_stats",
    "read_stats",
]

STAT_COLUMNS = ("scenario", "replicate", "model", "quantity", "sre", "mrw", "env", "rw")
HIGHER_IS_BETTER = {"env": True, "mrw": False, "sre": False, "rw": False}


def band_on_grid(summary, g, quantity="ne"):
    """``(median, q025, q975)`` of the summary at the grid points."""
    if quantity == "ne":
        return summary.ne_at(g.v)
    if quantity == "beta":
        return summary.beta_at(g.v)
    raise ValueError("quantity must be 'ne' or 'beta'")


def _truth(truth, g):
    t = truth(g.v) if callable(truth) else truth
    t = np.asarray(t, dtype=float)
    if t.shape != g.v.shape:
        raise ValueError(f"truth has shape {t.shape}, grid has {g.v.shape}")
    if np.any(~(t > 0)):
        raise ValueError("truth must be positive at every grid point")
    return t


def _inputs(summary, truth, g, quantity):
    m, lo, hi = band_on_grid(summary, g, quantity)
    t = _truth(truth, g)
    ok = np.isfinite(m) & np.isfinite(lo) & np.isfinite(hi)
    return m[ok], lo[ok], hi[ok], t[ok]


def sre(summary, truth, g, quantity="ne"):
    m, _, _, t = _inputs(summary, truth, g, quantity)
    return float(np.sum(np.abs(m - t) / t))


def mrw(summary, truth, g, quantity="ne"):
    _, lo, hi, t = _inputs(summary, truth, g, quantity)
    return float(np.mean(np.abs(hi - lo) / t))


def env(summary, truth, g, quantity="ne"):
    _, lo, hi, t = _inputs(summary, truth, g, quantity)
    return float(np.mean((lo <= t) & (t <= hi)))


def rw(summary, g, quantity="ne"):
    _, lo, hi = band_on_grid(summary, g, quantity)
    ok = np.isfinite(lo) & np.isfinite(hi)
    return float(np.mean(np.abs(hi[ok] - lo[ok])))


def waic(pointwise):
    """
    ``-2 (lppd - p_waic)`` from a (draws, observations) log-likelihood matrix.
    The penalty uses the sample variance with an ``n - 1`` denominator.
    """
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim != 2:
        raise ValueError("pointwise log-likelihood must be a 2-d array")
    S = ll.shape[0]
    if S < 2:
        raise ValueError("WAIC needs at least two draws for the variance penalty")
    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(S)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return -2.0 * (lppd - p_waic)


def rank_models(stats, statistics=("env", "mrw", "sre")):
    """
    Top-two tallies. ``stats`` is an iterable of mappings with keys
    ``scenario``, ``replicate``, ``model`` and one key per statistic.

    Within each (scenario, replicate) models are ordered by the statistic
    (higher ENV is better, lower MRW/SRE/RW is better) with ties broken by
    model name. Returns rows with the count and percentage of replicates in
    which each model lands in the top two, plus the number of replicates
    in which a tie at the cut-off had to be broken by name.
    """
    groups = {}
    for r in stats:
        groups.setdefault(r["scenario"], {}).setdefault(str(r["replicate"]), []).append(r)
    rows = []
    for scenario in sorted(groups):
        reps = groups[scenario]
        models = sorted({r["model"] for rs in reps.values() for r in rs})
        for stat in statistics:
            better_high = HIGHER_IS_BETTER[stat]
            count = dict.fromkeys(models, 0)
            ties = 0
            for rs in reps.values():
                vals = [(float(r[stat]), r["model"]) for r in rs]
                key = (lambda p: (-p[0], p[1])) if better_high else (lambda p: (p[0], p[1]))
                ordered = sorted(vals, key=key)
                for _, name in ordered[:2]:
                    count[name] += 1
                if len(ordered) > 2 and ordered[1][0] == ordered[2][0]:
                    ties += 1
            n = len(reps)
            for name in models:
                rows.append({
                    "scenario": scenario,
                    "statistic": stat,
                    "model": name,
                    "top2_count": count[name],
                    "n_replicates": n,
                    "top2_percent": 100.0 * count[name] / n,
                    "tie_breaks": ties,
                })
    return rows


def write_stats(path, rows, columns=STAT_COLUMNS, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def read_stats(path):
    """Rows of a statistics CSV; numeric statistic columns come back as floats."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for k in ("sre", "mrw", "env", "rw"):
            if k in r and r[k] not in ("", None):
                r[k] = float(r[k])
    return rows
