"""
Synthetic data: sampling times from an inhomogeneous Poisson process and
heterochronous coalescent times, both by thinning, plus the eight benchmark
scenarios (constant-exponential and bottleneck N_e crossed with four
sampling protocols).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genealogy import Genealogy

__all__ = [
    "Piecewise",
    "ScenarioSpec",
    "SCENARIOS",
    "scenario",
    "trajectory_value",
    "sample_times_thinning",
    "sample_times_count",
    "coalescent_times_thinning",
    "SimulatedDataset",
    "simulate_dataset",
    "write_times",
    "read_times",
    "replicate_rng",
]


class Piecewise:
    """
    Piecewise function of time. Piece ``j`` is active on ``(b_{j-1}, b_j]``
    (the first piece includes 0). Each piece must be monotone on its
    support, which makes `bounds` exact.
    """

    def __init__(self, breaks, pieces):
        self.breaks = np.asarray(breaks, dtype=float)
        self.pieces = list(pieces)
        if len(self.pieces) != len(self.breaks) + 1:
            raise ValueError("need one more piece than breakpoints")

    @classmethod
    def constant(cls, value):
        return cls([], [lambda t, v=float(value): np.full(np.shape(t), v)])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.breaks, t, side="left")
        out = np.empty(t.shape)
        for j, f in enumerate(self.pieces):
            m = idx == j
            if np.any(m):
                out[m] = f(t[m])
        return out if out.ndim else float(out)

    def scaled(self, c):
        return Piecewise(self.breaks, [lambda t, f=f: c * f(t) for f in self.pieces])

    def bounds(self, a, b):
        """(min, max) over ``[a, b]``, including one-sided limits at breakpoints."""
        edges = np.concatenate([[-np.inf], self.breaks, [np.inf]])
        lo, hi = np.inf, -np.inf
        for j, f in enumerate(self.pieces):
            left, right = max(a, edges[j]), min(b, edges[j + 1])
            if left > right:
                continue
            v = f(np.array([left, right]))
            lo, hi = min(lo, v.min()), max(hi, v.max())
        return float(lo), float(hi)

    def next_break(self, t):
        k = np.searchsorted(self.breaks, t, side="right")
        return float(self.breaks[k]) if k < len(self.breaks) else np.inf


def _bounds(f, a, b, mesh=10_000, safety=1.1):
    if hasattr(f, "bounds"):
        return f.bounds(a, b)
    v = np.asarray(f(np.linspace(a, b, mesh)), dtype=float)
    return float(v.min()) / safety, float(v.max()) * safety


def _const(v):
    return lambda t: np.full(np.shape(t), float(v))


_CE_NE = Piecewise(
    [0.15, 0.3],
    [_const(3.0), lambda t: 3.0 * np.exp(3.0 - 20.0 * t), _const(0.15)],
)
_B_NE = Piecewise([0.2, 0.5], [_const(0.6), _const(0.005), _const(0.3)])

# sampling-rate shapes (before the c_n multiplier) and c_n per target n
_SHAPES = {
    "CE-PP": (_CE_NE, {100: 180, 300: 500, 500: 830}),
    "CE-U": (Piecewise.constant(1.0), {100: 25, 300: 65, 500: 120}),
    "CE-LP": (
        Piecewise([0.23], [lambda t: 10.0 * np.exp(1.6 - 20.0 * t), _const(0.5)]),
        {100: 45, 300: 140, 500: 210},
    ),
    "CE-UP": (
        Piecewise([0.3], [lambda t: 10.0 * np.exp(3.0 - 20.0 * t), _const(0.5)]),
        {100: 14, 300: 35, 500: 55},
    ),
    "B-PP": (_B_NE, {100: 520, 300: 1700, 500: 3000}),
    "B-U": (Piecewise.constant(1.0), {100: 15, 300: 40, 500: 70}),
    "B-LP": (
        Piecewise([0.1, 0.4], [_const(4.0), _const(2.0), _const(4.0)]),
        {100: 40, 300: 130, 500: 200},
    ),
    "B-UP": (Piecewise([0.5], [_const(1.0), _const(4.0)]), {100: 150, 300: 210, 500: 250}),
}

SCENARIOS = tuple(_SHAPES)


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    name: str
    n: int
    c: float
    ne: Piecewise
    intensity: Piecewise

    def beta(self, t):
        """True sampling-intensity coefficient ``lambda(t) / N_e(t)``."""
        return self.intensity(t) / self.ne(t)


def scenario(name, n=100):
    """Benchmark scenario ``name`` (e.g. ``"CE-PP"``) with the constant for target ``n``."""
    key = name.upper()
    if key not in _SHAPES:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    shape, consts = _SHAPES[key]
    if n not in consts:
        raise KeyError(f"no constant for n={n}; choose from {sorted(consts)}")
    ne = _CE_NE if key.startswith("CE") else _B_NE
    c = float(consts[n])
    return ScenarioSpec(key, n, c, ne, shape.scaled(c))


def trajectory_value(s, t):
    """``(N_e(t), lambda(t))`` for scenario ``s``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    return s.ne(t), s.intensity(t)


def replicate_rng(seed, index):
    """Independent stream for replicate ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ---------------------------------------------------------------------------
# thinning
# ---------------------------------------------------------------------------


def sample_times_thinning(intensity, T, rng, lam_max=None):
    """
    Lewis-Shedler thinning on ``(0, T]``. Returns sorted times with the
    first sample pinned at 0.
    """
    rng = np.random.default_rng(rng)
    if lam_max is None:
        lam_max = _bounds(intensity, 0.0, T)[1]
    if lam_max <= 0:
        return np.zeros(1)
    k = rng.poisson(lam_max * T)
    cand = np.sort(rng.uniform(0.0, T, size=k))
    lam = np.asarray(intensity(cand), dtype=float)
    if np.any(lam > lam_max * (1 + 1e-12)):
        raise RuntimeError("intensity exceeds its declared upper bound")
    keep = rng.uniform(size=k) * lam_max < lam
    return np.concatenate([[0.0], cand[keep]])


def sample_times_count(intensity, n, rng, window=0.1, max_empty=10_000):
    """
    Thin candidates window by window until ``n`` samples (including the
    pinned one at 0) are collected.
    """
    rng = np.random.default_rng(rng)
    out = [np.zeros(1)]
    have = 1
    t = 0.0
    empty = 0
    while have < n:
        end = t + window
        if hasattr(intensity, "next_break"):
            end = min(end, intensity.next_break(t))
        lam_max = _bounds(intensity, t, end)[1]
        if lam_max > 0:
            k = rng.poisson(lam_max * (end - t))
            cand = np.sort(rng.uniform(t, end, size=k))
            lam = np.asarray(intensity(cand), dtype=float)
            if np.any(lam > lam_max * (1 + 1e-12)):
                raise RuntimeError("intensity exceeds its declared upper bound")
            acc = cand[rng.uniform(size=k) * lam_max < lam]
            if len(acc):
                take = acc[: n - have]
                out.append(take)
                have += len(take)
                empty = 0
        else:
            empty += 1
            if empty > max_empty:
                raise RuntimeError("sampling intensity vanishes; cannot reach n samples")
        t = end
    return np.concatenate(out)


def coalescent_times_thinning(ne, sampling_times, rng, window=0.1, max_extensions=50):
    """
    Heterochronous coalescent times by thinning the point process with rate
    ``C(t) / N_e(t)``; the lineage count changes at each sampling time and
    each accepted coalescence.
    """
    rng = np.random.default_rng(rng)
    times, mult = np.unique(np.asarray(sampling_times, dtype=float), return_counts=True)
    m = len(times)
    lineages = int(mult[0])
    j = 1
    t = float(times[0])
    out = []
    piecewise = hasattr(ne, "next_break")
    constant = piecewise and len(ne.breaks) == 0
    while True:
        next_s = times[j] if j < m else np.inf
        if lineages < 2:
            if j >= m:
                break
            t = float(next_s)
            lineages += int(mult[j])
            j += 1
            continue
        if constant:
            end = next_s
            lo = _bounds(ne, t, t)[0]
        else:
            h = window
            for _ in range(max_extensions):
                end = min(t + h, next_s, ne.next_break(t) if piecewise else np.inf)
                lo = _bounds(ne, t, end)[0]
                if lo > 0 and np.isfinite(lo):
                    break
                h *= 0.5
            else:
                raise RuntimeError("effective population size not bounded away from zero")
        C = lineages * (lineages - 1) / 2.0
        rate_max = C / lo
        cand = t + rng.exponential(1.0 / rate_max)
        if cand >= end:
            t = float(end)
            if end == next_s:
                lineages += int(mult[j])
                j += 1
            continue
        rate = C / float(ne(cand))
        if rate > rate_max * (1 + 1e-12):
            raise RuntimeError("coalescent rate exceeds its bound")
        t = cand
        if rng.uniform() * rate_max < rate:
            out.append(cand)
            lineages -= 1
    return np.array(out)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    scenario: ScenarioSpec
    genealogy: Genealogy

    @property
    def sampling_times(self):
        return self.genealogy.sampling_times

    @property
    def coalescent_times(self):
        return self.genealogy.coalescent_times

    def truth(self, t):
        """``(N_e, lambda, beta)`` at times ``t``."""
        s = self.scenario
        return s.ne(t), s.intensity(t), s.beta(t)


def simulate_dataset(s, n=None, rng=None):
    """
    Draw ``n`` sampling times (first at 0) and then coalescent times given
    them. ``s`` is a `ScenarioSpec` or scenario name.
    """
    if isinstance(s, str):
        s = scenario(s, n or 100)
    n = n or s.n
    rng = np.random.default_rng(rng)
    samples = sample_times_count(s.intensity, n, rng)
    coal = coalescent_times_thinning(s.ne, samples, rng)
    g = Genealogy.from_times(samples, coal, rng=rng)
    return SimulatedDataset(s, g)


def write_times(path, g, header=None):
    """Flat event file: ``time,type`` with type ``sample:<multiplicity>`` or ``coalescence``."""
    times, mult = g.sampling_events()
    rows = [(float(t), f"sample:{int(k)}") for t, k in zip(times, mult)]
    rows += [(float(t), "coalescence") for t in g.coalescent_times]
    rows.sort(key=lambda r: (r[0], r[1] == "coalescence"))
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("time,type\n")
        for t, kind in rows:
            fh.write(f"{t!r},{kind}\n")


def read_times(path, rng=0):
    samples, coal = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("time"):
                continue
            t, kind = line.split(",")
            if kind.startswith("sample"):
                k = int(kind.split(":")[1]) if ":" in kind else 1
                samples += [float(t)] * k
            elif kind == "coalescence":
                coal.append(float(t))
            else:
                raise ValueError(f"unknown event type {kind!r}")
    return Genealogy.from_times(samples, coal, rng=rng)
