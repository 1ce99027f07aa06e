"""
Hamiltonian Monte Carlo for the model family.

Two transition kernels are available: the multinomial No-U-Turn sampler
(default) and static HMC with a jittered step size. During burn-in the step
size is tuned by dual averaging towards a target acceptance statistic, and a
diagonal inverse metric is estimated over doubling windows (75 iteration
initial buffer, 25 iteration first window, 50 iteration terminal buffer; for
short burn-ins these become 15% / 75% / 10%).

Each chain draws from its own stream spawned from the master seed, so the
draws do not depend on how chains are scheduled.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, Posterior

__all__ = [
    "HmcSettings",
    "Chains",
    "InitializationError",
    "run_hmc",
    "dual_averaging",
]

MAX_DELTA_H = 1000.0


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class HmcSettings:
    chains: int = 4
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 2
    target_accept: float = 0.9
    max_depth: int = 10
    seed: int = 0
    algorithm: str = "nuts"
    n_leapfrog: int = 20  # static HMC only
    adapt_mass: bool = True
    init_jitter: float = 0.2
    init_tries: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.thin < 1:
            raise ValueError("chains, iterations and thin must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be smaller than the number of iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target acceptance must lie in (0, 1)")
        if self.algorithm not in ("nuts", "hmc"):
            raise ValueError("algorithm must be 'nuts' or 'hmc'")
        if self.max_depth < 1 or self.n_leapfrog < 1:
            raise ValueError("tree depth and leapfrog count must be positive")

    @property
    def kept_per_chain(self):
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass(eq=False)
class Chains:
    """
    Post burn-in, thinned draws of the unconstrained vector.

    ``draws`` has shape (chains, kept, dim). ``pointwise`` holds the
    per-draw log-likelihood contributions with chains pooled in order.
    """

    draws: np.ndarray
    divergent: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    names: list
    pointwise: np.ndarray | None = None
    warmup_divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    target: object = None

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[1]

    @property
    def dim(self):
        return self.draws.shape[2]

    def pooled(self):
        return self.draws.reshape(-1, self.dim)

    @property
    def n_divergent(self):
        return int(self.divergent.sum())


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------


class dual_averaging:
    """Nesterov dual averaging of ``log step`` (gamma 0.05, t0 10, kappa 0.75)."""

    def __init__(self, step, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.t = 0
        self.hbar = 0.0
        self.log_step = np.log(step)
        self.log_step_bar = 0.0

    def update(self, accept):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept)
        self.log_step = self.mu - np.sqrt(self.t) / self.gamma * self.hbar
        eta = self.t ** -self.kappa
        self.log_step_bar = eta * self.log_step + (1 - eta) * self.log_step_bar
        return float(np.exp(self.log_step))

    @property
    def final(self):
        return float(np.exp(self.log_step_bar))


def _windows(burn_in):
    """``(start, end)`` iteration ranges of the metric-estimation windows."""
    init, term, base = 75, 50, 25
    if burn_in < 20:
        return []
    if init + term + base > burn_in:
        init = int(0.15 * burn_in)
        term = int(0.1 * burn_in)
        base = burn_in - init - term
    ends = []
    start, size = init, base
    last = burn_in - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append((start, end))
        start, size = end, 2 * size
    return ends


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


class _Point:
    __slots__ = ("z", "p", "logp", "grad")

    def __init__(self, z, p, logp, grad):
        self.z, self.p, self.logp, self.grad = z, p, logp, grad


def _leapfrog(f, pt, eps, inv_m):
    p = pt.p + 0.5 * eps * pt.grad
    z = pt.z + eps * inv_m * p
    logp, grad = f(z)
    p = p + 0.5 * eps * grad
    return _Point(z, p, logp, grad)


def _kinetic(p, inv_m):
    return 0.5 * float(np.dot(p, inv_m * p))


class _Tree:
    __slots__ = ("left", "right", "prop", "logw", "rho", "acc", "n", "div", "turn")


def _turning(rho, p_left, p_right, inv_m):
    return np.dot(inv_m * p_left, rho) <= 0 or np.dot(inv_m * p_right, rho) <= 0


class _Nuts:
    def __init__(self, f, inv_m, max_depth, rng):
        self.f, self.inv_m, self.max_depth, self.rng = f, inv_m, max_depth, rng

    def _leaf(self, edge, eps, h0):
        pt = _leapfrog(self.f, edge, eps, self.inv_m)
        h = -pt.logp + _kinetic(pt.p, self.inv_m)
        dh = h - h0 if np.isfinite(h) else np.inf
        t = _Tree()
        t.left = t.right = t.prop = pt
        t.logw = -dh
        t.rho = pt.p.copy()
        t.acc = float(min(1.0, np.exp(-dh))) if np.isfinite(dh) else 0.0
        t.n = 1
        t.div = dh > MAX_DELTA_H
        t.turn = False
        return t

    def _merge(self, a, b, direction, uniform):
        # a was built first; b extends it in `direction`
        left, right = (a, b) if direction > 0 else (b, a)
        t = _Tree()
        t.left, t.right = left.left, right.right
        logw = np.logaddexp(a.logw, b.logw)
        if uniform:
            take_b = np.log(self.rng.uniform()) < b.logw - logw
        else:
            take_b = np.log(self.rng.uniform()) < b.logw - a.logw
        t.prop = b.prop if take_b else a.prop
        t.logw = logw
        t.rho = left.rho + right.rho
        t.acc = a.acc + b.acc
        t.n = a.n + b.n
        t.div = a.div or b.div
        im = self.inv_m
        turn = _turning(t.rho, t.left.p, t.right.p, im)
        # extra checks across the two halves
        if not turn:
            r = left.rho + right.left.p
            turn = _turning(r, left.left.p, right.left.p, im)
        if not turn:
            r = left.right.p + right.rho
            turn = _turning(r, left.right.p, right.right.p, im)
        t.turn = turn
        return t

    def _build(self, edge, direction, depth, eps, h0):
        if depth == 0:
            return self._leaf(edge, direction * eps, h0)
        a = self._build(edge, direction, depth - 1, eps, h0)
        if a.div or a.turn:
            return a
        b = self._build(a.right if direction > 0 else a.left, direction, depth - 1, eps, h0)
        if b.div or b.turn:
            a.div = a.div or b.div
            a.turn = True
            a.acc += b.acc
            a.n += b.n
            return a
        return self._merge(a, b, direction, uniform=True)

    def transition(self, start, eps):
        h0 = -start.logp + _kinetic(start.p, self.inv_m)
        tree = _Tree()
        tree.left = tree.right = tree.prop = start
        tree.logw = 0.0
        tree.rho = start.p.copy()
        tree.acc, tree.n, tree.div, tree.turn = 0.0, 0, False, False
        acc, n, div = 0.0, 0, False
        depth = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            edge = tree.right if direction > 0 else tree.left
            sub = self._build(edge, direction, depth, eps, h0)
            acc += sub.acc
            n += sub.n
            depth += 1
            if sub.div:
                div = True
                break
            if sub.turn:
                break
            tree = self._merge(tree, sub, direction, uniform=False)
            if tree.turn:
                break
        return tree.prop, acc / max(n, 1), n, div


def _static_hmc(f, start, eps, n_steps, inv_m, rng):
    h0 = -start.logp + _kinetic(start.p, inv_m)
    pt = start
    for _ in range(n_steps):
        pt = _leapfrog(f, pt, eps, inv_m)
        if not np.isfinite(pt.logp):
            break
    h = -pt.logp + _kinetic(pt.p, inv_m)
    dh = h - h0 if np.isfinite(h) else np.inf
    acc = float(min(1.0, np.exp(-dh))) if np.isfinite(dh) else 0.0
    div = dh > MAX_DELTA_H
    if rng.uniform() < acc:
        return pt, acc, n_steps, div
    return start, acc, n_steps, div


def _initial_step(f, pt, inv_m, rng):
    """Double or halve the step until one leapfrog step crosses acceptance 0.8."""
    eps = 1.0
    p = rng.standard_normal(len(pt.z)) / np.sqrt(inv_m)
    start = _Point(pt.z, p, pt.logp, pt.grad)
    h0 = -pt.logp + _kinetic(p, inv_m)

    def log_acc(e):
        q = _leapfrog(f, start, e, inv_m)
        h = -q.logp + _kinetic(q.p, inv_m)
        return h0 - h if np.isfinite(h) else -np.inf

    direction = 1 if log_acc(eps) > np.log(0.8) else -1
    for _ in range(100):
        nxt = eps * 2.0**direction
        la = log_acc(nxt)
        if (direction == 1 and not la > np.log(0.8)) or (direction == -1 and la > np.log(0.8)):
            return nxt if direction == -1 else eps
        eps = nxt
    return eps


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _as_target(spec):
    if isinstance(spec, ModelSpec):
        return Posterior(spec)
    if isinstance(spec, Posterior):
        return spec
    if not (hasattr(spec, "dim") and callable(spec)):
        raise TypeError("target needs a `dim` attribute and must return (value, gradient)")
    return spec


def _initial(target, rng, settings):
    for _ in range(settings.init_tries):
        if hasattr(target, "initial_point"):
            z = target.initial_point(rng, jitter=settings.init_jitter)
        else:
            z = rng.uniform(-2.0, 2.0, size=target.dim)
        logp, grad = target(z)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return _Point(np.asarray(z, float), np.zeros(target.dim), logp, grad)
    raise InitializationError(
        f"no finite starting point after {settings.init_tries} attempts"
    )


def _run_chain(target, settings, seed_seq):
    rng = np.random.default_rng(seed_seq)
    s = settings
    dim = target.dim
    inv_m = np.ones(dim)
    pt = _initial(target, rng, s)
    eps = _initial_step(target, pt, inv_m, rng)
    da = dual_averaging(eps, s.target_accept)
    windows = _windows(s.burn_in) if s.adapt_mass else []
    win_idx = 0
    buf = []
    nuts = _Nuts(target, inv_m, s.max_depth, rng)

    kept = range(s.burn_in, s.iterations, s.thin)
    nk = len(kept)
    draws = np.empty((nk, dim))
    div_out = np.zeros(nk, bool)
    acc_out = np.empty(nk)
    n_out = np.empty(nk, int)
    warm_div = 0
    k = 0
    for it in range(s.iterations):
        warm = it < s.burn_in
        p = rng.standard_normal(dim) / np.sqrt(inv_m)
        start = _Point(pt.z, p, pt.logp, pt.grad)
        step = eps
        if s.algorithm == "nuts":
            pt, acc, n, div = nuts.transition(start, step)
        else:
            step = eps * rng.uniform(0.9, 1.1)
            pt, acc, n, div = _static_hmc(target, start, step, s.n_leapfrog, inv_m, rng)
        pt = _Point(pt.z, None, pt.logp, pt.grad)
        if warm:
            warm_div += int(div)
            eps = da.update(acc)
            if win_idx < len(windows):
                lo, hi = windows[win_idx]
                if lo <= it < hi:
                    buf.append(pt.z)
                if it == hi - 1:
                    x = np.asarray(buf)
                    m = len(x)
                    var = x.var(axis=0, ddof=1) if m > 1 else np.ones(dim)
                    inv_m = (m / (m + 5.0)) * var + 1e-3 * (5.0 / (m + 5.0))
                    nuts.inv_m = inv_m
                    buf = []
                    win_idx += 1
                    eps = _initial_step(target, pt, inv_m, rng)
                    da = dual_averaging(eps, s.target_accept)
            if it == s.burn_in - 1:
                eps = da.final
        if k < nk and it == kept[k]:
            draws[k] = pt.z
            div_out[k] = div
            acc_out[k] = acc
            n_out[k] = n
            k += 1
    return draws, div_out, acc_out, n_out, eps, inv_m, warm_div


def run_hmc(spec, settings=None, rng=None):
    """
    Sample the posterior of ``spec`` (a `ModelSpec`, a `Posterior`, or any
    callable target with ``dim`` returning ``(value, gradient)``).

    ``rng`` overrides ``settings.seed`` when given (an int or SeedSequence).
    """
    settings = settings or HmcSettings()
    target = _as_target(spec)
    if rng is None:
        root = np.random.SeedSequence(settings.seed)
    elif isinstance(rng, np.random.SeedSequence):
        root = rng
    elif isinstance(rng, np.random.Generator):
        root = np.random.SeedSequence(int(rng.integers(2**63)))
    else:
        root = np.random.SeedSequence(int(rng))
    seeds = root.spawn(settings.chains)
    if settings.workers > 1 and settings.chains > 1:
        with ProcessPoolExecutor(max_workers=min(settings.workers, settings.chains)) as ex:
            results = list(ex.map(_run_chain, [target] * settings.chains,
                                  [settings] * settings.chains, seeds))
    else:
        results = [_run_chain(target, settings, s) for s in seeds]
    draws, div, acc, n, eps, inv_m, warm = (np.array(v) for v in zip(*results))
    names = list(target.names) if hasattr(target, "names") else [
        f"z[{i + 1}]" for i in range(target.dim)
    ]
    pointwise = None
    if hasattr(target, "pointwise_loglik"):
        pointwise = target.pointwise_loglik(draws.reshape(-1, target.dim))
    return Chains(draws, div, acc, n, eps, inv_m, names, pointwise, warm, target)

