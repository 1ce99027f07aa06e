"""
Nested Laplace approximation for GMRF-prior models.

Given the hyperparameters ``h`` (log global scales of the fields and, for
the parametric model, the exponent ``beta1``), the latent vector ``x`` is
``theta`` (plus ``alpha`` interleaved cell by cell for the adaptive model,
plus ``beta0`` appended for the parametric model). The log joint is concave
in ``x``, so Newton's method finds the mode and the negative Hessian there
gives the Gaussian approximation.

Hyperparameters are integrated on a lattice around the mode of their
approximate posterior. Latent marginals come in two strategies:

* ``"laplace"``: for each value ``v`` of ``x_i`` the remaining coordinates
  are moved to their Gaussian conditional mean and a fresh Gaussian
  approximation of them is taken there, so
  ``log pi(x_i = v) = log joint(v, x_-i) - 0.5 log det H_-i(v)``.
  With a single latent coordinate this is the exact marginal.
* ``"gaussian"``: ``N(mode_i, Sigma_ii)`` per hyper point.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import brentq, minimize_scalar
from scipy.special import ndtr

from . import coalescent, sampling
from .banded import BandedCholesky, to_band
from .model import ModelSpec, _fill_smooth
from .priors import LOG_2PI, gmrf_precision
from .summary import PosteriorSummary

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "LatentModel",
    "GaussianApprox",
    "HyperGrid",
    "MarginalSummary",
    "find_mode",
    "hyper_posterior",
    "marginal_latent",
    "inla_fit",
]

GRAD_TOL = 1e-8


class ConvergenceError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class _Factor:
    """Cholesky of the negative Hessian, banded when the layout allows it."""

    def __init__(self, H, band=None):
        if band is not None:
            self._b = BandedCholesky(to_band(H, band))
            self.logdet = self._b.logdet
            self.solve = self._b.solve
        else:
            c = cho_factor(H, lower=True)
            self.logdet = float(2.0 * np.sum(np.log(np.diag(c[0]))))
            self.solve = lambda r: cho_solve(c, r)


class LatentModel:
    """Log joint, gradient and negative Hessian of a `ModelSpec` in the latent layout."""

    def __init__(self, spec):
        if spec.theta_prior.kind != "gmrf" or (
            spec.likelihood == "adapref" and spec.alpha_prior.kind != "gmrf"
        ):
            raise ValueError("the Laplace engine supports GMRF priors only")
        if spec.likelihood == "parpref" and spec.beta_nonnegative:
            raise ValueError("the Laplace engine does not support nonnegative beta constraints")
        self.spec = spec
        st = spec.stats
        M, m = st.M, st.M_prime
        self.M, self.m = M, m
        if spec.likelihood == "adapref":
            order = []
            for i in range(M):
                order.append(("t", i))
                if i < m:
                    order.append(("a", i))
            self.ti = np.array([k for k, (w, _) in enumerate(order) if w == "t"])
            self.ai = np.array([k for k, (w, _) in enumerate(order) if w == "a"])
            self.dim = len(order)
        else:
            self.ti = np.arange(M)
            self.ai = None
            self.dim = M + (1 if spec.likelihood == "parpref" else 0)
        self.b0 = M if spec.likelihood == "parpref" else None

        self.hyper_names, self._hyper_kind = [], []
        for name, prior, L in self._fields():
            if prior.fixed_scale is None and L > 1:
                self.hyper_names.append(f"{name}_log_gamma")
                self._hyper_kind.append(("scale", name))
        if spec.likelihood == "parpref":
            self.hyper_names.append("beta1")
            self._hyper_kind.append(("beta1", None))
        self.n_hyper = len(self.hyper_names)
        if spec.likelihood == "parpref":
            self.band = None
        else:
            self.band = 2 * max(p.order for _, p, _ in self._fields()) if self.ai is not None \
                else spec.theta_prior.order
        self._qcache = {}

    def _fields(self):
        out = [("theta", self.spec.theta_prior, self.M)]
        if self.ai is not None:
            out.append(("alpha", self.spec.alpha_prior, self.m))
        return out

    # -- hyperparameters ---------------------------------------------------

    def _unpack_h(self, h):
        h = np.atleast_1d(np.asarray(h, dtype=float))
        gam = {}
        beta1 = None
        for (kind, name), v in zip(self._hyper_kind, h):
            if kind == "scale":
                gam[name] = float(np.exp(v))
            else:
                beta1 = float(v)
        for name, prior, _ in self._fields():
            gam.setdefault(name, prior.fixed_scale or 1.0)
        return gam, beta1

    def hyper_log_prior(self, h):
        """Log prior of ``h`` on the working scale (log-Jacobians included)."""
        out = 0.0
        h = np.atleast_1d(np.asarray(h, dtype=float))
        priors = dict((n, p) for n, p, _ in self._fields())
        for (kind, name), v in zip(self._hyper_kind, h):
            if kind == "scale":
                out += priors[name].hyper(np.exp(v)) + v
            else:
                sd = self.spec.beta_prior_sd
                out += -0.5 * LOG_2PI - np.log(sd) - 0.5 * (v / sd) ** 2
        return float(out)

    def initial_hyper(self):
        return np.array([np.log(0.1) if k == "scale" else 1.0 for k, _ in self._hyper_kind])

    # -- latent ---------------------------------------------------------------

    def _prior_parts(self, h):
        key = tuple(np.round(np.atleast_1d(h), 14))
        hit = self._qcache.get(key)
        if hit is not None:
            return hit
        gam, _ = self._unpack_h(h)
        Q = np.zeros((self.dim, self.dim))
        const = 0.0
        lin = np.zeros(self.dim)
        for (name, prior, L), idx in zip(self._fields(), (self.ti, self.ai)):
            Qf = gmrf_precision(L, prior.order, gam[name], prior.sigma1, include_first=True)
            Q[np.ix_(idx, idx)] = Qf.toarray()
            c = np.ones(L - 1)
            if prior.order == 2 and L > 1:
                c[0] = 2.0**-0.5
            const += -0.5 * np.sum(LOG_2PI + np.log(c * gam[name] ** 2))
            const += -0.5 * LOG_2PI - np.log(prior.sigma1) - 0.5 * (prior.mu / prior.sigma1) ** 2
            lin[idx[0]] = prior.mu / prior.sigma1**2
        if self.b0 is not None:
            sd = self.spec.beta_prior_sd
            Q[self.b0, self.b0] = 1.0 / sd**2
            const += -0.5 * LOG_2PI - np.log(sd)
        if len(self._qcache) > 256:
            self._qcache.clear()
        self._qcache[key] = (Q, lin, const)
        return Q, lin, const

    def log_joint(self, x, h):
        """Log density of data and latent field given ``h`` (hyperprior excluded)."""
        return self.evaluate(x, h, hessian=False)[0]

    def evaluate(self, x, h, hessian=True):
        """``(value, gradient, negative Hessian)`` in ``x`` at fixed ``h``."""
        x = np.asarray(x, dtype=float)
        st = self.spec.stats
        Q, lin, const = self._prior_parts(h)
        Qx = Q @ x
        value = const - 0.5 * float(x @ Qx) + float(lin @ x)
        grad = -Qx + lin
        theta = x[self.ti]
        with np.errstate(over="ignore", invalid="ignore"):
            value += coalescent.coalescent_loglik(st, theta)
            grad[self.ti] += coalescent.coalescent_grad(st, theta)
            curv_t = coalescent.coalescent_neg_hessian(st, theta)
            H = Q.copy() if hessian else None
            if self.ai is not None:
                alpha = x[self.ai]
                value += sampling.adapref_loglik(st, theta, alpha)
                dth, dal = sampling.adapref_grad(st, theta, alpha)
                grad[self.ti] += dth
                grad[self.ai] += dal
                if hessian:
                    m = self.m
                    w = np.exp(theta[:m] + alpha) * st.widths[:m]
                    ti, ai = self.ti[:m], self.ai
                    H[ai, ai] += w
                    H[ti, ai] += w
                    H[ai, ti] += w
                    curv_t = curv_t.copy()
                    curv_t[:m] += w
            elif self.b0 is not None:
                _, beta1 = self._unpack_h(h)
                params = (x[self.b0], beta1)
                value += sampling.parpref_loglik(st, theta, params)
                dth, db0, _ = sampling.parpref_grad(st, theta, params)
                grad[self.ti] += dth
                grad[self.b0] += db0
                if hessian:
                    m = self.m
                    r = np.exp(x[self.b0] + beta1 * theta[:m]) * st.widths[:m]
                    curv_t = curv_t.copy()
                    curv_t[:m] += beta1**2 * r
                    H[self.ti[:m], self.b0] += beta1 * r
                    H[self.b0, self.ti[:m]] += beta1 * r
                    H[self.b0, self.b0] += r.sum()
            if hessian:
                H[self.ti, self.ti] += curv_t
        return float(value), grad, H

    def initial_latent(self):
        st = self.spec.stats
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = np.where(
                (st.coal_events > 0) & (st.coal_exposure > 0),
                np.log(st.coal_exposure / st.coal_events),
                np.nan,
            )
        theta = _fill_smooth(raw)
        x = np.zeros(self.dim)
        x[self.ti] = theta
        m = self.m
        if self.ai is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                raw_a = np.where(
                    st.samp_count[:m] > 0,
                    np.log(st.samp_count[:m] / (st.widths[:m] * np.exp(theta[:m]))),
                    np.nan,
                )
            x[self.ai] = _fill_smooth(raw_a)
        if self.b0 is not None:
            x[self.b0] = np.log(
                max(st.samp_count[:m].sum(), 1.0) / np.sum(st.widths[:m] * np.exp(theta[:m]))
            )
        return x

    def factor(self, H):
        return _Factor(H, self.band)


@dataclass(eq=False)
class GaussianApprox:
    mode: np.ndarray
    precision: np.ndarray
    log_det: float
    log_joint: float
    hyper: np.ndarray
    grad_norm: float
    iterations: int
    _cov: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self):
        return len(self.mode)

    def covariance(self):
        if self._cov is None:
            if self.dim <= 1:
                self._cov = 1.0 / self.precision
            else:
                self._cov = _Factor(self.precision, None).solve(np.eye(self.dim))
        return self._cov

    @property
    def log_weight(self):
        """Laplace estimate of ``log p(data | h)`` without the hyperprior."""
        return self.log_joint + 0.5 * self.dim * LOG_2PI - 0.5 * self.log_det


def _as_model(spec):
    if isinstance(spec, ModelSpec):
        return LatentModel(spec)
    return spec


def _hyper_from(model, gamma, xi, beta1):
    h = []
    for kind, name in model._hyper_kind:
        if kind == "scale":
            v = gamma if name == "theta" else xi
            if v is None:
                raise ValueError(f"a value for the {name} scale is required")
            if v <= 0:
                raise ValueError("scales must be positive")
            h.append(np.log(v))
        else:
            if beta1 is None:
                raise ValueError("beta1 is required for the parametric model")
            h.append(beta1)
    return np.array(h)


def find_mode(spec, gamma=None, xi=None, beta1=None, x0=None, hyper=None, max_iter=100):
    """
    Newton iterations for the latent mode at fixed hyperparameters. ``spec``
    is a `ModelSpec` or any object exposing ``dim``, ``evaluate(x, h)``,
    ``initial_latent()`` and ``factor(H)``.
    """
    model = _as_model(spec)
    h = np.asarray(hyper, dtype=float) if hyper is not None else (
        _hyper_from(model, gamma, xi, beta1) if hasattr(model, "_hyper_kind") else np.zeros(0)
    )
    x = np.array(model.initial_latent() if x0 is None else x0, dtype=float)
    value, g, H = model.evaluate(x, h)
    if not np.isfinite(value):
        raise ConvergenceError("log joint is not finite at the starting point", x)
    for it in range(1, max_iter + 1):
        fac = None
        for damp in (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0):
            try:
                Hd = H if damp == 0 else H + damp * np.eye(len(x)) * max(1.0, np.abs(H).max())
                fac = model.factor(Hd)
                break
            except (LinAlgError, ValueError):
                continue
        if fac is None:
            raise ConvergenceError("negative Hessian is not positive definite", x)
        step = fac.solve(g)
        t = 1.0
        for _ in range(40):
            xn = x + t * step
            vn, gn, Hn = model.evaluate(xn, h)
            if np.isfinite(vn) and vn >= value - 1e-12 * max(1.0, abs(value)):
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed", x)
        x, value, g, H = xn, vn, gn, Hn
        gmax = float(np.max(np.abs(g))) if len(g) else 0.0
        if gmax < GRAD_TOL:
            fac = model.factor(H)
            return GaussianApprox(x, H, fac.logdet, value, h, gmax, it)
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", x)


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class HyperGrid:
    names: list
    points: np.ndarray
    log_weights: np.ndarray
    weights: np.ndarray
    approx: list
    mode_index: int

    def __len__(self):
        return len(self.weights)


def _safe_mode(model, h, x0):
    try:
        return find_mode(model, hyper=h, x0=x0)
    except ConvergenceError:
        if x0 is None:
            raise
        return find_mode(model, hyper=h)


def hyper_posterior(spec, step=0.5, threshold=3.0, max_points=400, h0=None):
    """
    Lattice over the hyperparameters around the mode of their Laplace
    posterior. Scale hyperparameters step by ``step`` on the log scale;
    ``beta1`` steps by ``step`` times its approximate posterior sd.
    """
    model = _as_model(spec)
    d = model.n_hyper
    if d == 0:
        a = find_mode(model, hyper=np.zeros(0))
        return HyperGrid([], np.zeros((1, 0)), np.array([a.log_weight]), np.ones(1), [a], 0)

    cache = {}

    def evaluate(h, x0=None):
        key = tuple(np.round(h, 12))
        if key not in cache:
            try:
                a = _safe_mode(model, h, x0)
                cache[key] = (a.log_weight + model.hyper_log_prior(h), a)
            except (ConvergenceError, FloatingPointError) as e:
                log.warning("dropping hyper point %s: %s", h, e)
                cache[key] = (-np.inf, None)
        return cache[key]

    h = np.asarray(model.initial_hyper() if h0 is None else h0, dtype=float)
    best = evaluate(h)
    for _ in range(30):
        h_old = h.copy()
        for j in range(d):
            x0 = best[1].mode if best[1] is not None else None

            def neg(v, j=j):
                hh = h.copy()
                hh[j] = v
                return -evaluate(hh, x0)[0]

            res = minimize_scalar(neg, bounds=(h[j] - 4.0, h[j] + 4.0), method="bounded",
                                  options={"xatol": 1e-5})
            if -res.fun >= best[0]:
                h[j] = res.x
                best = evaluate(h)
        if np.max(np.abs(h - h_old)) < 1e-4:
            break
    if best[1] is None:
        raise ConvergenceError("no hyperparameter value gave a usable mode")

    steps = np.full(d, float(step))
    for j, (kind, _) in enumerate(model._hyper_kind):
        if kind != "scale":
            e = 1e-2
            hp, hm = h.copy(), h.copy()
            hp[j] += e
            hm[j] -= e
            d2 = (evaluate(hp, best[1].mode)[0] - 2 * best[0] + evaluate(hm, best[1].mode)[0]) / e**2
            sd = 1.0 / np.sqrt(-d2) if d2 < 0 else 1.0
            steps[j] = step * sd

    pts = {(0,) * d: best}
    queue = deque([(0,) * d])
    top = best[0]
    while queue and len(pts) < max_points:
        k = queue.popleft()
        parent = pts[k][1]
        for j in range(d):
            for s in (-1, 1):
                nk = list(k)
                nk[j] += s
                nk = tuple(nk)
                if nk in pts:
                    continue
                lw, a = evaluate(h + np.array(nk) * steps, parent.mode)
                if a is None or lw < top - threshold:
                    continue
                pts[nk] = (lw, a)
                top = max(top, lw)
                queue.append(nk)
    keys = [k for k, v in pts.items() if v[0] >= top - threshold]
    lw = np.array([pts[k][0] for k in keys])
    w = np.exp(lw - lw.max())
    w /= w.sum()
    points = np.array([h + np.array(k) * steps for k in keys])
    return HyperGrid(list(model.hyper_names), points, lw, w,
                     [pts[k][1] for k in keys], int(np.argmax(lw)))


# ---------------------------------------------------------------------------
# latent marginals
# ---------------------------------------------------------------------------


class MarginalSummary(tuple):
    """``(median, q025, q975)`` of a latent coordinate."""

    __slots__ = ()

    def __new__(cls, median, q025, q975):
        return super().__new__(cls, (float(median), float(q025), float(q975)))

    median = property(lambda s: s[0])
    q025 = property(lambda s: s[1])
    q975 = property(lambda s: s[2])


def _logdet_without(model, H, j):
    keep = np.r_[0:j, j + 1 : len(H)]
    Hr = H[np.ix_(keep, keep)]
    if len(Hr) == 0:
        return 0.0
    try:
        return _Factor(Hr, model.band).logdet
    except LinAlgError:
        return np.nan


class _Component:
    """Normalized log-density of one coordinate under one hyper point."""

    def __init__(self, v, logf):
        order = np.argsort(v)
        v, logf = v[order], logf[order]
        ok = np.isfinite(logf)
        v, logf = v[ok], logf[ok]
        self.lo, self.hi = v[0], v[-1]
        spline = CubicSpline(v, logf - logf.max())
        fine = np.linspace(self.lo, self.hi, 2001)
        dens = np.exp(spline(fine))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
        self.fine, self.cdf = fine, cdf / cdf[-1]

    def __call__(self, t):
        return np.interp(t, self.fine, self.cdf, left=0.0, right=1.0)


def _laplace_component(model, a, j, z_step=0.5, z_max=15.0, drop=14.0):
    S = a.covariance()
    S = np.atleast_2d(S)
    sd = float(np.sqrt(S[j, j]))
    shift = S[:, j] / S[j, j]
    xs = a.mode

    def logf(z):
        v = xs[j] + z * sd
        x = xs + shift * (v - xs[j])
        val, _, H = model.evaluate(x, a.hyper)
        if not np.isfinite(val):
            return -np.inf
        return val - 0.5 * _logdet_without(model, H, j)

    zs = list(np.arange(-3.0, 3.0 + 1e-9, z_step))
    fs = [logf(z) for z in zs]
    top = max(fs)
    while zs[0] > -z_max and fs[0] > top - drop:
        zs.insert(0, zs[0] - 1.0)
        fs.insert(0, logf(zs[0]))
    while zs[-1] < z_max and fs[-1] > top - drop:
        zs.append(zs[-1] + 1.0)
        fs.append(logf(zs[-1]))
    zs = np.array(zs)
    return _Component(xs[j] + zs * sd, np.array(fs))


class _GaussComponent:
    def __init__(self, mean, sd):
        self.mean, self.sd = mean, sd
        self.lo, self.hi = mean - 12 * sd, mean + 12 * sd

    def __call__(self, t):
        return ndtr((np.asarray(t) - self.mean) / self.sd)


def _mixture_quantiles(components, weights, probs=(0.5, 0.025, 0.975)):
    lo = min(c.lo for c in components)
    hi = max(c.hi for c in components)

    def cdf(t):
        return sum(w * c(t) for w, c in zip(weights, components))

    out = []
    for p in probs:
        out.append(brentq(lambda t: cdf(t) - p, lo, hi, xtol=1e-12, rtol=1e-12))
    return out


def _coordinate(model, i, which):
    if which == "theta":
        idx = model.ti
    elif which == "alpha":
        if model.ai is None:
            raise ValueError("alpha is only present in the adaptive model")
        idx = model.ai
    else:
        raise ValueError("which must be 'theta' or 'alpha'")
    if not 0 <= i < len(idx):
        raise IndexError(f"{which} index {i} out of range 0..{len(idx) - 1}")
    return int(idx[i])


def marginal_latent(spec, grid, i, which="theta", strategy="laplace"):
    """Median and 95% interval of ``theta_i`` or ``alpha_i`` mixed over the hyper grid."""
    model = _as_model(spec)
    j = _coordinate(model, i, which)
    comps = []
    for a in grid.approx:
        if strategy == "gaussian":
            S = np.atleast_2d(a.covariance())
            comps.append(_GaussComponent(a.mode[j], float(np.sqrt(S[j, j]))))
        elif strategy == "laplace":
            comps.append(_laplace_component(model, a, j))
        else:
            raise ValueError("strategy must be 'laplace' or 'gaussian'")
    return MarginalSummary(*_mixture_quantiles(comps, grid.weights))


def inla_fit(spec, strategy="laplace", step=0.5, threshold=3.0, grid=None):
    """Per-cell summaries of N_e (and beta for the adaptive model) by nested Laplace."""
    model = _as_model(spec)
    grid = grid or hyper_posterior(model, step=step, threshold=threshold)
    st = model.spec.stats

    def field(which, n):
        q = np.array([marginal_latent(model, grid, i, which, strategy) for i in range(n)])
        return np.exp(q.T)

    ne = field("theta", st.M)
    kw = {}
    if model.ai is not None:
        b = field("alpha", st.M_prime)
        kw = dict(beta_median=b[0], beta_q025=b[1], beta_q975=b[2])
    out = PosteriorSummary(model.spec.grid, ne[0], ne[1], ne[2], engine="laplace", **kw)
    out.hyper = grid
    return out
