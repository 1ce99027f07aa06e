"""
Markov random field priors on a latent log-field ``x``.

Order-p differences of ``x`` are Gaussian given their scales. For p = 2 the
first difference ``x_2 - x_1`` is a boundary term with variance scaled by
``a_1 = 2**-0.5``. Together with ``x_1 ~ N(mu, sigma1**2)`` the increments
determine the field one-to-one, so a field of length L has L - 1 increments.

GMRF: every increment shares the global scale ``gamma``.
HSMRF: increment j has its own scale ``tau_j ~ C+(0, gamma)`` and
``gamma ~ C+(0, zeta)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

LOG_2PI = np.log(2.0 * np.pi)

__all__ = [
    "FieldPrior",
    "GmrfTerms",
    "HsmrfTerms",
    "increment_weights",
    "differences",
    "integrate",
    "integrate_adjoint",
    "difference_matrix",
    "gmrf_logdensity",
    "hsmrf_logdensity",
    "hyper_logdensity",
    "hyper_dlog",
    "gmrf_precision",
    "sample_field",
]


@dataclass(frozen=True)
class FieldPrior:
    """
    Prior specification for one latent field.

    ``zeta`` is the hyperprior scale of the global scale (half-Cauchy), or
    ignored when ``hyper_family == "gamma"`` (then ``gamma_shape`` /
    ``gamma_rate`` apply). ``fixed_scale`` pins the global scale and drops
    its hyperprior.
    """

    kind: str = "gmrf"
    order: int = 1
    zeta: float = 0.05
    mu: float = 0.0
    sigma1: float = 100.0
    hyper_family: str = "halfcauchy"
    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    fixed_scale: float | None = None

    def __post_init__(self):
        if self.kind not in ("gmrf", "hsmrf"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.order not in (1, 2):
            raise ValueError("only orders 1 and 2 are supported")
        if self.zeta <= 0 or self.sigma1 <= 0:
            raise ValueError("zeta and sigma1 must be positive")
        if self.hyper_family not in ("halfcauchy", "gamma"):
            raise ValueError(f"unknown hyperprior family {self.hyper_family!r}")
        if self.fixed_scale is not None and self.fixed_scale <= 0:
            raise ValueError("fixed_scale must be positive")

    @classmethod
    def parse(cls, name, **kwargs):
        """``"gmrf1"``, ``"hsmrf2"`` and so on."""
        name = name.lower()
        for kind in ("hsmrf", "gmrf"):
            if name.startswith(kind) and name[len(kind):] in ("1", "2"):
                return cls(kind=kind, order=int(name[len(kind):]), **kwargs)
        raise ValueError(f"cannot parse prior {name!r}; expected gmrf1, gmrf2, hsmrf1 or hsmrf2")

    @property
    def label(self):
        return f"{self.kind}{self.order}"

    def hyper(self, s):
        return hyper_logdensity(
            s, self.hyper_family, scale=self.zeta, shape=self.gamma_shape, rate=self.gamma_rate
        )

    def hyper_dlog(self, s):
        return hyper_dlog(
            s, self.hyper_family, scale=self.zeta, shape=self.gamma_shape, rate=self.gamma_rate
        )


# ---------------------------------------------------------------------------
# difference operators
# ---------------------------------------------------------------------------


def increment_weights(length, order):
    """Variance multipliers for the L - 1 increments."""
    c = np.ones(max(length - 1, 0))
    if order == 2 and length > 1:
        c[0] = 2.0 ** -0.5
    return c


def differences(x, order):
    x = np.asarray(x, dtype=float)
    if order == 1:
        return np.diff(x)
    return np.concatenate([x[1:2] - x[:1], np.diff(x, 2)])


def integrate(x1, d, order):
    """Inverse of `differences`: rebuild the field from ``x_1`` and increments."""
    steps = d if order == 1 else np.cumsum(d)
    return x1 + np.concatenate([[0.0], np.cumsum(steps)])


def integrate_adjoint(g, order):
    """Transpose of the increment-to-field map; returns ``(dx1, dd)``."""
    g = np.asarray(g, dtype=float)
    tail = np.cumsum(g[:0:-1])[::-1]
    if order == 2:
        tail = np.cumsum(tail[::-1])[::-1]
    return float(g.sum()), tail


def difference_matrix(length, order):
    """Sparse (L-1, L) matrix D with ``D @ x == differences(x, order)``."""
    if length < 2:
        return sp.csr_matrix((0, length))
    first = sp.diags([-1.0, 1.0], [0, 1], shape=(length - 1, length)).tocsr()
    if order == 1 or length == 2:
        return first
    second = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(length - 2, length))
    return sp.vstack([first[:1], second]).tocsr()


def gmrf_precision(length, order, gamma, sigma1=100.0, include_first=True):
    """Precision of the GMRF prior: ``D' diag(1/(c gamma^2)) D`` (+ first-element term)."""
    D = difference_matrix(length, order)
    w = 1.0 / (increment_weights(length, order) * gamma**2)
    Q = (D.T @ sp.diags(w) @ D).tocsr()
    if include_first:
        Q = Q + sp.csr_matrix(([1.0 / sigma1**2], ([0], [0])), shape=(length, length))
    return Q


# ---------------------------------------------------------------------------
# log-densities
# ---------------------------------------------------------------------------


class GmrfTerms(NamedTuple):
    value: float
    grad_x: np.ndarray
    grad_log_gamma: float


class HsmrfTerms(NamedTuple):
    gaussian: float
    local: float
    global_: float
    first: float
    value: float
    grad_x: np.ndarray
    grad_log_tau: np.ndarray
    grad_log_gamma: float


def _first_term(x, prior):
    z = (x[0] - prior.mu) / prior.sigma1
    return -0.5 * LOG_2PI - np.log(prior.sigma1) - 0.5 * z * z, -z / prior.sigma1


def _gaussian_increments(x, var, order):
    d = differences(x, order)
    value = -0.5 * np.sum(LOG_2PI + np.log(var) + d * d / var)
    r = d / var
    # gradient of -0.5 sum r_j d_j in x is -D' r
    gx = np.zeros_like(x)
    if order == 1:
        gx[:-1] += r
        gx[1:] -= r
    else:
        gx[0] += r[0]
        gx[1] -= r[0]
        s = r[1:]
        gx[:-2] -= s
        gx[1:-1] += 2.0 * s
        gx[2:] -= s
    return float(value), gx, d


def gmrf_logdensity(x, gamma, prior, include_first=True):
    """
    Gaussian log-density of the increments of ``x`` with scale ``gamma``,
    plus ``x_1 ~ N(mu, sigma1^2)`` when ``include_first``.
    """
    x = np.asarray(x, dtype=float)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    c = increment_weights(len(x), prior.order)
    var = c * gamma**2
    value, gx, d = _gaussian_increments(x, var, prior.order)
    glog = float(np.sum(-1.0 + d * d / var))
    if include_first:
        f, gf = _first_term(x, prior)
        value += f
        gx[0] += gf
    return GmrfTerms(value, gx, glog)


def hsmrf_logdensity(x, tau, gamma, prior, include_first=True):
    """
    Horseshoe MRF log-density, split into its Gaussian increment part, the
    local-scale terms ``tau_j | gamma``, the global term ``gamma | zeta`` and
    the first-element term. Gradients are with respect to ``x``, ``log tau``
    and ``log gamma``.
    """
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (len(x) - 1,):
        raise ValueError(f"need {len(x) - 1} local scales, got {tau.shape}")
    if gamma <= 0 or np.any(tau <= 0):
        raise ValueError("scales must be positive")
    c = increment_weights(len(x), prior.order)
    var = c * tau**2
    gaussian, gx, d = _gaussian_increments(x, var, prior.order)
    g_log_tau = -1.0 + d * d / var
    local = float(np.sum(hyper_logdensity(tau, "halfcauchy", scale=gamma)))
    u = (tau / gamma) ** 2
    g_log_tau += -2.0 * u / (1.0 + u)
    g_log_gamma = float(np.sum(-1.0 + 2.0 * u / (1.0 + u)))
    if prior.fixed_scale is None:
        global_ = float(prior.hyper(gamma))
        g_log_gamma += float(prior.hyper_dlog(gamma))
    else:
        global_ = 0.0
    first = 0.0
    if include_first:
        first, gf = _first_term(x, prior)
        gx[0] += gf
    total = gaussian + local + global_ + first
    return HsmrfTerms(gaussian, local, global_, first, total, gx, g_log_tau, g_log_gamma)


def hyper_logdensity(s, family="halfcauchy", scale=1.0, shape=1.0, rate=1.0):
    """Half-Cauchy ``C+(0, scale)`` or ``Gamma(shape, rate)`` log-density at ``s``."""
    s = np.asarray(s, dtype=float)
    if family == "halfcauchy":
        out = np.log(2.0 / np.pi) - np.log(scale) - np.log1p((s / scale) ** 2)
    elif family == "gamma":
        with np.errstate(divide="ignore"):
            out = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(s) - rate * s
    else:
        raise ValueError(f"unknown hyperprior family {family!r}")
    return out if out.ndim else float(out)


def hyper_dlog(s, family="halfcauchy", scale=1.0, shape=1.0, rate=1.0):
    """Derivative of `hyper_logdensity` with respect to ``log s``."""
    s = np.asarray(s, dtype=float)
    if family == "halfcauchy":
        u = (s / scale) ** 2
        out = -2.0 * u / (1.0 + u)
    else:
        out = (shape - 1.0) - rate * s
    return out if out.ndim else float(out)


def sample_field(prior, length, rng, gamma=None, tau=None, x1=None):
    """
    Draw a field from the prior. Missing scales are drawn from their
    hyperpriors; ``x1`` defaults to a draw from ``N(mu, sigma1^2)``.
    """
    rng = np.random.default_rng(rng)
    if gamma is None:
        gamma = prior.fixed_scale
    if gamma is None:
        if prior.hyper_family == "halfcauchy":
            gamma = abs(prior.zeta * rng.standard_cauchy())
        else:
            gamma = rng.gamma(prior.gamma_shape, 1.0 / prior.gamma_rate)
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    c = increment_weights(length, prior.order)
    if prior.kind == "gmrf":
        scale = np.full(length - 1, float(gamma))
    else:
        scale = np.abs(gamma * rng.standard_cauchy(length - 1)) if tau is None else np.asarray(tau)
    d = np.sqrt(c) * scale * rng.standard_normal(length - 1)
    if x1 is None:
        x1 = prior.mu + prior.sigma1 * rng.standard_normal()
    return integrate(x1, d, prior.order)
