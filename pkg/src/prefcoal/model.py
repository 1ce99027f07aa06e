"""
Hierarchical model assembly: likelihood terms plus field priors, written as a
log-density over one unconstrained parameter vector.

Layout of the unconstrained vector ``z`` (blocks in this order):

* theta block, then alpha block (adaptive model only). Each field block is

  - non-centered: ``[x_1, eta_1..eta_{L-1}, log tau_1..log tau_{L-1} (HSMRF), log gamma]``
    with increments ``sqrt(c_j) * scale_j * eta_j``;
  - centered: ``[x_1..x_L, log tau (HSMRF), log gamma]``.

  ``log gamma`` is present unless the prior fixes the global scale or the
  field has a single cell.
* ``beta0, beta1`` (parametric model only; log-transformed when constrained
  to be nonnegative).

Positive scales live on the log scale and the log-Jacobians are included.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coalescent, sampling
from .genealogy import Grid, GridStats
from .priors import (
    LOG_2PI,
    FieldPrior,
    differences,
    hyper_logdensity,
    increment_weights,
    integrate,
    integrate_adjoint,
)

LIKELIHOODS = ("nopref", "parpref", "adapref")

__all__ = ["ModelSpec", "Posterior", "log_posterior", "LIKELIHOODS"]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    One member of the model family: which likelihood terms are active and
    which priors sit on theta (log N_e) and alpha (log beta).
    """

    stats: GridStats
    likelihood: str = "adapref"
    theta_prior: FieldPrior = field(default_factory=FieldPrior)
    alpha_prior: FieldPrior | None = field(default_factory=FieldPrior)
    grid: Grid | None = None
    parameterization: str = "noncentered"
    beta_prior_sd: float = 10.0
    beta_nonnegative: bool = False

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.likelihood == "adapref" and self.alpha_prior is None:
            raise ValueError("the adaptive model needs a prior on alpha")
        if self.parameterization not in ("centered", "noncentered"):
            raise ValueError("parameterization must be 'centered' or 'noncentered'")

    @property
    def label(self):
        s = f"{self.likelihood}-{self.theta_prior.label}"
        if self.likelihood == "adapref":
            s += f"-{self.alpha_prior.label}"
        return s


class _FieldBlock:
    def __init__(self, name, length, prior, centered):
        self.name = name
        self.L = length
        self.prior = prior
        self.centered = centered
        self.n_inc = length - 1
        self.sqrt_c = np.sqrt(increment_weights(length, prior.order))
        self.hs = prior.kind == "hsmrf"
        self.free_global = prior.fixed_scale is None and self.n_inc > 0
        self.fixed_global = prior.fixed_scale is not None
        self.size = length + (self.n_inc if self.hs else 0) + int(self.free_global)

    def names(self):
        if self.centered:
            out = [f"{self.name}[{i + 1}]" for i in range(self.L)]
        else:
            out = [f"{self.name}[1]"] + [f"{self.name}_eta[{i + 1}]" for i in range(self.n_inc)]
        if self.hs:
            out += [f"{self.name}_log_tau[{i + 1}]" for i in range(self.n_inc)]
        if self.free_global:
            out.append(f"{self.name}_log_gamma")
        return out

    def _scales(self, zb):
        L, k = self.L, self.n_inc
        gamma = float(np.exp(zb[-1])) if self.free_global else (self.prior.fixed_scale or 1.0)
        tau = np.exp(zb[L : L + k]) if self.hs else None
        return tau, gamma

    def field(self, zb):
        if self.centered:
            return zb[: self.L]
        tau, gamma = self._scales(zb)
        scale = tau if self.hs else gamma
        d = self.sqrt_c * scale * zb[1 : self.L]
        return integrate(zb[0], d, self.prior.order)

    def prior_terms(self, zb, x, gx):
        """Log prior (with Jacobians) and gradient in ``zb`` given likelihood gradient ``gx``."""
        pr = self.prior
        L, k = self.L, self.n_inc
        tau, gamma = self._scales(zb)
        g = np.zeros(self.size)
        zf = (x[0] - pr.mu) / pr.sigma1
        value = -0.5 * LOG_2PI - np.log(pr.sigma1) - 0.5 * zf * zf
        g_log_gamma = 0.0
        if self.centered:
            d = differences(x, pr.order)
            scale = tau if self.hs else gamma
            var = (self.sqrt_c * scale) ** 2
            r = d / var
            value += -0.5 * np.sum(LOG_2PI + np.log(var) + d * r)
            gxp = np.zeros(L)
            if k:
                # -D' r
                if pr.order == 1:
                    gxp[:-1] += r
                    gxp[1:] -= r
                else:
                    gxp[0] += r[0]
                    gxp[1] -= r[0]
                    s = r[1:]
                    gxp[:-2] -= s
                    gxp[1:-1] += 2.0 * s
                    gxp[2:] -= s
            gxp[0] -= zf / pr.sigma1
            g[:L] = gx + gxp
            g_scale = -1.0 + d * r
        else:
            eta = zb[1:L]
            value += -0.5 * np.sum(LOG_2PI + eta * eta)
            gx1, gd = integrate_adjoint(gx, pr.order)
            scale = tau if self.hs else gamma
            g[0] = gx1 - zf / pr.sigma1
            g[1:L] = gd * self.sqrt_c * scale - eta
            g_scale = gd * self.sqrt_c * scale * eta
        if self.hs:
            u = (tau / gamma) ** 2
            value += float(np.sum(hyper_logdensity(tau, "halfcauchy", scale=gamma)))
            value += float(np.sum(np.log(tau)))
            g[L : L + k] = g_scale - 2.0 * u / (1.0 + u) + 1.0
            g_log_gamma += float(np.sum(-1.0 + 2.0 * u / (1.0 + u)))
        else:
            g_log_gamma += float(np.sum(g_scale))
        if self.free_global:
            value += pr.hyper(gamma) + np.log(gamma)
            g[-1] = g_log_gamma + pr.hyper_dlog(gamma) + 1.0
        return float(value), g

    def initial(self, x, scale0=0.1, rng=None, jitter=0.0):
        """Map a field and scales to the block layout; ``jitter`` perturbs log-scales."""
        zb = np.zeros(self.size)
        L, k = self.L, self.n_inc
        noise = (lambda n: rng.uniform(-jitter, jitter, n)) if jitter and rng is not None \
            else (lambda n: np.zeros(n))
        log_tau = np.log(scale0) + noise(k)
        log_gamma = np.log(scale0) + noise(1)[0]
        if self.fixed_global:
            log_gamma = np.log(self.prior.fixed_scale)
        if self.centered:
            zb[:L] = x
        elif k:
            zb[0] = x[0]
            scale = np.exp(log_tau) if self.hs else np.exp(log_gamma)
            zb[1:L] = differences(x, self.prior.order) / (self.sqrt_c * scale)
        else:
            zb[0] = x[0]
        if self.hs:
            zb[L : L + k] = log_tau
        if self.free_global:
            zb[-1] = log_gamma
        return zb


def _fill_smooth(raw, window=5):
    """Forward-fill NaNs (back-fill a leading gap) then moving-average."""
    raw = np.asarray(raw, dtype=float)
    if np.all(np.isnan(raw)):
        return np.zeros_like(raw)
    out = raw.copy()
    first = np.flatnonzero(~np.isnan(out))[0]
    out[:first] = out[first]
    for i in range(first + 1, len(out)):
        if np.isnan(out[i]):
            out[i] = out[i - 1]
    if len(out) >= window:
        pad = window // 2
        padded = np.concatenate([np.full(pad, out[0]), out, np.full(pad, out[-1])])
        out = np.convolve(padded, np.ones(window) / window, mode="valid")
    return out


class Posterior:
    """Unnormalized log posterior of a `ModelSpec` over the unconstrained vector."""

    def __init__(self, spec):
        self.spec = spec
        st = spec.stats
        centered = spec.parameterization == "centered"
        self.theta_block = _FieldBlock("theta", st.M, spec.theta_prior, centered)
        self.blocks = [self.theta_block]
        self.alpha_block = None
        if spec.likelihood == "adapref":
            self.alpha_block = _FieldBlock("alpha", st.M_prime, spec.alpha_prior, centered)
            self.blocks.append(self.alpha_block)
        self.slices = []
        start = 0
        for b in self.blocks:
            self.slices.append(slice(start, start + b.size))
            start += b.size
        self.beta_slice = None
        if spec.likelihood == "parpref":
            self.beta_slice = slice(start, start + 2)
            start += 2
        self.dim = start

    @property
    def names(self):
        out = []
        for b in self.blocks:
            out += b.names()
        if self.beta_slice is not None:
            pre = "log_" if self.spec.beta_nonnegative else ""
            out += [pre + "beta0", pre + "beta1"]
        return out

    def unpack(self, z):
        """Fields and parameters on the natural scale for one vector ``z``."""
        z = np.asarray(z, dtype=float)
        out = {"theta": self.theta_block.field(z[self.slices[0]])}
        if self.alpha_block is not None:
            out["alpha"] = self.alpha_block.field(z[self.slices[1]])
        for b, sl in zip(self.blocks, self.slices):
            tau, gamma = b._scales(z[sl])
            out[f"{b.name}_gamma"] = gamma
            if tau is not None:
                out[f"{b.name}_tau"] = tau
        if self.beta_slice is not None:
            b = z[self.beta_slice]
            out["beta"] = np.exp(b) if self.spec.beta_nonnegative else b.copy()
        return out

    def fields(self, draws):
        """theta (and alpha) for a (draws, dim) array."""
        draws = np.atleast_2d(draws)
        theta = np.array([self.theta_block.field(z[self.slices[0]]) for z in draws])
        alpha = None
        if self.alpha_block is not None:
            alpha = np.array([self.alpha_block.field(z[self.slices[1]]) for z in draws])
        return theta, alpha

    def __call__(self, z):
        return self.log_density(z)

    def log_density(self, z):
        """Returns ``(value, gradient)``; a non-finite value comes back as ``-inf``."""
        z = np.asarray(z, dtype=float)
        st = self.spec.stats
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            theta = self.theta_block.field(z[self.slices[0]])
            value = coalescent.coalescent_loglik(st, theta)
            g_theta = coalescent.coalescent_grad(st, theta)
            grad = np.zeros(self.dim)
            alpha = None
            if self.alpha_block is not None:
                alpha = self.alpha_block.field(z[self.slices[1]])
                value += sampling.adapref_loglik(st, theta, alpha)
                dth, dal = sampling.adapref_grad(st, theta, alpha)
                g_theta = g_theta + dth
            if self.beta_slice is not None:
                value, g_theta = self._beta_terms(z, theta, value, g_theta, grad)
            v, g = self.theta_block.prior_terms(z[self.slices[0]], theta, g_theta)
            value += v
            grad[self.slices[0]] = g
            if alpha is not None:
                v, g = self.alpha_block.prior_terms(z[self.slices[1]], alpha, dal)
                value += v
                grad[self.slices[1]] = g
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return float(value), grad

    def _beta_terms(self, z, theta, value, g_theta, grad):
        st = self.spec.stats
        u = z[self.beta_slice]
        sd = self.spec.beta_prior_sd
        if self.spec.beta_nonnegative:
            b = np.exp(u)
        else:
            b = u
        value += sampling.parpref_loglik(st, theta, b)
        dth, db0, db1 = sampling.parpref_grad(st, theta, b)
        db = np.array([db0, db1]) - b / sd**2
        value += float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * (b / sd) ** 2))
        if self.spec.beta_nonnegative:
            # half-normal support doubles the density; log-Jacobian adds u
            value += 2.0 * np.log(2.0) + float(np.sum(u))
            db = db * b + 1.0
        grad[self.beta_slice] = db
        return value, g_theta + dth

    def pointwise_loglik(self, draws):
        """(draws, observations) matrix: one column per coalescent event, then one per sampled cell."""
        draws = np.atleast_2d(draws)
        st = self.spec.stats
        theta, alpha = self.fields(draws)
        cols = [coalescent.coalescent_pointwise(st, theta)]
        if alpha is not None:
            cols.append(sampling.adapref_pointwise(st, theta, alpha))
        elif self.beta_slice is not None:
            b = draws[:, self.beta_slice]
            if self.spec.beta_nonnegative:
                b = np.exp(b)
            cols.append(sampling.parpref_pointwise(st, theta, (b[:, :1], b[:, 1:])))
        return np.concatenate(cols, axis=1)

    def initial_point(self, rng=None, jitter=0.2, scale0=0.1):
        """
        Start from a smoothed per-cell MLE of theta, alpha matched to the
        sampling counts, all scales at ``scale0``. ``jitter`` adds uniform
        noise of that half-width to the field values, log-scales and beta
        before they are mapped to the unconstrained layout, so starts stay
        near the MLE whatever the prior order.
        """
        st = self.spec.stats
        rng = np.random.default_rng(rng) if jitter and rng is not None else None

        def noise(n):
            return rng.uniform(-jitter, jitter, n) if rng is not None else np.zeros(n)

        with np.errstate(divide="ignore", invalid="ignore"):
            raw = np.where(
                (st.coal_events > 0) & (st.coal_exposure > 0),
                np.log(st.coal_exposure / st.coal_events),
                np.nan,
            )
        theta0 = _fill_smooth(raw)
        z = np.zeros(self.dim)
        z[self.slices[0]] = self.theta_block.initial(theta0 + noise(st.M), scale0, rng, jitter)
        m = st.M_prime
        if self.alpha_block is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                raw_a = np.where(
                    st.samp_count[:m] > 0,
                    np.log(st.samp_count[:m] / (st.widths[:m] * np.exp(theta0[:m]))),
                    np.nan,
                )
            alpha0 = _fill_smooth(raw_a) + noise(m)
            z[self.slices[1]] = self.alpha_block.initial(alpha0, scale0, rng, jitter)
        if self.beta_slice is not None:
            b0 = np.log(st.samp_count[:m].sum() / np.sum(st.widths[:m] * np.exp(theta0[:m])))
            b = np.array([b0, 1.0])
            if self.spec.beta_nonnegative:
                b = np.log(np.maximum(b, 1e-3))
            z[self.beta_slice] = b + noise(2)
        return z


def log_posterior(spec, z):
    """``(value, gradient)`` of the log posterior of ``spec`` at ``z``."""
    return Posterior(spec).log_density(z)
