"""
Binned Poisson-process likelihoods for the sampling times.

Adaptive model: rate ``exp(alpha_i + theta_i)`` on cell i. Parametric model:
rate ``exp(beta0 + beta1 * theta_i)``. Both read only the first ``M'`` cells.
"""
from typing import NamedTuple

import numpy as np

__all__ = [
    "ParPrefParams",
    "adapref_loglik",
    "adapref_grad",
    "adapref_pointwise",
    "parpref_loglik",
    "parpref_grad",
    "parpref_pointwise",
]


class ParPrefParams(NamedTuple):
    beta0: float
    beta1: float


def _cells(stats, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != stats.M:
        raise ValueError(f"theta has length {theta.shape[-1]}, grid has {stats.M} cells")
    m = stats.M_prime
    return theta[..., :m], stats.samp_count[:m], stats.widths[:m]


def adapref_pointwise(stats, theta, alpha):
    th, count, width = _cells(stats, theta)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape[-1] != stats.M_prime:
        raise ValueError(f"alpha has length {alpha.shape[-1]}, expected M'={stats.M_prime}")
    eta = alpha + th
    return count * (eta + np.log(width)) - np.exp(eta) * width


def adapref_loglik(stats, theta, alpha):
    return float(np.sum(adapref_pointwise(stats, theta, alpha)))


def adapref_grad(stats, theta, alpha):
    """Returns ``(d_theta, d_alpha)``; ``d_theta`` is zero beyond cell ``M'``."""
    th, count, width = _cells(stats, theta)
    resid = count - np.exp(np.asarray(alpha, dtype=float) + th) * width
    d_theta = np.zeros(stats.M)
    d_theta[: stats.M_prime] = resid
    return d_theta, resid.copy()


def parpref_pointwise(stats, theta, params):
    th, count, width = _cells(stats, theta)
    b0, b1 = params
    eta = b0 + b1 * th
    return count * (eta + np.log(width)) - np.exp(eta) * width


def parpref_loglik(stats, theta, params):
    return float(np.sum(parpref_pointwise(stats, theta, params)))


def parpref_grad(stats, theta, params):
    """Returns ``(d_theta, d_beta0, d_beta1)``."""
    th, count, width = _cells(stats, theta)
    b0, b1 = params
    resid = count - np.exp(b0 + b1 * th) * width
    d_theta = np.zeros(stats.M)
    d_theta[: stats.M_prime] = b1 * resid
    return d_theta, float(resid.sum()), float(np.dot(resid, th))
