"""Discretized heterochronous-coalescent log-likelihood on a grid of cells."""
import numpy as np

__all__ = ["coalescent_loglik", "coalescent_grad", "coalescent_pointwise", "coalescent_neg_hessian"]


def _check(stats, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (stats.M,):
        raise ValueError(f"theta has length {theta.size}, grid has {stats.M} cells")
    return theta


def coalescent_loglik(stats, theta, include_constant=True):
    """
    ``sum_i [-events_i * theta_i - exposure_i * exp(-theta_i)]`` plus the
    theta-free ``sum_k log C_{0,k}`` unless ``include_constant`` is False.
    """
    theta = _check(stats, theta)
    value = -np.dot(stats.coal_events, theta) - np.dot(stats.coal_exposure, np.exp(-theta))
    if include_constant:
        value += stats.log_factor_total
    return float(value)


def coalescent_grad(stats, theta):
    theta = _check(stats, theta)
    return -stats.coal_events + stats.coal_exposure * np.exp(-theta)


def coalescent_neg_hessian(stats, theta):
    """Diagonal of the negative Hessian in theta."""
    theta = _check(stats, theta)
    return stats.coal_exposure * np.exp(-theta)


def coalescent_pointwise(stats, theta):
    """
    One log-density term per coalescent event; the terms sum to
    `coalescent_loglik`. Accepts a single theta or a (draws, M) array.
    """
    theta = np.asarray(theta, dtype=float)
    inv = np.exp(-theta)
    return (
        stats.event_log_factor
        - np.take(theta, stats.event_cell, axis=-1)
        - inv @ stats.event_exposure.T
    )
