"""One-unit ICA with a reference signal.

Maximises the log-cosh negentropy approximation of ``y = w^T z`` over whitened mixtures
``z`` subject to ``closeness(y, r) <= xi``, using an augmented-Lagrangian Newton iteration.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from dnt.config import ICARConfig
from dnt.features import FeatureStack, HeatMap, InputError, channel_mean, minmax, resize_map

log = logging.getLogger(__name__)


class DegenerateInputError(InputError):
    pass


@dataclass
class MixedSignals:
    X: np.ndarray  # C x P
    spatial_dims: tuple[int, int]


@dataclass
class ICARResult:
    v: HeatMap
    w: np.ndarray
    iterations_used: int
    converged: bool
    y: np.ndarray  # extracted signal before normalization, positively correlated with r


@functools.lru_cache(maxsize=None)
def gaussian_logcosh_moment(order: int = 200) -> float:
    """E[log cosh(e)] for e ~ N(0, 1), by Gauss-Hermite quadrature."""
    x, wts = np.polynomial.hermite_e.hermegauss(order)
    return float(np.sum(wts * logcosh(x)) / np.sqrt(2 * np.pi))


def logcosh(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2 * ax)) - np.log(2.0)


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        raise DegenerateInputError("cannot standardize a constant signal")
    return (x - x.mean()) / sd


def whiten(X: MixedSignals, eps: float = 1e-8, max_components: int | None = None
           ) -> tuple[MixedSignals, np.ndarray]:
    """PCA whitening. Components with eigenvalue below ``eps * max eigenvalue`` are dropped.

    Returns the whitened signals (d x P) and the d x C transform.
    """
    data = np.asarray(X.X, dtype=np.float64)
    C, P = data.shape
    if C < 1 or P <= C:
        raise InputError(f"whitening needs P > C, got C={C}, P={P}")
    Xc = data - data.mean(axis=1, keepdims=True)
    cov = Xc @ Xc.T / P
    evals, evecs = np.linalg.eigh(cov)
    top = evals.max()
    if top <= 0 or not np.isfinite(top):
        raise DegenerateInputError("mixtures have zero variance")
    keep = np.flatnonzero(evals > eps * top)[::-1]
    if max_components is not None:
        keep = keep[:max_components]
    T = evecs[:, keep].T / np.sqrt(evals[keep])[:, None]
    return MixedSignals(T @ Xc, X.spatial_dims), T


def negentropy(y: np.ndarray, cfg: ICARConfig) -> float:
    return cfg.rho * (float(np.mean(logcosh(y))) - cfg.gauss_moment) ** 2


def closeness(y: np.ndarray, r: np.ndarray) -> float:
    """Mean squared error between the standardized signals."""
    return float(np.mean((standardize(y) - standardize(r)) ** 2))


def solve(Z: MixedSignals, r: np.ndarray, cfg: ICARConfig, w0: np.ndarray | None = None,
          trace: list | None = None) -> ICARResult:
    """Newton iteration on whitened mixtures ``Z`` (d x P) for reference ``r`` (length P).

    ``trace`` (optional list) receives ``(w, mu, closeness)`` per iteration.
    """
    Zd = Z.X
    d, P = Zd.shape
    r = standardize(r)
    if w0 is None:
        w0 = Zd @ r / P
    w = w0 / np.linalg.norm(w0)
    mu = 0.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        y = w @ Zd
        g = float(np.mean((y - r) ** 2))
        mu = max(0.0, mu + cfg.gamma * (g - cfg.xi))
        th = np.tanh(y)
        rho_bar = cfg.rho * np.sign(np.mean(logcosh(y)) - cfg.gauss_moment)
        grad = rho_bar * (Zd @ th) / P - mu * (Zd @ (y - r)) / P
        denom = rho_bar * np.mean(1.0 - th**2) - mu
        if abs(denom) < 1e-12:
            denom = np.copysign(1e-12, denom if denom != 0 else 1.0)
        w_new = w - cfg.eta * grad / denom
        w_new /= np.linalg.norm(w_new)
        # the source sign is fixed by the reference
        if np.dot(w_new @ Zd, r) < 0:
            w_new = -w_new
        if trace is not None:
            trace.append((w_new.copy(), mu, g))
        delta = float(np.linalg.norm(w_new - w))
        w = w_new
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        log.info("ICA-R did not converge in %d iterations", cfg.max_iters)
    y = w @ Zd
    if np.dot(y, r) < 0:
        w, y = -w, -y
    v = minmax(y).reshape(Z.spatial_dims)
    return ICARResult(HeatMap(v, normalized=True), w, it, converged, y)


def extract(h_D: FeatureStack | np.ndarray, h_V: FeatureStack | HeatMap, cfg: ICARConfig) -> ICARResult:
    """ICA-R map from dual-network mixtures ``h_D`` guided by the prior ``h_V``.

    The reference is the channel mean of ``h_V`` resized to ``h_D``'s grid.
    """
    mixed = h_D.values if isinstance(h_D, FeatureStack) else np.asarray(h_D)
    dims = mixed.shape[1:]
    ref_map = channel_mean(h_V).values if isinstance(h_V, FeatureStack) else h_V.values
    ref = resize_map(ref_map, dims)
    if ref.shape != dims:
        raise InputError(f"reference {ref.shape} does not match mixtures {dims}")
    Z, _ = whiten(MixedSignals(mixed.reshape(mixed.shape[0], -1), dims), cfg.whiten_eps,
                  cfg.max_components)
    return solve(Z, ref.ravel(), cfg)
