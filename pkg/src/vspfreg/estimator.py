"""Linear-Gaussian estimation model behind the voxel utilities.

Observations follow ``y_i = g_i^T (theta - mu) + xi_i`` with a Gaussian
prior ``theta ~ N(mu, R)`` and white noise of variance ``sigma_xi2``;
voxel ``i`` is observed when its Bernoulli(p_i) selection indicator fires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinearGaussianModel",
    "predicted_error_covariance",
    "simulate_estimation_error",
    "random_model",
]

_CHUNK = 20000


@dataclass(frozen=True)
class LinearGaussianModel:
    mu_theta: np.ndarray
    R_theta: np.ndarray
    g_list: np.ndarray  # (N, d)
    sigma_xi2: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.R_theta, dtype=np.float64)
        if not np.allclose(R, R.T, atol=1e-12 * max(1.0, np.abs(R).max())):
            raise ValueError("R_theta must be symmetric")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R_theta must be positive definite")
        if not self.sigma_xi2 > 0:
            raise ValueError("sigma_xi2 must be > 0")
        object.__setattr__(self, "R_theta", R)
        object.__setattr__(self, "mu_theta", np.asarray(self.mu_theta, dtype=np.float64))
        object.__setattr__(self, "g_list", np.atleast_2d(np.asarray(self.g_list, dtype=np.float64)))

    @property
    def n_voxels(self):
        return self.g_list.shape[0]

    def gains(self):
        """Per-voxel ``R g_i`` (N, d) and innovation variances ``g_i^T R g_i + s2``."""
        Rg = self.g_list @ self.R_theta
        s = np.einsum("ij,ij->i", self.g_list, Rg) + self.sigma_xi2
        return Rg, s


def predicted_error_covariance(model, p):
    """``R - sum_i p_i (R g_i)(R g_i)^T / (g_i^T R g_i + sigma^2)``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (model.n_voxels,):
        raise ValueError("p must have one entry per voxel")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    Rg, s = model.gains()
    out = model.R_theta - (Rg * (p / s)[:, None]).T @ Rg
    return 0.5 * (out + out.T)


def simulate_estimation_error(model, p, draws, seed, estimator="diagonal"):
    """Monte-Carlo trace of the error covariance of the selected-voxel
    Bayes estimate.

    ``estimator="diagonal"`` treats the selected observations as
    uncorrelated (neglects ``g_i^T R g_j`` for ``i != j``), i.e.
    ``theta_hat = mu + sum_{i in D} R g_i y_i / (g_i^T R g_i + sigma^2)``.
    ``estimator="full"`` uses the exact conditional mean given the selected
    observations and serves to measure how much that neglect costs.
    """
    p = np.asarray(p, dtype=np.float64)
    draws = int(draws)
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if estimator not in ("diagonal", "full"):
        raise ValueError("estimator must be 'diagonal' or 'full'")
    G = model.g_list
    N, d = G.shape
    L = np.linalg.cholesky(model.R_theta)
    Rg, s = model.gains()
    K = Rg / s[:, None]  # (N, d) per-voxel gains
    sigma = np.sqrt(model.sigma_xi2)
    gen = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    total = 0.0
    for start in range(0, draws, _CHUNK):
        n = min(_CHUNK, draws - start)
        dtheta = gen.standard_normal((n, d)) @ L.T
        xi = sigma * gen.standard_normal((n, N))
        sel = gen.random((n, N)) < p
        y = dtheta @ G.T + xi
        if estimator == "diagonal":
            est = (y * sel) @ K
        else:
            est = np.empty_like(dtheta)
            for r in range(n):
                idx = np.flatnonzero(sel[r])
                if idx.size == 0:
                    est[r] = 0.0
                    continue
                Gd = G[idx]
                S = Gd @ model.R_theta @ Gd.T + model.sigma_xi2 * np.eye(idx.size)
                est[r] = model.R_theta @ Gd.T @ np.linalg.solve(S, y[r, idx])
        err = dtheta - est
        total += float(np.einsum("ij,ij->", err, err))
    return total / draws


def random_model(n_voxels, seed, dim=6, g_scale=0.1, sigma_xi2=1.0):
    """Seeded random instance with an SPD prior (eigenvalues in [0.5, 2])."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    R = (Q * rng.uniform(0.5, 2.0, dim)) @ Q.T
    R = 0.5 * (R + R.T)
    G = g_scale * rng.standard_normal((n_voxels, dim))
    return LinearGaussianModel(rng.standard_normal(dim), R, G, sigma_xi2)
