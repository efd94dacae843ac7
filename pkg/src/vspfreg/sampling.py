"""Voxel sampling probability fields and their realizations.

The optimized field assigns each voxel ``p_i = clamp(A (U_i + lambda C), 0, P_h)``
where ``U_i`` is the voxel utility (expected reduction of the parameter
error-covariance trace), ``A`` is kept as small as the average-cost
constraint allows and ``lambda`` is found by bisection on the monotone
constraint function.  Baseline fields (uniform, gradient-magnitude,
deterministic top-k, mixtures) live here too so that every strategy goes
through the same ``SamplingField`` -> ``Selection`` path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .similarity import intensity_jacobian

__all__ = [
    "InfeasibleError",
    "UtilityVector",
    "SamplingField",
    "Selection",
    "compute_utilities",
    "solve_vspf",
    "threshold_vspf",
    "phi",
    "cost_j",
    "sample_selection",
    "urs_field",
    "gms_field",
    "mix_fields",
    "topk_field",
    "fixed_field",
    "heuristic_ph",
    "iteration_seed",
]

BISECTION_MAX_ITERS = 200
MAX_A_DOUBLINGS = 60


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class UtilityVector:
    u: np.ndarray
    R: np.ndarray | None = None
    sigma_xi2: float = 1.0


@dataclass(frozen=True)
class SamplingField:
    p: np.ndarray
    kind: str
    c_ave: float = float("nan")
    voxel_cost: float = 1.0
    p_high: float = 1.0
    lambda_star: float = float("nan")
    a_value: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.p.size

    def expected_count(self):
        return float(np.sum(self.p))


@dataclass(frozen=True)
class Selection:
    indices: np.ndarray
    draw_seed: int = 0

    def __len__(self):
        return int(self.indices.size)


# ---------------------------------------------------------------------------
# utilities


def _spd(R, floor=1e-12):
    R = 0.5 * (np.asarray(R, dtype=np.float64) + np.asarray(R, dtype=np.float64).T)
    w, V = np.linalg.eigh(R)
    return (V * np.maximum(w, floor)) @ V.T


def utilities_from_g(g, R, sigma_xi2=1.0):
    """``U_i = |R g_i|^2 / (g_i^T R g_i + sigma^2)`` for rows of ``g``."""
    if sigma_xi2 <= 0:
        raise ValueError("sigma_xi2 must be > 0")
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite intensity derivatives")
    Rg = g @ R  # R symmetric
    num = np.einsum("ij,ij->i", Rg, Rg)
    den = np.einsum("ij,ij->i", g, Rg) + sigma_xi2
    return num / den


def compute_utilities(mov_grad, params, R, sigma_xi2, voxel_coords, center=None,
                      param_scales=None):
    """Utilities of reference voxels at ``voxel_coords`` (physical, (n, 3)).

    ``param_scales`` expresses the derivatives in scaled parameters
    (``theta_k * scale_k``); ``R`` must then be the covariance of the scaled
    parameters.
    """
    R = _spd(R)
    g = intensity_jacobian(mov_grad, params, voxel_coords, center)
    if param_scales is not None:
        g = g / np.asarray(param_scales, dtype=np.float64)
    return UtilityVector(utilities_from_g(g, R, sigma_xi2), R, float(sigma_xi2))


def _u(u):
    return np.asarray(getattr(u, "u", u), dtype=np.float64)


# ---------------------------------------------------------------------------
# optimized field


def _clamped(lam, a_value, u, C, p_high):
    return np.clip(a_value * (u + lam * C), 0.0, p_high)


def phi(lam, a_value, u, C, p_high):
    """Constraint left-hand side ``sum_i clamp(A (U_i + lambda C), 0, P_h) C``."""
    return float(np.sum(_clamped(lam, a_value, _u(u), C, p_high)) * C)


def cost_j(field_or_p, u):
    """Lagrangian objective at a solution: ``-sum_i p_i U_i``."""
    p = np.asarray(getattr(field_or_p, "p", field_or_p), dtype=np.float64)
    return float(-np.dot(p, _u(u)))


def _polish(lam, a_value, u, C, p_high, target):
    """Exact root on the linear piece containing ``lam``; returns the better
    of the polished and the bisection value."""
    z = a_value * (u + lam * C)
    free = (z > 0) & (z < p_high)
    nfree = int(free.sum())
    if nfree == 0:
        return lam
    n_sat = int(np.sum(z >= p_high))
    lam2 = (target / C - n_sat * p_high - a_value * u[free].sum()) / (a_value * nfree * C)
    r1 = abs(phi(lam, a_value, u, C, p_high) - target * 1.0)
    r2 = abs(phi(lam2, a_value, u, C, p_high) - target * 1.0)
    return lam2 if r2 <= r1 else lam


def _solve_lambda(u, a_value, C, c_ave, p_high):
    lo = -u.max() / C
    hi = (p_high / a_value - u.min()) / C
    tol = 1e-9 * c_ave
    for _ in range(BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        val = phi(mid, a_value, u, C, p_high)
        if abs(val - c_ave) <= tol:
            lo = hi = mid
            break
        if val < c_ave:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(abs(lo), abs(hi), 1e-300):
            break
    lam = 0.5 * (lo + hi)
    return _polish(lam, a_value, u, C, p_high, c_ave)


def solve_vspf(u, voxel_cost, c_ave, p_high, a_value=None):
    """Optimized sampling field for utilities ``u``.

    Parameters
    ----------
    u : UtilityVector or array
    voxel_cost : float
        Cost C of processing one voxel.
    c_ave : float
        Target average total cost, ``sum_i p_i C``.
    p_high : float
        Upper bound on every probability, in (0, 1].
    a_value : float, optional
        Fix the scale ``A`` instead of applying the minimal-A rule.

    Returns
    -------
    SamplingField
    """
    u = _u(u)
    C = float(voxel_cost)
    c_ave = float(c_ave)
    p_high = float(p_high)
    N = u.size
    if N == 0:
        raise ValueError("no voxels")
    if not (0 < p_high <= 1):
        raise ValueError("p_high must lie in (0, 1]")
    if not (c_ave > 0 and C > 0):
        raise ValueError("c_ave and voxel_cost must be > 0")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValueError("utilities must be finite and non-negative")
    if c_ave > N * p_high * C * (1 + 1e-12):
        raise InfeasibleError(
            f"c_ave={c_ave} exceeds the saturated cost N*p_high*C={N * p_high * C}"
        )

    umax, umin = float(u.max()), float(u.min())
    if umax == umin:
        # all voxels equally informative: uniform field (also covers all-zero)
        p = np.full(N, c_ave / (N * C))
        if p[0] > p_high * (1 + 1e-12):
            raise InfeasibleError("uniform fallback exceeds p_high")
        return SamplingField(np.minimum(p, p_high), "vspf", c_ave, C, p_high,
                             float("nan"), float("inf"))

    tol = 1e-6 * c_ave
    if a_value is not None:
        a_value = float(a_value)
        lam = _solve_lambda(u, a_value, C, c_ave, p_high)
    else:
        a_value = p_high / (umax + 1e-12)
        for _ in range(MAX_A_DOUBLINGS + 1):
            lam = _solve_lambda(u, a_value, C, c_ave, p_high)
            if abs(phi(lam, a_value, u, C, p_high) - c_ave) <= tol:
                break
            a_value *= 2.0
    p = _clamped(lam, a_value, u, C, p_high)
    resid = abs(float(p.sum()) * C - c_ave)
    if resid > tol:
        raise InfeasibleError(f"constraint residual {resid:g} above tolerance")
    return SamplingField(p, "vspf", c_ave, C, p_high, float(lam), a_value)


def threshold_vspf(u, voxel_cost, c_ave, p_high=1.0):
    """The ``A -> infinity`` limit: ``p_high`` above the utility threshold,
    one fractional voxel to meet the cost exactly (lowest index wins ties)."""
    u = _u(u)
    C = float(voxel_cost)
    N = u.size
    if c_ave > N * p_high * C * (1 + 1e-12):
        raise InfeasibleError("c_ave exceeds the saturated cost")
    order = np.lexsort((np.arange(N), -u))
    budget = c_ave / (C * p_high)
    full = int(math.floor(budget + 1e-12))
    p = np.zeros(N)
    p[order[:full]] = p_high
    rest = c_ave / C - full * p_high
    if full < N and rest > 1e-12 * c_ave:
        p[order[full]] = rest
    return SamplingField(p, "vspf_threshold", float(c_ave), C, p_high, float("nan"), float("inf"))


# ---------------------------------------------------------------------------
# realizations


def iteration_seed(seed, *stream):
    """Deterministic 64-bit child seed for ``(seed, *stream)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_selection(field, seed):
    """Independent Bernoulli(p_i) per voxel.

    Uses the counter-based Philox generator keyed by ``seed``; voxel ``i``
    consumes the ``i``-th output, so the draw depends only on (field, seed).
    """
    p = np.asarray(getattr(field, "p", field), dtype=np.float64)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    gen = np.random.Generator(np.random.Philox(key=seed))
    draws = gen.random(p.size)
    return Selection(np.flatnonzero(draws < p), seed)


# ---------------------------------------------------------------------------
# baselines


def urs_field(N, M):
    """Uniform random sampling: ``p_i = min(1, M / N)``."""
    if not M > 0:
        raise ValueError("M must be > 0")
    p = np.full(int(N), min(1.0, float(M) / int(N)))
    return SamplingField(p, "urs", float(min(M, N)), 1.0, 1.0)


def gms_field(grad_mag, M):
    """Gradient-magnitude sampling: ``p_i = min(1, kappa |grad|_i)`` with
    ``sum p = M``."""
    g = np.asarray(grad_mag, dtype=np.float64)
    N = g.size
    if not np.any(g > 0):
        raise ValueError("all gradient magnitudes are zero")
    M = float(M)
    if M > N:
        raise InfeasibleError("M exceeds the number of voxels")
    nz = int(np.sum(g > 0))
    if M >= nz:
        p = (g > 0).astype(np.float64)
        return SamplingField(p, "gms", M, 1.0, 1.0, meta={"kappa": float("inf")})
    lo, hi = 0.0, 1.0 / g[g > 0].min()
    tol = 1e-9 * M
    for _ in range(BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        s = float(np.minimum(1.0, mid * g).sum())
        if abs(s - M) <= tol:
            lo = hi = mid
            break
        if s < M:
            lo = mid
        else:
            hi = mid
    kappa = 0.5 * (lo + hi)
    # exact root on the current linear piece
    sat = kappa * g >= 1.0
    free_sum = g[~sat].sum()
    if free_sum > 0:
        k2 = (M - sat.sum()) / free_sum
        if abs(np.minimum(1.0, k2 * g).sum() - M) <= abs(np.minimum(1.0, kappa * g).sum() - M):
            kappa = k2
    p = np.minimum(1.0, kappa * g)
    return SamplingField(p, "gms", M, 1.0, 1.0, meta={"kappa": float(kappa)})


def mix_fields(a, b, beta):
    """Convex combination ``beta * a + (1 - beta) * b``."""
    if a.p.size != b.p.size:
        raise ValueError("fields have different lengths")
    beta = float(beta)
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    p = beta * a.p + (1.0 - beta) * b.p
    return SamplingField(p, f"mix({a.kind},{b.kind})", beta * a.c_ave + (1 - beta) * b.c_ave,
                         1.0, 1.0, meta={"beta": beta})


def topk_field(scores, M, kind="topk"):
    """Deterministic selection of the ``M`` highest scores (lowest index on ties)."""
    s = np.asarray(scores, dtype=np.float64)
    M = int(M)
    if not 1 <= M <= s.size:
        raise ValueError("M must be in [1, N]")
    order = np.lexsort((np.arange(s.size), -s))
    p = np.zeros(s.size)
    p[order[:M]] = 1.0
    return SamplingField(p, kind, float(M), 1.0, 1.0)


def fixed_field(selection, N, kind="fixed"):
    """0/1 field that reproduces ``selection`` for every seed."""
    p = np.zeros(int(N))
    p[np.asarray(selection.indices)] = 1.0
    return SamplingField(p, kind, float(len(selection)), 1.0, 1.0)


COARSE_PH_FACTOR = 3.0
FINE_PH_FACTOR = 10.0


def heuristic_ph(level, M, N_level):
    """``min(1, 3 M / N)`` on coarse levels, ``min(1, 10 M / N)`` on level 1."""
    level = int(level)
    if level < 1:
        raise ValueError("level must be >= 1")
    if not (M > 0 and N_level > 0):
        raise ValueError("M and N_level must be > 0")
    factor = FINE_PH_FACTOR if level == 1 else COARSE_PH_FACTOR
    return min(1.0, factor * float(M) / float(N_level))
