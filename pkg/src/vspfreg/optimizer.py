"""Trust-region Gauss-Newton ascent of NMI with a fresh voxel selection
per iteration.

The Gauss-Newton matrix ``H = sum_i g_i g_i^T`` has intensity units, not
NMI units, so the quadratic model uses ``B = alpha * H`` with a scalar
curvature scale ``alpha`` re-estimated from every trial step (secant fit
along the step).  ``H`` also gets a Levenberg-Marquardt floor of
``damping * lambda_max(H)`` on its spectrum: far from the optimum the
undamped Gauss-Newton direction of a sparse selection is unreliable.  Steps
solve ``(B + mu I) delta = grad`` in scaled
parameters, with ``mu >= 0`` the smallest value keeping ``|delta|`` inside
the trust radius.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .sampling import iteration_seed, sample_selection
from .similarity import NonOverlapError
from .transform import RigidParams

__all__ = ["OptimizerConfig", "ScaleResult", "OptimizationError", "optimize_scale",
           "trust_region_step"]

log = logging.getLogger(__name__)

MAX_EMPTY_SELECTIONS = 5
STALL_REJECTIONS = 3


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 50
    initial_radius: float = 2.0
    radius_bounds: tuple = (1e-4, 10.0)
    accept_ratio_thresholds: tuple = (0.25, 0.75)
    parameter_scales: tuple | None = None
    convergence_tol: float = 1e-3
    damping: float = 0.03

    def __post_init__(self):
        shrink, grow = self.accept_ratio_thresholds
        if not 0 < shrink < grow < 1:
            raise ValueError("need 0 < shrink < grow < 1")
        rmin, rmax = self.radius_bounds
        if not 0 < rmin < rmax:
            raise ValueError("radius bounds must be positive and ordered")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for key in ("radius_bounds", "accept_ratio_thresholds", "parameter_scales"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def to_dict(self):
        return {
            "max_iters": self.max_iters,
            "initial_radius": self.initial_radius,
            "radius_bounds": list(self.radius_bounds),
            "accept_ratio_thresholds": list(self.accept_ratio_thresholds),
            "parameter_scales": None if self.parameter_scales is None else list(self.parameter_scales),
            "convergence_tol": self.convergence_tol,
            "damping": self.damping,
        }


@dataclass
class ScaleResult:
    theta: RigidParams
    final_hessian: np.ndarray
    iterations_run: int
    nmi_trace: list = field(default_factory=list)
    selections_used: list = field(default_factory=list)
    radius_trace: list = field(default_factory=list)
    theta_trace: list = field(default_factory=list)
    accepted: int = 0


def trust_region_step(B, g, radius):
    """Maximizer of ``g.d - d.B.d / 2`` over ``|d| <= radius`` for PSD ``B``.

    Returns ``(d, mu)`` with ``(B + mu I) d = g``.
    """
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    w = np.maximum(w, 0.0)
    gv = V.T @ g

    def norm(mu):
        return float(np.sqrt(np.sum((gv / (w + mu)) ** 2)))

    if w.min() > 0 and norm(0.0) <= radius:
        return V @ (gv / w), 0.0
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0:
        return np.zeros_like(g), 0.0
    lo, hi = 0.0, gnorm / radius + w.max()
    # norm(hi) <= radius by construction
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm(mid) > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return V @ (gv / (w + hi)), hi


def _initial_alpha(metric, params, sel, nmi0, gz, Hz, D, radius):
    """Curvature scale from a secant probe along the Gauss-Newton direction.

    The probe has length ``radius``; when the measured change shows more
    curvature than a model whose Newton step reaches the probe, that
    curvature is used instead, so a start near the optimum is not kicked
    away by a full-radius first step.
    """
    try:
        newton = np.linalg.lstsq(Hz, gz, rcond=None)[0]
    except np.linalg.LinAlgError:
        return 1.0
    nn = float(np.linalg.norm(newton))
    if nn == 0:
        return 1.0
    base = nn / radius
    d = newton * (radius / nn)
    curv = float(d @ Hz @ d)
    try:
        probe = metric.value(RigidParams.from_array(params.as_array() + d / D), sel).nmi
    except NonOverlapError:
        return base
    est = 2.0 * (float(gz @ d) - (probe - nmi0)) / curv if curv > 0 else 0.0
    return max(base, est)


def optimize_scale(metric, field, theta0, cfg, seed, scales=None):
    """Maximize NMI on one pyramid level.

    Parameters
    ----------
    metric : NMIMetric
        Must carry ``mov_grad`` for the Gauss-Newton matrix.
    field : SamplingField
        Per-voxel probabilities over the reference grid of ``metric``.
    theta0 : RigidParams
    cfg : OptimizerConfig
    seed : int
        Iteration ``n`` draws its selection with seed ``iteration_seed(seed, n)``.
    scales : 6-vector, optional
        Parameter scales; ``cfg.parameter_scales`` wins when set, otherwise
        1 for translations and the reference bounding radius for rotations.
    """
    if field.p.size != metric.ref.size:
        raise ValueError("field length does not match the reference voxel count")
    if cfg.parameter_scales is not None:
        D = np.asarray(cfg.parameter_scales, dtype=np.float64)
    elif scales is not None:
        D = np.asarray(scales, dtype=np.float64)
    else:
        rho = metric.ref.bounding_radius()
        D = np.array([1.0, 1.0, 1.0, rho, rho, rho])

    theta = theta0.as_array()
    # overlap check at the starting point on the field's support
    support = np.flatnonzero(field.p > 0)
    if support.size == 0:
        raise OptimizationError("sampling field has empty support")
    try:
        metric.histogram(theta0, support)
    except NonOverlapError as exc:
        raise OptimizationError("no overlap at the initial parameters") from exc

    rmin, rmax = cfg.radius_bounds
    shrink_at, grow_at = cfg.accept_ratio_thresholds
    radius = float(np.clip(cfg.initial_radius, rmin, rmax))
    alpha = None
    result = ScaleResult(RigidParams.from_array(theta), np.zeros((6, 6)), 0)
    last_hessian = None
    small_steps = 0
    rejections = 0
    empties = 0

    for n in range(1, cfg.max_iters + 1):
        s = iteration_seed(seed, n)
        sel = sample_selection(field, s)
        result.iterations_run = n
        result.selections_used.append(s)
        if len(sel) == 0:
            empties += 1
            if empties >= MAX_EMPTY_SELECTIONS:
                raise OptimizationError("empty selections on consecutive iterations")
            continue
        empties = 0
        params = RigidParams.from_array(theta)
        try:
            val, grad = metric.gradient(params, sel)
        except NonOverlapError:
            radius = max(rmin, 0.5 * radius)
            continue
        H = metric.hessian(params, sel)
        if last_hessian is None:
            last_hessian = H
        gz = grad / D
        Hz = H / np.outer(D, D)
        if cfg.damping > 0:
            Hz = Hz + cfg.damping * float(np.linalg.eigvalsh(Hz).max()) * np.eye(6)
        if alpha is None:
            alpha = _initial_alpha(metric, params, sel, val.nmi, gz, Hz, D, radius)
        dz, _ = trust_region_step(alpha * Hz, gz, radius)
        step_norm = float(np.linalg.norm(dz))
        predicted = float(gz @ dz - 0.5 * alpha * dz @ Hz @ dz)
        trial = theta + dz / D
        try:
            new_val = metric.value(RigidParams.from_array(trial), sel).nmi
        except NonOverlapError:
            new_val = -np.inf
        actual = new_val - val.nmi
        result.nmi_trace.append(val.nmi)

        # secant update of the curvature scale along the trial step
        curv = float(dz @ Hz @ dz)
        if np.isfinite(actual) and curv > 0:
            est = 2.0 * (float(gz @ dz) - actual) / curv
            alpha = float(np.clip(est, 0.25 * alpha, 4.0 * alpha)) if est > 0 else 0.25 * alpha

        rho = actual / predicted if predicted > 0 else -1.0
        log.debug("iter %d nmi %.6f step %.4g radius %.4g ratio %.3g alpha %.3g",
                  n, val.nmi, step_norm, radius, rho, alpha)
        if actual > 0:
            theta = trial
            last_hessian = H
            result.accepted += 1
            rejections = 0
            if rho < shrink_at:
                radius = max(rmin, 0.5 * min(radius, step_norm))
            elif rho > grow_at and step_norm >= 0.99 * radius:
                radius = min(rmax, 2.0 * radius)
            small_steps = small_steps + 1 if step_norm < cfg.convergence_tol else 0
            if small_steps >= 3:
                break
        else:
            rejections += 1
            at_floor = radius <= rmin
            radius = max(rmin, 0.5 * min(radius, step_norm))
            if at_floor and rejections >= STALL_REJECTIONS:
                break
        result.radius_trace.append(radius)
        result.theta_trace.append(theta.copy())

    result.theta = RigidParams.from_array(theta)
    result.final_hessian = last_hessian if last_hessian is not None else np.zeros((6, 6))
    return result
