"""Multi-scale rigid registration with per-scale sampling fields.

For each pyramid level, coarsest first: smooth the moving level and take
its gradient, build the configured sampling field once, run the
trust-region Gauss-Newton loop (fresh selection every iteration for the
probabilistic kinds), then hand theta and the final Gauss-Newton matrix to
the next level.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .optimizer import OptimizerConfig, optimize_scale
from .sampling import (
    SamplingField,
    compute_utilities,
    fixed_field,
    gms_field,
    heuristic_ph,
    iteration_seed,
    mix_fields,
    sample_selection,
    solve_vspf,
    topk_field,
    urs_field,
)
from .similarity import DEFAULT_BINS, NMIMetric, intensity_window
from .transform import RigidParams, propagate_to_finer
from .volume import build_pyramid, gaussian_smooth, spatial_gradient

__all__ = [
    "SAMPLER_KINDS",
    "RegistrationConfig",
    "RegistrationResult",
    "register",
    "level_fields",
    "final_histogram",
    "REFERENCE_RATES",
    "default_beta",
]

SAMPLER_KINDS = (
    "vspf_heuristic",
    "vspf_learned",
    "vspf_thresholded",
    "urs",
    "furs",
    "gms",
    "gms_urs",
    "gm",
)
VSPF_KINDS = ("vspf_heuristic", "vspf_learned", "vspf_thresholded")
FIXED_KINDS = ("furs", "gm", "vspf_thresholded")

REFERENCE_RATES = (0.0006, 0.001, 0.003, 0.01, 0.03, 0.1)
# published mixing weights per reference rate, coarse (2) and fine (1)
_REFERENCE_BETA = {
    2: (0.98, 0.93, 0.94, 0.97, 0.97, 0.95),
    1: (0.33, 0.29, 0.25, 0.22, 0.09, 0.00),
}

PILOT_MIN_VOXELS = 2000
PILOT_FACTOR = 10
GRADIENT_SIGMA_FACTOR = 1.0
JITTER = 1.0  # width of the sample-position jitter, in voxels
EIG_FLOOR = 1e-10


def default_beta(level, rate):
    """GMS+URS mixing weight: published value at the nearest reference rate."""
    table = _REFERENCE_BETA[2 if level > 1 else 1]
    i = int(np.argmin([abs(math.log(rate / r)) for r in REFERENCE_RATES]))
    return table[i]


def _default_optimizer(level):
    return OptimizerConfig(max_iters=20 if level == 1 else 50)


def _int_keys(d):
    return None if d is None else {int(k): float(v) for k, v in d.items()}


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 2
    sampler_kind: str = "vspf_heuristic"
    sampling_rate: float = 0.01
    p_high_per_level: dict | None = None
    beta_per_level: dict | None = None
    optimizer: dict | None = None  # level -> OptimizerConfig
    bins: int = DEFAULT_BINS
    seed: int = 0
    sigma_xi2: float = 1.0
    sample_jitter: float = JITTER
    record_timing: bool = False
    keep_fields: bool = False

    def __post_init__(self):
        if self.sampler_kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler_kind {self.sampler_kind!r}")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        object.__setattr__(self, "p_high_per_level", _int_keys(self.p_high_per_level))
        object.__setattr__(self, "beta_per_level", _int_keys(self.beta_per_level))
        if self.optimizer is not None:
            opt = {
                int(k): v if isinstance(v, OptimizerConfig) else OptimizerConfig.from_dict(v)
                for k, v in self.optimizer.items()
            }
            object.__setattr__(self, "optimizer", opt)

    def optimizer_for(self, level):
        if self.optimizer and level in self.optimizer:
            return self.optimizer[level]
        return _default_optimizer(level)

    def with_updates(self, **kw):
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        def keyed(m):
            return None if m is None else {str(k): v for k, v in sorted(m.items())}

        return {
            "levels": self.levels,
            "sampler_kind": self.sampler_kind,
            "sampling_rate": self.sampling_rate,
            "p_high_per_level": keyed(self.p_high_per_level),
            "beta_per_level": keyed(self.beta_per_level),
            "optimizer": {str(k): self.optimizer_for(k).to_dict() for k in range(self.levels, 0, -1)},
            "bins": self.bins,
            "seed": self.seed,
            "sigma_xi2": self.sigma_xi2,
            "sample_jitter": self.sample_jitter,
            "record_timing": self.record_timing,
            "keep_fields": self.keep_fields,
        }


@dataclass
class RegistrationResult:
    theta: RigidParams
    per_scale: list = field(default_factory=list)
    levels_run: list = field(default_factory=list)
    vspf_snapshots: dict | None = None
    wall_time: float | None = None
    expected_samples: list = field(default_factory=list)

    def to_dict(self, config=None):
        out = {
            "theta": self.theta.to_json(),
            "levels": [
                {
                    "level": k,
                    "iterations": r.iterations_run,
                    "accepted_steps": r.accepted,
                    "expected_samples": m,
                    "theta": r.theta.to_json(),
                    "final_nmi": r.nmi_trace[-1] if r.nmi_trace else None,
                }
                for k, r, m in zip(self.levels_run, self.per_scale, self.expected_samples)
            ],
        }
        if self.wall_time is not None:
            out["wall_time_s"] = self.wall_time
        if config is not None:
            out["config"] = config.to_dict()
        return out


class _Level:
    """Per-level images, metric and helpers."""

    def __init__(self, level, ref, mov, windows, center, cfg, seed):
        self.level = level
        self.ref = ref
        mov_s = gaussian_smooth(mov, GRADIENT_SIGMA_FACTOR * min(mov.spacing))
        self.mov_grad = spatial_gradient(mov_s)
        offsets = None
        if cfg.sample_jitter > 0:
            gen = np.random.Generator(np.random.Philox(key=seed))
            offsets = (gen.random((ref.size, 3)) - 0.5) * cfg.sample_jitter * np.asarray(ref.spacing)
        self.metric = NMIMetric(
            ref, mov, cfg.bins, windows[0], windows[1], center, self.mov_grad,
            sample_offsets=offsets,
        )
        self.center = center
        self._coords = None

    @property
    def coords(self):
        if self._coords is None:
            self._coords = self.metric.sample_points()
        return self._coords

    def grad_magnitude(self, theta):
        from .transform import apply

        g = self.mov_grad.sample(apply(theta, self.coords, self.center))
        return np.linalg.norm(g, axis=1)


def _covariance_from_hessian(H):
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    floor = EIG_FLOOR * max(float(w.max()), 1e-300)
    return (V / np.maximum(w, floor)) @ V.T


def _build_field(lv, cfg, theta, M, scales, hessian, seed):
    N = lv.ref.size
    M = min(M, N)
    kind = cfg.sampler_kind
    k = lv.level
    if kind == "urs":
        return urs_field(N, M), hessian
    if kind == "furs":
        sel = sample_selection(urs_field(N, M), iteration_seed(seed, 0))
        return fixed_field(sel, N, "furs"), hessian
    if kind in ("gms", "gms_urs", "gm"):
        mag = lv.grad_magnitude(theta)
        if kind == "gm":
            return topk_field(mag, max(1, int(round(M))), "gm"), hessian
        gms = gms_field(mag, M)
        if kind == "gms":
            return gms, hessian
        beta = (cfg.beta_per_level or {}).get(k, default_beta(k, cfg.sampling_rate))
        return mix_fields(gms, urs_field(N, M), beta), hessian

    # utility-driven kinds
    if hessian is None:
        count = min(N, max(PILOT_MIN_VOXELS, PILOT_FACTOR * M))
        pilot = sample_selection(urs_field(N, count), iteration_seed(seed, 1))
        hessian = lv.metric.hessian(theta, pilot, cfg.sigma_xi2)
    Hz = hessian / np.outer(scales, scales)
    R = _covariance_from_hessian(Hz)
    util = compute_utilities(lv.mov_grad, theta, R, cfg.sigma_xi2, lv.coords, lv.center, scales)
    if kind == "vspf_thresholded":
        return topk_field(util.u, max(1, int(round(M))), "vspf_thresholded"), hessian
    overrides = cfg.p_high_per_level or {}
    if k in overrides:
        p_high = overrides[k]
    elif kind == "vspf_learned":
        raise ValueError(f"vspf_learned needs p_high_per_level for level {k}")
    else:
        p_high = heuristic_ph(k, M, N)
    fld = solve_vspf(util, 1.0, M, p_high)
    return SamplingField(fld.p, kind, fld.c_ave, fld.voxel_cost, fld.p_high,
                         fld.lambda_star, fld.a_value), hessian


def register(ref, mov, cfg, stop_level=None, theta0=None):
    """Register ``mov`` to ``ref``.

    ``stop_level`` ends the run after that level (1 = finest, the default).
    The returned theta maps reference physical points into the moving image.
    """
    t_start = time.perf_counter()
    K = cfg.levels
    stop_level = 1 if stop_level is None else int(stop_level)
    if not 1 <= stop_level <= K:
        raise ValueError("stop_level must lie in [1, levels]")
    windows = (intensity_window(ref), intensity_window(mov))
    ref_pyr = build_pyramid(ref, K)
    mov_pyr = build_pyramid(mov, K)
    center = ref.center()
    rho = ref.bounding_radius()
    scales = np.array([1.0, 1.0, 1.0, rho, rho, rho])
    M = cfg.sampling_rate * ref.size

    theta = theta0 if theta0 is not None else RigidParams.identity()
    hessian = None
    result = RegistrationResult(theta)
    snapshots = {} if cfg.keep_fields else None
    for k in range(K, stop_level - 1, -1):
        level_seed = iteration_seed(cfg.seed, k)
        lv = _Level(k, ref_pyr.level(k), mov_pyr.level(k), windows, center, cfg,
                    iteration_seed(level_seed, 3))
        fld, hessian = _build_field(lv, cfg, theta, M, scales, hessian, level_seed)
        if snapshots is not None:
            snapshots[k] = fld
        opt_cfg = cfg.optimizer_for(k)
        res = optimize_scale(lv.metric, fld, theta, opt_cfg, iteration_seed(level_seed, 2),
                             scales=scales)
        theta = propagate_to_finer(res.theta)
        if np.any(res.final_hessian):
            hessian = res.final_hessian
        result.per_scale.append(res)
        result.levels_run.append(k)
        result.expected_samples.append(fld.expected_count())
    result.theta = theta
    result.vspf_snapshots = snapshots
    if cfg.record_timing:
        result.wall_time = time.perf_counter() - t_start
    return result


def level_fields(ref, mov, cfg, level, theta=None):
    """Sampling field the driver would build at ``level`` starting from
    ``theta`` (identity by default), with the pilot Gauss-Newton matrix."""
    K = cfg.levels
    windows = (intensity_window(ref), intensity_window(mov))
    ref_pyr = build_pyramid(ref, K)
    mov_pyr = build_pyramid(mov, K)
    center = ref.center()
    rho = ref.bounding_radius()
    scales = np.array([1.0, 1.0, 1.0, rho, rho, rho])
    level_seed = iteration_seed(cfg.seed, level)
    lv = _Level(level, ref_pyr.level(level), mov_pyr.level(level), windows, center, cfg,
                iteration_seed(level_seed, 3))
    theta = theta or RigidParams.identity()
    fld, _ = _build_field(lv, cfg, theta, cfg.sampling_rate * ref.size, scales, None,
                          level_seed)
    return fld, lv.ref


def final_histogram(ref, mov, cfg, theta):
    """Joint histogram of all full-resolution reference voxels at ``theta``."""
    windows = (intensity_window(ref), intensity_window(mov))
    metric = NMIMetric(ref, mov, cfg.bins, windows[0], windows[1], ref.center())
    return metric.histogram(theta, np.arange(ref.size))
