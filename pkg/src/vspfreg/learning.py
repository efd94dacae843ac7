"""Grid-search learning of per-level sampling hyperparameters.

Candidates are scored by the empirical target registration error (ETRE):
the mean over training pairs and Monte-Carlo trials of the summed squared
distance between gold-mapped and estimate-mapped VOI points, with the
registration stopped at the level being learned.  Coarse levels are learned
first and then held fixed while finer ones are searched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .registration import RegistrationConfig, register
from .sampling import iteration_seed
from .transform import RigidParams, apply

__all__ = [
    "TrainingPair",
    "LearnedSchedule",
    "etre",
    "candidate_grid",
    "learn_ph",
    "learn_beta",
    "learn_schedule",
]


@dataclass(frozen=True)
class TrainingPair:
    """Reference/moving pair with its gold transform and VOI points (mm)."""

    ref: object
    mov: object
    gold: RigidParams
    voi_points: np.ndarray
    center: tuple | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.voi_points, dtype=np.float64))
        if pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("voi_points must be an (n, 3) array with n >= 1")
        object.__setattr__(self, "voi_points", pts)
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def points_inside(self):
        """True when every VOI point lies in the reference extent and maps
        inside the moving extent under gold."""

        def inside(vol, p):
            lo = np.asarray(vol.origin)
            hi = lo + (np.asarray(vol.dims) - 1) * np.asarray(vol.spacing)
            return bool(np.all((p >= lo) & (p <= hi)))

        return inside(self.ref, self.voi_points) and inside(
            self.mov, apply(self.gold, self.voi_points, self.center)
        )


def etre(pairs, estimates, level_points=None):
    """Mean over pairs and trials of per-pair summed squared VOI error (mm^2).

    Parameters
    ----------
    pairs : list of TrainingPair
    estimates : list of list of RigidParams
        ``estimates[j][u]`` is trial ``u`` on pair ``j``.
    level_points : list of (n, 3) arrays, optional
        Points per pair; defaults to each pair's ``voi_points``.
    """
    if len(pairs) == 0 or len(estimates) != len(pairs):
        raise ValueError("need one estimate list per training pair")
    total, count = 0.0, 0
    for j, pair in enumerate(pairs):
        trials = estimates[j]
        if len(trials) == 0:
            raise ValueError("every pair needs at least one trial")
        pts = pair.voi_points if level_points is None else np.atleast_2d(level_points[j])
        gold_pts = apply(pair.gold, pts, pair.center)
        for est in trials:
            d = gold_pts - apply(est, pts, pair.center)
            total += float(np.sum(d * d))
            count += 1
    return total / count


def candidate_grid(step, include_zero=False):
    """``{step, 2 step, ..., 1}``, plus 0 when ``include_zero``."""
    n = int(round(1.0 / step))
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=1e-9):
        raise ValueError("grid_step must divide 1")
    start = 0 if include_zero else 1
    return [round(k / n, 12) for k in range(start, n + 1)]


@dataclass
class LearnedSchedule:
    """Learned per-level values with the ETRE curve behind each choice."""

    param: str  # "ph" or "beta"
    values: dict = field(default_factory=dict)  # level -> value
    etre_curve: dict = field(default_factory=dict)  # level -> [(candidate, etre)]

    def merged(self, other):
        if other.param != self.param:
            raise ValueError("cannot merge schedules of different parameters")
        return LearnedSchedule(
            self.param,
            {**self.values, **other.values},
            {**self.etre_curve, **other.etre_curve},
        )

    def apply_to(self, cfg):
        """Registration config using these values."""
        if self.param == "ph":
            merged = {**(cfg.p_high_per_level or {}), **self.values}
            return cfg.with_updates(sampler_kind="vspf_learned", p_high_per_level=merged)
        merged = {**(cfg.beta_per_level or {}), **self.values}
        return cfg.with_updates(sampler_kind="gms_urs", beta_per_level=merged)

    def to_dict(self):
        def num(v):
            return None if not math.isfinite(v) else v

        return {
            "param": self.param,
            "values": {str(k): v for k, v in sorted(self.values.items(), reverse=True)},
            "etre_curve": {
                str(k): [[c, num(e)] for c, e in curve]
                for k, curve in sorted(self.etre_curve.items(), reverse=True)
            },
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["param"],
            {int(k): float(v) for k, v in d["values"].items()},
            {
                int(k): [(float(c), math.inf if e is None else float(e)) for c, e in curve]
                for k, curve in d.get("etre_curve", {}).items()
            },
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _search(param, pairs, level, grid, trials, base_cfg, register_fn):
    if not pairs:
        raise ValueError("need at least one training pair")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    register_fn = register_fn or register
    curve = []
    for c_idx, cand in enumerate(grid):
        if param == "ph":
            cfg = base_cfg.with_updates(
                sampler_kind="vspf_learned",
                p_high_per_level={**(base_cfg.p_high_per_level or {}), level: cand},
            )
        else:
            cfg = base_cfg.with_updates(
                sampler_kind="gms_urs",
                beta_per_level={**(base_cfg.beta_per_level or {}), level: cand},
            )
        estimates = []
        try:
            for j, pair in enumerate(pairs):
                row = []
                for u in range(trials):
                    seed = iteration_seed(base_cfg.seed, j, u, c_idx)
                    res = register_fn(pair.ref, pair.mov, cfg.with_updates(seed=seed), stop_level=level)
                    row.append(res.theta)
                estimates.append(row)
            score = etre(pairs, estimates)
        except Exception:  # any thrown registration disqualifies the candidate
            score = math.inf
        curve.append((cand, score))
    finite = [(e, c) for c, e in curve if math.isfinite(e)]
    if not finite:
        raise ValueError(f"every candidate failed at level {level}")
    best = min(finite)[1]  # ties resolve to the smaller candidate
    return LearnedSchedule(param, {level: best}, {level: curve})


def learn_ph(pairs, level, grid_step=0.01, trials=3, base_cfg=None, register_fn=None):
    """Grid search for the probability cap at ``level``.

    ``register_fn(ref, mov, cfg, stop_level=...)`` defaults to :func:`register`
    and must return an object with a ``theta`` attribute.
    """
    base_cfg = base_cfg or RegistrationConfig()
    return _search("ph", pairs, level, candidate_grid(grid_step), trials, base_cfg, register_fn)


def learn_beta(pairs, level, grid_step=0.01, trials=3, base_cfg=None, register_fn=None):
    """Grid search for the GMS/URS mixing weight at ``level`` (0 and 1 included)."""
    base_cfg = base_cfg or RegistrationConfig()
    grid = candidate_grid(grid_step, include_zero=True)
    return _search("beta", pairs, level, grid, trials, base_cfg, register_fn)


def learn_schedule(pairs, param="ph", grid_step=0.01, trials=3, base_cfg=None, register_fn=None):
    """Learn every level, coarsest first, fixing each result before the next."""
    base_cfg = base_cfg or RegistrationConfig()
    learn = learn_ph if param == "ph" else learn_beta
    schedule = LearnedSchedule(param)
    cfg = base_cfg
    for level in range(base_cfg.levels, 0, -1):
        entry = learn(pairs, level, grid_step, trials, cfg, register_fn)
        schedule = schedule.merged(entry)
        cfg = schedule.apply_to(cfg)
    return schedule
