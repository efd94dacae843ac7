"""Synthetic phantoms with known gold transforms and the sampling-rate sweep.

A phantom reference is a handful of smoothed ellipsoids and shells on a dark
background.  The moving image is the reference resampled under a seeded gold
rigid transform, passed through a monotone intensity remap and corrupted
with Gaussian noise.  ``register`` is expected to recover the gold
transform, which maps reference points into the moving image.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .learning import TrainingPair
from .registration import RegistrationConfig, register
from .transform import RigidParams, apply
from .volume import Volume, gaussian_smooth

__all__ = [
    "PhantomSpec",
    "RunRecord",
    "ExperimentReport",
    "FAILURE_MM",
    "make_phantom_pair",
    "tre",
    "run_experiment",
    "run_single",
    "aggregate",
]

FAILURE_MM = 10.0
RUN_FIELDS = ("sampler", "rate", "pair_id", "seed", "failed", "max_tre_mm", "mean_tre_mm", "wall_time_s")
AGG_FIELDS = ("sampler", "rate", "failure_rate", "mtre_mm", "mean_time_s")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    spacing: float = 1.0
    structure_seed: int = 0
    max_translation: float = 10.0
    max_rotation: float = 0.17
    noise_sigma: float = 0.02
    remap_knots: tuple = (0.0, 0.3, 0.5, 0.8, 1.0)
    remap_values: tuple = (0.0, 0.55, 0.65, 0.7, 1.0)
    n_structures: tuple = (6, 12)
    n_voi: int = 8
    grid_offset: tuple = (0.5, 0.5, 0.5)  # moving-grid origin shift, in voxels

    def __post_init__(self):
        if self.size < 8 or self.spacing <= 0:
            raise ValueError("size must be >= 8 and spacing > 0")
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("transform bounds must be non-negative")
        if len(self.remap_knots) != len(self.remap_values) or len(self.remap_knots) < 2:
            raise ValueError("remap needs matching knots and values")
        if np.any(np.diff(self.remap_knots) <= 0) or np.any(np.diff(self.remap_values) <= 0):
            raise ValueError("remap must be strictly increasing")
        object.__setattr__(self, "remap_knots", tuple(float(v) for v in self.remap_knots))
        object.__setattr__(self, "remap_values", tuple(float(v) for v in self.remap_values))
        object.__setattr__(self, "n_structures", tuple(int(v) for v in self.n_structures))
        object.__setattr__(self, "grid_offset", tuple(float(v) for v in self.grid_offset))

    def remap(self, x):
        return np.interp(x, self.remap_knots, self.remap_values)

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d or {}))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _grid(spec):
    n = spec.size
    origin = (-(n - 1) * spec.spacing / 2.0,) * 3
    return n, origin


def _structures(spec, rng):
    """A large body ellipsoid with smaller ellipsoids and shells painted
    inside it, on a zero background."""
    n, origin = _grid(spec)
    half = (n - 1) * spec.spacing / 2.0
    ax = origin[0] + spec.spacing * np.arange(n)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    img = np.zeros((n, n, n))
    count = int(rng.integers(spec.n_structures[0], spec.n_structures[1] + 1))
    levels = rng.permutation(np.linspace(0.25, 1.0, count))
    for k in range(count):
        if k == 0:
            c = rng.uniform(-0.05, 0.05, 3) * half
            radii = rng.uniform(0.7, 0.85, 3) * half
        else:
            c = rng.uniform(-0.35, 0.35, 3) * half
            radii = rng.uniform(0.1, 0.3, 3) * half
        local = (pts - c) @ _rot(rng.uniform(-np.pi, np.pi, 3))
        q = np.sqrt(np.sum((local / radii) ** 2, axis=-1))
        if k > 0 and rng.random() < 0.35:
            mask = (q <= 1.0) & (q >= 0.6)
        else:
            mask = q <= 1.0
        img[mask] = levels[k]
    return img


def _rot(a):
    return _to_matrix(RigidParams((0, 0, 0), tuple(a)))


def _to_matrix(p):
    from .transform import rotation_matrix

    return rotation_matrix(p)


def _resample(vol, params, out_origin, out_dims, order=3):
    """``out(y) = vol(T^-1 y)`` on a grid with the volume's spacing."""
    n = out_dims
    sp = np.asarray(vol.spacing)
    ax = [out_origin[i] + sp[i] * np.arange(n[i]) for i in range(3)]
    z, y, x = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    yph = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    R = _to_matrix(params)
    t = np.asarray(params.t)
    xs = (yph - t) @ R  # R^T (y - t)
    idx = (xs - np.asarray(vol.origin)) / sp
    coords = np.stack([idx[:, 2], idx[:, 1], idx[:, 0]])
    out = ndimage.map_coordinates(vol.data, coords, order=order, mode="constant", cval=0.0)
    return out.reshape(n[2], n[1], n[0])


def make_phantom_pair(spec, seed, gold=None):
    """Seeded phantom pair with gold transform and VOI points.

    ``gold`` (RigidParams) replaces the random draw; the structures and noise
    are the same as for the drawn transform.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.structure_seed), int(seed)]))
    n, origin = _grid(spec)
    sp = (spec.spacing,) * 3
    raw = Volume(_structures(spec, rng), sp, origin)
    ref = gaussian_smooth(raw, 1.0)
    t = rng.uniform(-spec.max_translation, spec.max_translation, 3)
    r = rng.uniform(-spec.max_rotation, spec.max_rotation, 3)
    if gold is None:
        gold = RigidParams(tuple(t), tuple(r))

    # VOI points on structure voxels near the center, so that they stay in
    # the moving field of view under any gold transform within bounds
    near = np.linalg.norm(raw.voxel_coords(), axis=1) <= 0.4 * (n - 1) * spec.spacing / 2.0
    inside = np.flatnonzero((raw.data.ravel() > 0) & near)
    picks = rng.choice(inside, size=spec.n_voi, replace=False)
    voi = raw.voxel_coords(np.sort(picks))

    # a sub-voxel shift of the moving lattice keeps the two grids from
    # coinciding at the identity, where partial-volume NMI has a spurious peak
    mov_origin = tuple(o + f * spec.spacing for o, f in zip(origin, spec.grid_offset))
    moved = _resample(ref, gold, mov_origin, (n, n, n))
    mov_data = spec.remap(np.clip(moved, 0.0, None))
    if spec.noise_sigma > 0:
        mov_data = mov_data + spec.noise_sigma * rng.standard_normal(mov_data.shape)
    mov = Volume(mov_data, sp, mov_origin)
    return TrainingPair(ref, mov, gold, voi, center=tuple(ref.center()))


def tre(gold, est, voi_points, center=None):
    """Per-point distance (mm) between gold- and estimate-mapped points."""
    pts = np.atleast_2d(np.asarray(voi_points, dtype=np.float64))
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    d = apply(gold, pts, center) - apply(est, pts, center)
    return np.sqrt(np.sum(d * d, axis=1))


@dataclass(frozen=True)
class RunRecord:
    sampler: str
    rate: float
    pair_id: int
    seed: int
    failed: bool
    tres: tuple  # per VOI, mm; empty when the registration threw
    wall_time_s: float = 0.0
    error: str = ""

    @property
    def max_tre(self):
        return max(self.tres) if self.tres else float("inf")

    @property
    def mean_tre(self):
        return float(np.mean(self.tres)) if self.tres else float("inf")


def aggregate(records):
    """Per (sampler, rate) failure rate, mTRE over successes, mean time."""
    groups = {}
    for r in records:
        groups.setdefault((r.sampler, r.rate), []).append(r)
    rows = []
    for (sampler, rate), runs in groups.items():
        ok = [r for r in runs if not r.failed]
        fails = len(runs) - len(ok)
        rows.append({
            "sampler": sampler,
            "rate": rate,
            "failure_count": fails,
            "total_runs": len(runs),
            "failure_rate": fails / len(runs),
            "mtre_mm": float(np.mean([r.mean_tre for r in ok])) if ok else float("nan"),
            "mean_time_s": float(np.mean([r.wall_time_s for r in runs])),
        })
    return rows


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentReport:
    runs: list
    config: dict = field(default_factory=dict)

    def summary(self):
        return aggregate(self.runs)

    def cell(self, sampler, rate):
        for row in self.summary():
            if row["sampler"] == sampler and row["rate"] == rate:
                return row
        raise KeyError((sampler, rate))

    def runs_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_FIELDS)
        for r in self.runs:
            w.writerow([_fmt(v) for v in (r.sampler, r.rate, r.pair_id, r.seed, r.failed,
                                          r.max_tre, r.mean_tre, r.wall_time_s)])
        return buf.getvalue()

    def aggregate_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for row in self.summary():
            w.writerow([_fmt(row[k]) for k in AGG_FIELDS])
        return buf.getvalue()

    def to_dict(self):
        def num(v):
            return v if np.isfinite(v) else None

        return {
            "config": self.config,
            "summary": [{k: (num(v) if isinstance(v, float) else v) for k, v in row.items()}
                        for row in self.summary()],
            "runs": [
                {
                    "sampler": r.sampler, "rate": r.rate, "pair_id": r.pair_id, "seed": r.seed,
                    "failed": r.failed, "tre_mm": list(r.tres), "wall_time_s": r.wall_time_s,
                    "error": r.error,
                }
                for r in self.runs
            ],
        }

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "runs.csv"), "w", newline="") as fh:
            fh.write(self.runs_csv())
        with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="") as fh:
            fh.write(self.aggregate_csv())
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_single(pair, pair_id, sampler, rate, seed, base_cfg, record_timing=False):
    """One registration scored against the pair's gold transform."""
    cfg = base_cfg.with_updates(sampler_kind=sampler, sampling_rate=rate, seed=int(seed))
    t0 = time.perf_counter()
    try:
        res = register(pair.ref, pair.mov, cfg)
    except Exception as exc:  # thrown registrations are failures, not crashes
        wall = time.perf_counter() - t0 if record_timing else 0.0
        return RunRecord(sampler, rate, pair_id, int(seed), True, (), wall, type(exc).__name__)
    wall = time.perf_counter() - t0 if record_timing else 0.0
    d = tre(pair.gold, res.theta, pair.voi_points, pair.center)
    failed = bool(np.any(d > FAILURE_MM))
    return RunRecord(sampler, rate, pair_id, int(seed), failed, tuple(float(v) for v in d), wall)


def _job(args):
    spec, pair_seed, pair_id, sampler, rate, seed, cfg, timing = args
    pair = make_phantom_pair(spec, pair_seed)
    return run_single(pair, pair_id, sampler, rate, seed, cfg, timing)


def run_experiment(samplers, rates, pairs, seeds, cfg=None, spec=None, pair_seeds=None,
                   jobs=1, record_timing=False):
    """Cartesian sweep over (sampler, rate, pair, seed).

    Parameters
    ----------
    pairs : int or list of TrainingPair
        A count generates phantoms ``make_phantom_pair(spec, pair_seeds[j])``
        (``pair_seeds`` defaults to ``range(pairs)``).
    seeds : list of int
        Registration seeds, one run per seed in every cell.
    jobs : int
        Worker processes; results are ordered identically for any value.
    record_timing : bool
        Off by default so the written reports are byte-reproducible.
    """
    cfg = cfg or RegistrationConfig()
    spec = spec or PhantomSpec()
    generated = isinstance(pairs, int)
    if generated:
        if pairs < 1:
            raise ValueError("need at least one pair")
        pair_seeds = list(range(pairs)) if pair_seeds is None else list(pair_seeds)
        n_pairs = pairs
    else:
        if not pairs:
            raise ValueError("need at least one pair")
        n_pairs = len(pairs)
    seeds = [int(s) for s in seeds]

    tasks = [(s, r, j, sd) for s in samplers for r in rates for j in range(n_pairs) for sd in seeds]
    if generated and jobs > 1:
        args = [(spec, pair_seeds[j], j, s, r, sd, cfg, record_timing) for s, r, j, sd in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_job, args))
    else:
        cache = {}

        def pair_for(j):
            if not generated:
                return pairs[j]
            if j not in cache:
                cache[j] = make_phantom_pair(spec, pair_seeds[j])
            return cache[j]

        records = [run_single(pair_for(j), j, s, r, sd, cfg, record_timing) for s, r, j, sd in tasks]

    config = {
        "samplers": list(samplers),
        "rates": [float(r) for r in rates],
        "pairs": n_pairs,
        "pair_seeds": pair_seeds if generated else None,
        "seeds": seeds,
        "phantom": spec.to_dict() if generated else None,
        "registration": cfg.to_dict(),
        "record_timing": record_timing,
    }
    return ExperimentReport(records, config)
