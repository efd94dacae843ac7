"""Normalized mutual information on sampled reference voxels.

Reference voxels are mapped through ``T`` into the moving grid and their
unit mass is spread over the 4x4x4 moving neighbourhood with the
Hanning-windowed sinc partial-volume kernel (see :mod:`vspfreg.kernels`).
The reference intensity is split linearly between its two nearest bins;
each moving neighbour contributes to the bin nearest its own intensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .transform import apply, rotation_derivatives

__all__ = [
    "NonOverlapError",
    "JointHistogram",
    "SimilarityValue",
    "NMIMetric",
    "intensity_window",
    "joint_histogram",
    "nmi",
    "nmi_bin_derivatives",
    "nmi_gradient",
    "gn_hessian",
    "gn_hessian_from_g",
    "histogram_to_csv",
]

DEFAULT_BINS = 32


class NonOverlapError(ValueError):
    """The mapped samples carry no in-bounds kernel mass."""


@dataclass(frozen=True)
class JointHistogram:
    table: np.ndarray  # (bins, bins); rows = reference bins
    ref_marginal: np.ndarray
    mov_marginal: np.ndarray
    total_weight: float
    bins: int
    ref_window: tuple
    mov_window: tuple


@dataclass(frozen=True)
class SimilarityValue:
    nmi: float
    entropy_ref: float
    entropy_mov: float
    entropy_joint: float


def intensity_window(vol):
    return (float(vol.data.min()), float(vol.data.max()))


def _continuous_bins(values, window, bins):
    lo, hi = window
    if hi > lo:
        c = (values - lo) / (hi - lo) * (bins - 1)
    else:
        c = np.zeros_like(values, dtype=np.float64)
    return np.clip(c, 0.0, bins - 1)


def _indices(sel):
    idx = getattr(sel, "indices", sel)
    return np.asarray(idx, dtype=np.int64)


def _entropy(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def make_histogram(table, bins, ref_window, mov_window):
    """Wrap a raw accumulated table; negative bins from the sinc side lobes
    are clamped to zero."""
    table = np.maximum(table, 0.0)
    total = float(table.sum())
    return JointHistogram(
        table=table,
        ref_marginal=table.sum(axis=1),
        mov_marginal=table.sum(axis=0),
        total_weight=total,
        bins=bins,
        ref_window=tuple(ref_window),
        mov_window=tuple(mov_window),
    )


def nmi(hist):
    """(H(ref) + H(mov)) / H(joint) in nats; 2 when the joint entropy is 0."""
    if not hist.total_weight > 0:
        raise NonOverlapError("zero in-bounds mass")
    W = hist.total_weight
    hr = _entropy(hist.ref_marginal / W)
    hm = _entropy(hist.mov_marginal / W)
    hj = _entropy(hist.table / W)
    value = 2.0 if hj <= 0 else (hr + hm) / hj
    return SimilarityValue(value, hr, hm, hj)


def nmi_bin_derivatives(hist):
    """dNMI/dh_ij for every bin of the (clamped) table; 0 on empty bins."""
    W = hist.total_weight
    table = hist.table
    occ = table > 0
    with np.errstate(divide="ignore"):
        lp = np.where(occ, np.log(np.where(occ, table, 1.0) / W), 0.0)
        lr = np.log(np.where(hist.ref_marginal > 0, hist.ref_marginal, 1.0) / W)
        lm = np.log(np.where(hist.mov_marginal > 0, hist.mov_marginal, 1.0) / W)
    val = nmi(hist)
    hr, hm, hj = val.entropy_ref, val.entropy_mov, val.entropy_joint
    if hj <= 0:
        return np.zeros_like(table)
    dhr = -(lr[:, None] + hr) / W
    dhm = -(lm[None, :] + hm) / W
    dhj = -(lp + hj) / W
    F = ((dhr + dhm) * hj - (hr + hm) * dhj) / (hj * hj)
    return np.where(occ, F, 0.0)


class NMIMetric:
    """Precomputed binning and geometry for one (reference, moving) pair.

    Parameters
    ----------
    ref, mov : Volume
    bins : int
        Histogram bins per axis (>= 8).
    ref_window, mov_window : (float, float), optional
        Intensity windows; default to the min/max of each volume.  Pass the
        full-resolution windows when working on pyramid levels.
    center : 3-vector, optional
        Rotation center; defaults to the reference grid center.
    mov_grad : VectorField, optional
        Gradient of the (smoothed) moving image, needed by :meth:`hessian`.
    sample_offsets : (N, 3) array, optional
        Fixed per-voxel displacement (mm) of the sample point from the voxel
        center, with the reference intensity interpolated trilinearly there.
        Breaks the lattice coincidences at which partial-volume NMI on
        sparse selections peaks spuriously.  Default: voxel centers.
    """

    def __init__(self, ref, mov, bins=DEFAULT_BINS, ref_window=None, mov_window=None,
                 center=None, mov_grad=None, backend=None, sample_offsets=None):
        if bins < 8:
            raise ValueError("bins must be >= 8")
        self.ref = ref
        self.mov = mov
        self.bins = int(bins)
        self.ref_window = tuple(ref_window) if ref_window is not None else intensity_window(ref)
        self.mov_window = tuple(mov_window) if mov_window is not None else intensity_window(mov)
        self.center = ref.center() if center is None else np.asarray(center, dtype=np.float64)
        self.mov_grad = mov_grad
        self._k = kernels.get_backend(backend)

        if sample_offsets is None:
            self._points = None
            ref_values = ref.data.ravel()
        else:
            off = np.asarray(sample_offsets, dtype=np.float64)
            if off.shape != (ref.size, 3):
                raise ValueError("sample_offsets must have shape (N, 3)")
            self._points = ref.voxel_coords() + off
            ref_values = _trilinear(ref, self._points)
        c = _continuous_bins(ref_values, self.ref_window, self.bins)
        lo = np.minimum(np.floor(c), self.bins - 2)
        self._ref_lo = lo.astype(np.int32)
        self._ref_frac = c - lo
        cm = _continuous_bins(mov.data, self.mov_window, self.bins)
        self._mov_bins = np.ascontiguousarray(np.rint(cm).astype(np.int32))
        self._mov_origin = np.asarray(mov.origin)
        self._mov_spacing = np.asarray(mov.spacing)

    # -- geometry
    def sample_points(self, idx=None):
        """Physical sample positions of reference voxels ``idx``."""
        if self._points is None:
            return self.ref.voxel_coords(idx)
        return self._points if idx is None else self._points[np.asarray(idx)]

    def _prepare(self, params, sel):
        idx = _indices(sel)
        if idx.size == 0:
            raise ValueError("empty selection")
        x = self.sample_points(idx)
        y = apply(params, x, self.center)
        coords = np.ascontiguousarray((y - self._mov_origin) / self._mov_spacing)
        return idx, x, coords

    def _accumulate(self, idx, coords):
        raw = self._k.pv_histogram(
            coords, self._ref_lo[idx], self._ref_frac[idx], self._mov_bins, self.bins
        )
        hist = make_histogram(raw, self.bins, self.ref_window, self.mov_window)
        if not hist.total_weight > 0:
            raise NonOverlapError("zero in-bounds mass")
        return hist

    # -- public
    def raw_table(self, params, sel):
        """Accumulated table before negative bins are clamped.

        NMI has a kink wherever a bin of this table changes sign.
        """
        idx, _, coords = self._prepare(params, sel)
        return self._k.pv_histogram(
            coords, self._ref_lo[idx], self._ref_frac[idx], self._mov_bins, self.bins
        )

    def histogram(self, params, sel):
        idx, _, coords = self._prepare(params, sel)
        return self._accumulate(idx, coords)

    def value(self, params, sel):
        return nmi(self.histogram(params, sel))

    def gradient(self, params, sel):
        """Return ``(SimilarityValue, dNMI/dtheta)``."""
        idx, x, coords = self._prepare(params, sel)
        hist = self._accumulate(idx, coords)
        F = np.ascontiguousarray(nmi_bin_derivatives(hist))
        G = self._k.pv_gradient(coords, self._ref_lo[idx], self._ref_frac[idx], self._mov_bins, F)
        G = G / self._mov_spacing  # d/dy in mm
        grad = np.empty(6)
        grad[:3] = G.sum(axis=0)
        rel = x - self.center
        dR = rotation_derivatives(params)
        for k in range(3):
            grad[3 + k] = np.einsum("ni,ij,nj->", G, dR[k], rel)
        return nmi(hist), grad

    def intensity_jacobian(self, params, sel):
        """Per-sample g_i = grad V(T(x_i)) . dT/dtheta, shape (n, 6)."""
        if self.mov_grad is None:
            raise ValueError("mov_grad is required for intensity derivatives")
        x = self.sample_points(_indices(sel))
        return intensity_jacobian(self.mov_grad, params, x, self.center)

    def hessian(self, params, sel, sigma_xi2=1.0):
        g = self.intensity_jacobian(params, sel)
        return gn_hessian_from_g(g, 1.0 / sigma_xi2)


def _trilinear(vol, points):
    from scipy.ndimage import map_coordinates

    idx = (np.atleast_2d(points) - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    return map_coordinates(vol.data, idx[:, ::-1].T, order=1, mode="nearest")


def intensity_jacobian(mov_grad, params, points, center=None):
    """g_i for physical reference points; zero where T(x) leaves the grid."""
    y = apply(params, points, center)
    grad = mov_grad.sample(y)
    rel = np.atleast_2d(points) - (np.zeros(3) if center is None else np.asarray(center))
    g = np.empty((grad.shape[0], 6))
    g[:, :3] = grad
    dR = rotation_derivatives(params)
    for k in range(3):
        g[:, 3 + k] = np.einsum("ni,ij,nj->n", grad, dR[k], rel)
    return g


def gn_hessian_from_g(g, weight=1.0):
    """Sum of weighted outer products ``sum_i w_i g_i g_i^T`` (symmetrized)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (g.shape[0],))
    H = (g * w[:, None]).T @ g
    return 0.5 * (H + H.T)


# Module-level convenience wrappers ---------------------------------------


def joint_histogram(ref, mov, params, sel, bins=DEFAULT_BINS, **kw):
    return NMIMetric(ref, mov, bins, **kw).histogram(params, sel)


def nmi_gradient(ref, mov, mov_grad, params, sel, bins=DEFAULT_BINS, **kw):
    """Analytic dNMI/dtheta through the partial-volume kernel derivatives.

    ``mov_grad`` is accepted for interface symmetry with :func:`gn_hessian`;
    the partial-volume derivative does not need it.
    """
    return NMIMetric(ref, mov, bins, mov_grad=mov_grad, **kw).gradient(params, sel)[1]


def gn_hessian(ref, mov, mov_grad, params, sel, bins=DEFAULT_BINS, sigma_xi2=1.0, **kw):
    return NMIMetric(ref, mov, bins, mov_grad=mov_grad, **kw).hessian(params, sel, sigma_xi2)


def histogram_to_csv(hist, path):
    np.savetxt(path, hist.table, delimiter=",", fmt="%.17g")

