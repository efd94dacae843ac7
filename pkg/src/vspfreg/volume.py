"""Volumes on regular grids: MetaImage I/O, resampling, smoothing, gradients
and the Gaussian pyramid used by the multi-resolution driver.

Arrays are stored with shape ``(nz, ny, nx)`` so that a C-order flattening
is x-fastest; linear voxel index ``i = x + nx * (y + ny * z)``.  Physical
coordinates and every per-axis triple (dims, spacing, origin) are in
``(x, y, z)`` order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "VectorField",
    "Pyramid",
    "VolumeIOError",
    "load_volume",
    "save_volume",
    "resample_isotropic",
    "gaussian_smooth",
    "spatial_gradient",
    "build_pyramid",
]


class VolumeIOError(Exception):
    pass


def _triple(values, name, positive=False):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise ValueError(f"{name} must be finite")
    if positive and not all(v > 0 for v in out):
        raise ValueError(f"{name} components must be > 0")
    return out


@dataclass(frozen=True)
class Volume:
    """Scalar volume with physical geometry.

    Parameters
    ----------
    data : ndarray, shape (nz, ny, nx)
        Samples; stored as a read-only float64 array.
    spacing : 3-tuple of float
        Voxel size in mm along (x, y, z).
    origin : 3-tuple of float
        Physical position (mm) of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError("volume data must be a non-empty 3D array")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self):
        """Voxels per axis in (x, y, z) order."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def size(self):
        return self.data.size

    def extent(self):
        return tuple((n - 1) * s for n, s in zip(self.dims, self.spacing))

    def center(self):
        """Physical center of the voxel grid."""
        return np.asarray(self.origin) + 0.5 * np.asarray(self.extent())

    def bounding_radius(self):
        """Half the diagonal of the physical grid extent."""
        return 0.5 * float(np.linalg.norm(self.extent()))

    def voxel_coords(self, indices=None):
        """Physical coordinates (n, 3) of voxels given by linear indices."""
        nx, ny, _ = self.dims
        if indices is None:
            indices = np.arange(self.size)
        indices = np.asarray(indices, dtype=np.int64)
        ix = indices % nx
        iy = (indices // nx) % ny
        iz = indices // (nx * ny)
        idx = np.stack([ix, iy, iz], axis=1).astype(np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def to_index(self, points):
        """Continuous voxel index (x, y, z) of physical points."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(
            self.spacing
        )

    def with_data(self, data):
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True)
class VectorField:
    """Per-voxel 3-vectors (d/dx, d/dy, d/dz), data shape (nz, ny, nx, 3)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ValueError("vector field data must have shape (nz, ny, nx, 3)")
        if not np.all(np.isfinite(data)):
            raise ValueError("vector field contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self):
        nz, ny, nx, _ = self.data.shape
        return (nx, ny, nz)

    def sample(self, points):
        """Trilinear interpolation at physical points; zero outside the grid."""
        idx = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(
            self.spacing
        )
        coords = idx[:, ::-1].T  # (z, y, x) rows for map_coordinates
        out = np.empty((idx.shape[0], 3))
        for c in range(3):
            out[:, c] = ndimage.map_coordinates(
                self.data[..., c], coords, order=1, mode="constant", cval=0.0
            )
        return out


@dataclass(frozen=True)
class Pyramid:
    """Multi-scale stack; ``levels[0]`` is the finest (level 1)."""

    levels: list = field(default_factory=list)

    @property
    def level_count(self):
        return len(self.levels)

    def level(self, k):
        """Level by 1-based number (1 = finest)."""
        return self.levels[k - 1]


# --------------------------------------------------------------------------
# MetaImage subset

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}


def _parse_header(path):
    header = {}
    with open(path, "rb") as fh:
        text = fh.read().decode("ascii", errors="replace")
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeIOError(f"{path}: malformed header line {raw!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def load_volume(path):
    """Read a MetaImage ``.mhd`` header and its raw payload."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such volume header: {path}")
    header = _parse_header(path)
    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise VolumeIOError(f"{path}: only NDims = 3 is supported, got {ndims}")
    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise VolumeIOError(f"{path}: missing header key {key}")
    etype = header["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise VolumeIOError(f"{path}: unsupported ElementType {etype}")
    msb = header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False"))
    if msb.lower() == "true":
        raise VolumeIOError(f"{path}: big-endian payloads are not supported")
    dims = [int(v) for v in header["DimSize"].split()]
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeIOError(f"{path}: bad DimSize {header['DimSize']!r}")
    spacing = [float(v) for v in header.get("ElementSpacing", "1 1 1").split()]
    origin = [float(v) for v in header.get("Offset", header.get("Origin", "0 0 0")).split()]

    data_file = header["ElementDataFile"]
    if data_file.upper() == "LOCAL":
        raise VolumeIOError(f"{path}: embedded (LOCAL) payloads are not supported")
    data_path = os.path.join(os.path.dirname(path), data_file)
    if not os.path.isfile(data_path):
        raise FileNotFoundError(f"no such raw data file: {data_path}")
    raw = np.fromfile(data_path, dtype=_ELEMENT_TYPES[etype])
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise VolumeIOError(
            f"{path}: data length mismatch (DimSize expects {expected}, found {raw.size})"
        )
    data = raw.astype(np.float64).reshape(dims[2], dims[1], dims[0])
    if not np.all(np.isfinite(data)):
        raise VolumeIOError(f"{path}: non-finite samples in payload")
    return Volume(data, spacing, origin)


def save_volume(vol, path, element_type="MET_DOUBLE"):
    """Write ``vol`` as ``path`` (.mhd) plus a sibling ``.raw`` payload."""
    path = os.fspath(path)
    if element_type not in _ELEMENT_TYPES:
        raise VolumeIOError(f"unsupported ElementType {element_type}")
    base = os.path.splitext(os.path.basename(path))[0]
    raw_name = base + ".raw"
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    dtype = _ELEMENT_TYPES[element_type]
    data = vol.data
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        data = np.clip(np.rint(data), info.min, info.max)

    def fmt(values):
        return " ".join(repr(float(v)) for v in values)

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {' '.join(str(n) for n in vol.dims)}",
        f"ElementSpacing = {fmt(vol.spacing)}",
        f"Offset = {fmt(vol.origin)}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    np.ascontiguousarray(data, dtype=dtype).tofile(raw_path)


# --------------------------------------------------------------------------
# resampling, smoothing, gradients


def _catmull_rom(t, a=-0.5):
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    tn = t[near]
    out[near] = (a + 2) * tn**3 - (a + 3) * tn**2 + 1
    tf = t[far]
    out[far] = a * tf**3 - 5 * a * tf**2 + 8 * a * tf - 4 * a
    return out


def _cubic_matrix(n_in, positions):
    """Dense (n_out, n_in) Catmull-Rom weights with clamp-to-edge taps."""
    base = np.floor(positions).astype(np.int64)
    mat = np.zeros((positions.size, n_in))
    rows = np.arange(positions.size)
    for off in (-1, 0, 1, 2):
        taps = base + off
        w = _catmull_rom(positions - taps)
        np.add.at(mat, (rows, np.clip(taps, 0, n_in - 1)), w)
    return mat


def resample_isotropic(vol, target_spacing):
    """Resample onto an isotropic grid with separable Catmull-Rom cubics.

    The output keeps the input origin and covers the input extent up to the
    last whole output voxel.
    """
    s = float(target_spacing)
    if not s > 0:
        raise ValueError("target_spacing must be > 0")
    out_dims = [int(math.floor(e / s + 1e-9)) + 1 for e in vol.extent()]
    if min(out_dims) < 2:
        raise ValueError(f"degenerate output dims {out_dims} for spacing {s}")
    data = vol.data
    # axis order of the array is (z, y, x); dims/spacing are (x, y, z)
    for axis_xyz in range(3):
        arr_axis = 2 - axis_xyz
        positions = np.arange(out_dims[axis_xyz]) * s / vol.spacing[axis_xyz]
        mat = _cubic_matrix(data.shape[arr_axis], positions)
        data = np.moveaxis(np.tensordot(mat, np.moveaxis(data, arr_axis, 0), axes=1), 0, arr_axis)
    return Volume(data, (s, s, s), vol.origin)


def _gaussian_kernel(sigma, spacing):
    radius = int(math.ceil(3.0 * sigma / spacing))
    x = np.arange(-radius, radius + 1) * spacing
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(vol, sigma):
    """Separable Gaussian smoothing (sigma in mm), clamp-to-edge borders."""
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Volume(vol.data, vol.spacing, vol.origin)
    data = vol.data
    for axis_xyz in range(3):
        k = _gaussian_kernel(sigma, vol.spacing[axis_xyz])
        data = ndimage.correlate1d(data, k, axis=2 - axis_xyz, mode="nearest")
    return Volume(data, vol.spacing, vol.origin)


def spatial_gradient(vol):
    """Intensity gradient in intensity/mm: central differences inside,
    one-sided differences on the border."""
    if min(vol.dims) < 2:
        raise ValueError("spatial_gradient needs at least 2 voxels per axis")
    sx, sy, sz = vol.spacing
    gz, gy, gx = np.gradient(vol.data, sz, sy, sx, edge_order=1)
    return VectorField(np.stack([gx, gy, gz], axis=-1), vol.spacing, vol.origin)


PYRAMID_SIGMA_FACTOR = 0.8


def build_pyramid(vol, levels):
    """Gaussian pyramid; level k+1 is level k smoothed with
    sigma = 0.8 * spacing and decimated by 2 along every axis."""
    levels = int(levels)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    dims = np.array(vol.dims)
    for _ in range(levels - 1):
        dims = -(-dims // 2)
    if levels > 1 and dims.min() < 4:
        raise ValueError(
            f"pyramid with {levels} levels leaves a coarsest grid {tuple(dims)} below 4 voxels"
        )
    out = [vol]
    for _ in range(levels - 1):
        prev = out[-1]
        # smoothing is isotropic in voxels of the current level
        sm = prev.data
        for axis_xyz in range(3):
            sp = prev.spacing[axis_xyz]
            k = _gaussian_kernel(PYRAMID_SIGMA_FACTOR * sp, sp)
            sm = ndimage.correlate1d(sm, k, axis=2 - axis_xyz, mode="nearest")
        dec = sm[::2, ::2, ::2]
        out.append(Volume(dec, tuple(2.0 * s for s in prev.spacing), prev.origin))
    return Pyramid(out)
