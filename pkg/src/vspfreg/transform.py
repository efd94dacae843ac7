"""Six-parameter rigid transform ``T(x) = R (x - c) + c + t``.

``R = Rz(rz) @ Ry(ry) @ Rx(rx)``; translations in mm, rotations in radians.
The rotation center ``c`` defaults to the coordinate origin; registration
passes the reference volume's physical center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["RigidParams", "rotation_matrix", "apply", "jacobian", "propagate_to_finer"]


@dataclass(frozen=True)
class RigidParams:
    t: tuple = (0.0, 0.0, 0.0)
    r: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        r = tuple(float(v) for v in self.r)
        if len(t) != 3 or len(r) != 3:
            raise ValueError("RigidParams needs 3 translations and 3 rotations")
        if not all(math.isfinite(v) for v in t + r):
            raise ValueError("RigidParams entries must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != 6:
            raise ValueError("expected 6 parameters [tx, ty, tz, rx, ry, rz]")
        return cls(tuple(values[:3]), tuple(values[3:]))

    @classmethod
    def identity(cls):
        return cls()

    def as_array(self):
        return np.array(self.t + self.r, dtype=np.float64)

    def to_json(self):
        return [float(v) for v in self.t + self.r]


def _rotations(r):
    rx, ry, rz = r
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(params):
    (Rx, Ry, Rz), _ = _rotations(params.r)
    return Rz @ Ry @ Rx


def rotation_derivatives(params):
    """``[dR/drx, dR/dry, dR/drz]`` as a (3, 3, 3) array."""
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _rotations(params.r)
    return np.stack([Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx])


def _center(center):
    return np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)


def apply(params, points, center=None):
    """Map a point (3,) or points (n, 3) through ``T``."""
    pts = np.asarray(points, dtype=np.float64)
    c = _center(center)
    R = rotation_matrix(params)
    return (pts - c) @ R.T + c + np.asarray(params.t)


def jacobian(params, points, center=None):
    """dT(x)/dtheta: (3, 6) for one point, (n, 3, 6) for many."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    rel = np.atleast_2d(pts) - _center(center)
    dR = rotation_derivatives(params)
    J = np.zeros((rel.shape[0], 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    for k in range(3):
        J[:, :, 3 + k] = rel @ dR[k].T
    return J[0] if single else J


def propagate_to_finer(params):
    """Hand-off between pyramid levels.

    Parameters are kept in mm and radians at every level, so the value is
    unchanged; only re-validated.
    """
    return RigidParams(params.t, params.r)
