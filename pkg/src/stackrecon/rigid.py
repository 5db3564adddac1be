"""6-DoF rigid transforms: Euler angles + translation with 4x4 matrix form.

Conventions, fixed once for the whole package:

* rotation matrix R = Rz(az) @ Ry(ay) @ Rx(ax), angles in degrees;
* a transform acts on points as t(p) = R @ p + d (matrix form [R d; 0 1]);
* rotations "about a center" c are expressed by folding the center into the
  translation: R @ (p - c) + c + d, see :func:`about_center`.

Angles are stored in degrees (the unit used throughout motion simulation
and error reporting) and converted to radians only when matrices are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

_ORTHO_TOL = 1e-9
_GIMBAL_TOL = 1e-7


def _rot_x(rad: float) -> np.ndarray:
    c, s = np.cos(rad), np.sin(rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(rad: float) -> np.ndarray:
    c, s = np.cos(rad), np.sin(rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(rad: float) -> np.ndarray:
    c, s = np.cos(rad), np.sin(rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_matrix_deg(alpha) -> np.ndarray:
    """3x3 rotation matrix for Euler angles (ax, ay, az) in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(alpha, dtype=float))
    return _rot_z(az) @ _rot_y(ay) @ _rot_x(ax)


def euler_matrix_derivs_deg(alpha) -> np.ndarray:
    """Derivatives dR/d(alpha_i) for angles in degrees, shape (3, 3, 3).

    Index 0 runs over the three angle parameters. The factor pi/180
    accounts for the degree parameterization.
    """
    ax, ay, az = np.deg2rad(np.asarray(alpha, dtype=float))
    rx, ry, rz = _rot_x(ax), _rot_y(ay), _rot_z(az)
    # derivative of an elementary rotation = rotation of the shifted angle
    # times the generator; write them out explicitly
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    scale = np.pi / 180.0
    return np.stack(
        [rz @ ry @ drx * scale, rz @ dry @ rx * scale, drz @ ry @ rx * scale]
    )


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion with rotation angles in degrees and translation in mm.

    Immutable; the homogeneous 4x4 matrix is built once at construction.
    """

    alpha: tuple[float, float, float] = (0.0, 0.0, 0.0)
    d: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        d = tuple(float(v) for v in self.d)
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(d))):
            raise InputError(f"non-finite rigid parameters: alpha={alpha} d={d}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "d", d)
        m = np.eye(4)
        m[:3, :3] = euler_matrix_deg(alpha)
        m[:3, 3] = d
        m.flags.writeable = False
        object.__setattr__(self, "_matrix", m)

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix [R d; 0 1]."""
        return self._matrix

    @property
    def rotation(self) -> np.ndarray:
        return self._matrix[:3, :3]

    @property
    def params(self) -> np.ndarray:
        """Parameter vector (ax, ay, az, dx, dy, dz) in degrees / mm."""
        return np.array(self.alpha + self.d)

    @classmethod
    def from_params(cls, params) -> "RigidTransform":
        p = np.asarray(params, dtype=float).reshape(6)
        return cls(alpha=tuple(p[:3]), d=tuple(p[3:]))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + np.asarray(self.d)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.params) <= tol)
        )


def params_to_matrix(t: RigidTransform) -> np.ndarray:
    """4x4 homogeneous matrix of a transform."""
    return t.matrix


def matrix_to_params(m: np.ndarray) -> RigidTransform:
    """Recover (alpha, d) from a rigid 4x4 (or 3x4) matrix.

    Raises :class:`InputError` if the rotation block is not orthonormal with
    determinant +1 within 1e-6. At gimbal lock (|cos ay| < 1e-7) the
    convention ax = 0 makes the decomposition deterministic.
    """
    m = np.asarray(m, dtype=float)
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0.0:
        raise InputError("matrix rotation block is not a proper rotation")
    sy = -r[2, 0]
    cy = np.hypot(r[2, 1], r[2, 2])
    ay = np.arctan2(sy, cy)
    if cy < _GIMBAL_TOL:
        ax = 0.0
        az = np.arctan2(-r[0, 1], r[1, 1])
    else:
        ax = np.arctan2(r[2, 1], r[2, 2])
        az = np.arctan2(r[1, 0], r[0, 0])
    alpha = tuple(np.rad2deg([ax, ay, az]))
    return RigidTransform(alpha=alpha, d=tuple(m[:3, 3]))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform acting as a after b: compose(a, b)(p) = a(b(p))."""
    return matrix_to_params(a.matrix @ b.matrix)


def inverse(t: RigidTransform) -> RigidTransform:
    r = t.rotation
    d = np.asarray(t.d)
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -r.T @ d
    return matrix_to_params(m)


def about_center(alpha, d, center) -> RigidTransform:
    """Rigid motion rotating about ``center`` instead of the origin.

    Equivalent matrix-form transform with translation d + c - R @ c, so that
    t(p) = R @ (p - c) + c + d.
    """
    r = euler_matrix_deg(alpha)
    c = np.asarray(center, dtype=float)
    d_eff = np.asarray(d, dtype=float) + c - r @ c
    return RigidTransform(alpha=tuple(np.asarray(alpha, float)), d=tuple(d_eff))


def apply_about_center(params, points, center) -> np.ndarray:
    """Apply the 6-vector (deg, mm) to points (..., 3) rotating about center."""
    p = np.asarray(params, dtype=float).reshape(6)
    r = euler_matrix_deg(p[:3])
    c = np.asarray(center, dtype=float)
    pts = np.asarray(points, dtype=float)
    return (pts - c) @ r.T + c + p[3:]


def geodesic_rotation_deg(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic distance between the two rotations, in degrees."""
    cos_t = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos_t, -1.0, 1.0))))


def save_transforms(path, transforms, losses=None) -> None:
    """Write transforms as text rows "ax ay az dx dy dz [loss]" (deg, mm).

    Uses repr-precision floats so regenerating a file from identical inputs
    is byte-identical.
    """
    lines = []
    for i, t in enumerate(transforms):
        row = " ".join(f"{v:.17g}" for v in t.params)
        if losses is not None:
            row += f" {losses[i]:.17g}"
        lines.append(row)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_transforms(path) -> list[RigidTransform]:
    """Read transforms written by :func:`save_transforms` (loss column ignored)."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) < 6:
                raise InputError(f"transform row needs >= 6 values, got {len(vals)}")
            out.append(RigidTransform.from_params(vals[:6]))
    return out
