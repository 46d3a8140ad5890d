"""Closed-form SO(3) / SE(3) machinery.

Conventions
-----------
* A rotation is a 3x3 float array.
* A twist is a length-6 float array ``[omega, u]``: ``omega`` is the
  axis-angle vector (radians) and ``u`` the translational part of the
  se(3) element, so that ``exp_se3`` is the matrix exponential of::

      [[hat3(omega), u],
       [0,           0]]

* Every coefficient is written in terms of the *unnormalised* ``omega``
  with ``theta = |omega|``:  sin(theta)/theta, (1 - cos theta)/theta^2 and
  (theta - sin theta)/theta^3.  Below ``SMALL_ANGLE`` those are replaced by
  their 4th-order Taylor expansions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
# trace(R) <= -1 + NEAR_PI_TRACE selects the axis-from-symmetric-part branch.
NEAR_PI_TRACE = 1e-6
# Compositions between polar re-projections of a running rotation.
RENORM_PERIOD = 100

_I3 = np.eye(3)


def hat3(omega) -> np.ndarray:
    """Skew matrix ``[omega]x`` with ``hat3(w) @ v == cross(w, v)``.

    Accepts a single 3-vector or a stack of shape ``(..., 3)``.
    """
    w = np.asarray(omega, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee3(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def hat6(v) -> np.ndarray:
    """4x4 se(3) matrix of a twist ``[omega, u]``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = hat3(v[:3])
    out[:3, 3] = v[3:]
    return out


def vee6(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.concatenate([vee3(m[:3, :3]), m[:3, 3]])


def _coefficients(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        return (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta**3


def exp_so3(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(float(w @ w))
    a, b, _ = _coefficients(theta)
    k = hat3(w)
    return _I3 + a * k + b * (k @ k)


def log_so3(r) -> np.ndarray:
    """Axis-angle vector of a rotation, with norm in ``[0, pi]``.

    The angle comes from ``atan2`` of the skew and symmetric parts, which
    stays well conditioned at both ends of the range.  Near ``pi`` the axis
    is read off the symmetric part, ``(R + R^T)/2 = cos(t) I + (1 - cos t) a a^T``,
    and its sign is taken from the (small) skew part.
    """
    r = np.asarray(r, dtype=float)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    skew = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = math.sqrt(float(skew @ skew))
    c = 0.5 * (tr - 1.0)
    theta = math.atan2(s, c)

    if tr <= -1.0 + NEAR_PI_TRACE:
        sym = 0.5 * (r + r.T)
        aat = (sym - c * _I3) / (1.0 - c)
        k = int(np.argmax(np.diag(aat)))
        axis = aat[:, k] / math.sqrt(max(aat[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ skew < 0.0:
            axis = -axis
        return theta * axis

    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return skew * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    return skew * (theta / s)


def left_jacobian(omega) -> np.ndarray:
    """``P`` with ``t = P u``: I + (1-cos t)/t^2 W + (t - sin t)/t^3 W^2."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(float(w @ w))
    _, b, c = _coefficients(theta)
    k = hat3(w)
    return _I3 + b * k + c * (k @ k)


def left_jacobian_inv(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(float(w @ w))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _coefficients(theta)
        d = (1.0 - a / (2.0 * b)) / (theta * theta)
    k = hat3(w)
    return _I3 - 0.5 * k + d * (k @ k)


def orthonormalize(r) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return (u * np.array([1.0, 1.0, d])) @ vt


@dataclass(frozen=True, eq=False)
class RigidMotion:
    """A rigid motion ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidMotion:
        return cls(_I3, np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidMotion:
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> RigidMotion:
        rt = self.rotation.T
        return RigidMotion(rt, -(rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or a stack ``(n, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidMotion) -> RigidMotion:
        return RigidMotion(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def renormalized(self) -> RigidMotion:
        return RigidMotion(orthonormalize(self.rotation), self.translation)

    def __repr__(self):
        return f"RigidMotion(\n{np.array2string(self.matrix(), precision=6)})"


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return a @ b


def inverse(m: RigidMotion) -> RigidMotion:
    return m.inverse()


def apply(m: RigidMotion, points) -> np.ndarray:
    return m.apply(points)


def exp_se3(v) -> RigidMotion:
    v = np.asarray(v, dtype=float).reshape(6)
    w, u = v[:3], v[3:]
    theta = math.sqrt(float(w @ w))
    a, b, c = _coefficients(theta)
    k = hat3(w)
    k2 = k @ k
    rot = _I3 + a * k + b * k2
    p = _I3 + b * k + c * k2
    return RigidMotion(rot, p @ u)


def log_se3(m: RigidMotion) -> np.ndarray:
    w = log_so3(m.rotation)
    return np.concatenate([w, left_jacobian_inv(w) @ m.translation])


def rotation_angle_error(a, b) -> float:
    """Geodesic angle (radians) between two rotations.

    Either argument may be a rotation matrix or a ``RigidMotion``.
    """
    ra = a.rotation if isinstance(a, RigidMotion) else np.asarray(a, dtype=float)
    rb = b.rotation if isinstance(b, RigidMotion) else np.asarray(b, dtype=float)
    return float(np.linalg.norm(log_so3(ra @ rb.T)))


def translation_norm_error(a: RigidMotion, b: RigidMotion) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def is_rotation(r, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.linalg.norm(r.T @ r - _I3) <= tol
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi,
                    min_angle: float = 0.0) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle in ``[min_angle, max_angle]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(min_angle, max_angle)
    return exp_so3(angle * axis)
