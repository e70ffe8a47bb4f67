"""Rigid transforms in homogeneous coordinates, centroids and dental-arch curves.

Transforms are plain ``(..., 4, 4)`` float arrays; point clouds are ``(..., N, 3)``.
Every function here is pure and works on stacks of transforms/clouds through
numpy broadcasting.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InsufficientDataError, InvalidArgumentError, NumericError

ARCH_DEGREE = 4
CURVE_SAMPLES = 1024


def make_transform(rotation, displacement):
    """Pack a 3x3 rotation block and a displacement into a 4x4 homogeneous matrix."""
    rotation = np.asarray(rotation, dtype=np.float64)
    displacement = np.asarray(displacement, dtype=np.float64)
    if rotation.shape[-2:] != (3, 3) or displacement.shape[-1:] != (3,):
        raise InvalidArgumentError(
            f"expected rotation (...,3,3) and displacement (...,3), got {rotation.shape} and {displacement.shape}"
        )
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(displacement))):
        raise InvalidArgumentError("rotation and displacement must be finite")
    batch = np.broadcast_shapes(rotation.shape[:-2], displacement.shape[:-1])
    out = np.zeros(batch + (4, 4))
    out[..., :3, :3] = rotation
    out[..., :3, 3] = displacement
    out[..., 3, 3] = 1.0
    return out


def translation(offset):
    return make_transform(np.eye(3), offset)


def apply_transform(t, cloud):
    """Map points ``(..., N, 3)`` through ``t`` ``(..., 4, 4)``.

    The fourth row of ``t`` is ignored (treated as ``[0, 0, 0, 1]``), which is what
    lets raw regressed matrices be applied without projecting them first.
    """
    t = np.asarray(t)
    cloud = np.asarray(cloud)
    if cloud.shape[-1] != 3 or cloud.shape[-2] == 0:
        raise InvalidArgumentError(f"expected a non-empty (..., N, 3) cloud, got {cloud.shape}")
    rot = t[..., :3, :3]
    disp = t[..., None, :3, 3]
    return cloud @ np.swapaxes(rot, -1, -2) + disp


def compose(a, b):
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return np.asarray(a) @ np.asarray(b)


def invert(t, tol=1e-4):
    """Rigid inverse ``(R^T, -R^T D)``; refuses rotation blocks that are not orthonormal."""
    t = np.asarray(t, dtype=np.float64)
    rot = t[..., :3, :3]
    disp = t[..., :3, 3]
    gram = np.swapaxes(rot, -1, -2) @ rot
    dev = np.max(np.abs(gram - np.eye(3)), axis=(-2, -1))
    if not np.all(np.isfinite(dev)) or np.any(dev > tol):
        raise NumericError(
            f"rotation block is not orthonormal (max |R^T R - I| = {np.max(dev):.3g} > {tol:g}); "
            "cannot form a rigid inverse"
        )
    rot_t = np.swapaxes(rot, -1, -2)
    return make_transform(rot_t, -np.einsum("...ij,...j->...i", rot_t, disp))


def _axis_rotations(angles):
    angles = np.asarray(angles, dtype=np.float64)
    c, s = np.cos(angles), np.sin(angles)
    one, zero = np.ones_like(c[..., 0]), np.zeros_like(c[..., 0])
    rx = np.stack([one, zero, zero, zero, c[..., 0], -s[..., 0], zero, s[..., 0], c[..., 0]], -1)
    ry = np.stack([c[..., 1], zero, s[..., 1], zero, one, zero, -s[..., 1], zero, c[..., 1]], -1)
    rz = np.stack([c[..., 2], -s[..., 2], zero, s[..., 2], c[..., 2], zero, zero, zero, one], -1)
    shape = angles.shape[:-1] + (3, 3)
    return rx.reshape(shape), ry.reshape(shape), rz.reshape(shape)


def euler_to_rotation(angles):
    """Intrinsic X-then-Y-then-Z rotation, ``R = Rx(a) @ Ry(b) @ Rz(c)``. Angles in radians."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape[-1:] != (3,) or not np.all(np.isfinite(angles)):
        raise InvalidArgumentError("angles must be a finite (..., 3) array")
    rx, ry, rz = _axis_rotations(angles)
    return rx @ ry @ rz


def rotation_to_euler(rot, gimbal_tol=1e-6):
    """Inverse of :func:`euler_to_rotation` for proper rotations.

    Near gimbal lock (``|r13| > 1 - gimbal_tol``) the X and Z angles are not separable;
    the Z angle is then pinned to 0 and the whole residual twist is assigned to X.
    """
    rot = np.asarray(rot, dtype=np.float64)
    r13 = np.clip(rot[..., 0, 2], -1.0, 1.0)
    b = np.arcsin(r13)
    a = np.arctan2(-rot[..., 1, 2], rot[..., 2, 2])
    c = np.arctan2(-rot[..., 0, 1], rot[..., 0, 0])
    locked = np.abs(r13) > 1.0 - gimbal_tol
    a = np.where(locked, np.arctan2(rot[..., 2, 1], rot[..., 1, 1]), a)
    c = np.where(locked, 0.0, c)
    return np.stack([a, b, c], axis=-1)


def centroid(cloud):
    cloud = np.asarray(cloud)
    if cloud.ndim < 2 or cloud.shape[-2] == 0:
        raise InvalidArgumentError("centroid of an empty cloud is undefined")
    return cloud.mean(axis=-2)


@dataclass(frozen=True)
class ArchCurve:
    """Polynomial ``y = sum(coefficients[k] * x**k)`` in the z = 0 plane over ``x_range``."""

    coefficients: np.ndarray
    x_range: tuple

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, self.coefficients)


def fit_arch_curve(centroids, validity=None):
    """Least-squares degree-4 fit of y on x over the valid centroids projected to z = 0."""
    centroids = np.asarray(centroids, dtype=np.float64)
    if validity is None:
        validity = np.ones(len(centroids), dtype=bool)
    pts = centroids[np.asarray(validity, dtype=bool)]
    if len(pts) < ARCH_DEGREE + 1:
        raise InsufficientDataError(
            f"arch fit needs at least {ARCH_DEGREE + 1} valid centroids, got {len(pts)}"
        )
    x, y = pts[:, 0], pts[:, 1]
    vander = np.polynomial.polynomial.polyvander(x, ARCH_DEGREE)
    coef, *_ = np.linalg.lstsq(vander, y, rcond=None)
    return ArchCurve(coefficients=coef, x_range=(float(x.min()), float(x.max())))


def point_to_curve_distance(p, curve, samples=CURVE_SAMPLES):
    """Distance from the z = 0 projection of ``p`` to ``curve`` restricted to its x-range.

    A coarse scan over ``samples`` abscissae brackets the nearest point, then a bounded
    scalar minimisation refines it inside the neighbouring sample intervals.
    """
    px, py = float(p[0]), float(p[1])
    lo, hi = curve.x_range
    if hi <= lo:
        return float(np.hypot(px - lo, py - curve(lo)))

    def sqdist(x):
        return (x - px) ** 2 + (curve(x) - py) ** 2

    xs = np.linspace(lo, hi, samples)
    d2 = sqdist(xs)
    k = int(np.argmin(d2))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, samples - 1)]
    res = minimize_scalar(sqdist, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    best = min(float(d2[k]), float(res.fun))
    return float(np.sqrt(max(best, 0.0)))
