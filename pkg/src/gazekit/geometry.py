"""Angle/vector conversions, rotations and the angular error metric.

Conventions used throughout the toolkit:

* Angles are (pitch, yaw) pairs in radians.  Pitch is positive looking up,
  yaw is positive toward the subject's left as seen from the camera.
  Valid ranges: pitch in [-pi/2, pi/2], yaw in (-pi, pi].
* The camera looks along +z toward the subject; a (0, 0) gaze points
  straight into the camera, i.e. along (0, 0, -1).
* Direction vector for (p, y):

      v = (-cos(p)*sin(y), -sin(p), -cos(p)*cos(y))

* Rotation matrices are built so that pitch (about x) is applied to the
  base direction first, then yaw (about y); as a matrix product that is
  R = R_yaw(y) @ R_pitch(p), which reproduces the vector formula above
  when applied to (0, 0, -1).

All functions are pure, operate in double precision and broadcast over a
leading batch dimension: angles have shape (..., 2) as (pitch, yaw) and
vectors have shape (..., 3).
"""

from __future__ import annotations

import numpy as np

BASE_DIRECTION = np.array([0.0, 0.0, -1.0])

_UNIT_NORM_TOL = 1e-6


def angles_to_vec(angles):
    """Convert (pitch, yaw) pairs to unit direction vectors.

    Args:
        angles: array-like with shape (..., 2), radians.

    Returns:
        float64 array with shape (..., 3); rows are unit vectors.
    """
    a = np.asarray(angles, dtype=np.float64)
    pitch, yaw = a[..., 0], a[..., 1]
    cos_p = np.cos(pitch)
    return np.stack(
        [-cos_p * np.sin(yaw), -np.sin(pitch), -cos_p * np.cos(yaw)], axis=-1
    )


def vec_to_angles(vec):
    """Convert unit direction vectors back to (pitch, yaw) pairs.

    Inverse of :func:`angles_to_vec` for pitch strictly inside
    (-pi/2, pi/2).

    Raises:
        ValueError: if any input norm is outside [1 - 1e-6, 1 + 1e-6].
    """
    v = np.asarray(vec, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_NORM_TOL):
        bad = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"vec_to_angles expects unit vectors (norm off by {bad:.3g})")
    pitch = np.arcsin(np.clip(-v[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-v[..., 0], -v[..., 2])
    return np.stack([pitch, yaw], axis=-1)


def normalize(vec):
    """Scale vectors to unit norm. Raises on zero-norm input."""
    v = np.asarray(vec, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return v / norms


def angular_error(a, b):
    """Angle in degrees between the directions of two (pitch, yaw) pairs.

    Symmetric, non-negative, in [0, 180].  Evaluated as
    atan2(|va x vb|, va . vb), which equals acos of the clamped dot
    product but stays exact for identical inputs and well-conditioned
    near 0 and 180 degrees.
    """
    return angular_error_vec(angles_to_vec(a), angles_to_vec(b))


def angular_error_vec(va, vb):
    """Angle in degrees between two unit vectors (no conversion)."""
    va, vb = np.asarray(va, dtype=np.float64), np.asarray(vb, dtype=np.float64)
    cross = np.linalg.norm(np.cross(va, vb), axis=-1)
    dots = np.sum(va * vb, axis=-1)
    return np.degrees(np.arctan2(cross, dots))


def cosine_distance(a, b):
    """1 - cos of the angle between the directions of two angle pairs."""
    va = angles_to_vec(a)
    vb = angles_to_vec(b)
    return 1.0 - np.sum(va * vb, axis=-1)


def rotation_about_x(angle):
    """Right-handed rotation matrix about the x axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about_y(angle):
    """Right-handed rotation matrix about the y axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_from_angles(angles):
    """3x3 rotation carrying the base direction (0,0,-1) to ``angles``.

    Pitch rotates about x (sign chosen so positive pitch looks up under
    the vector convention), yaw about y, pitch applied first.
    """
    a = np.asarray(angles, dtype=np.float64)
    if a.shape != (2,):
        raise ValueError(f"expected a single (pitch, yaw) pair, got shape {a.shape}")
    return rotation_about_y(a[1]) @ rotation_about_x(-a[0])


def check_rotation(mat, tol=1e-9):
    """Validate orthonormality and det=+1 of a rotation matrix."""
    m = np.asarray(mat, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValueError("matrix determinant is not +1")
    return m


def compose_gaze(head, eye_in_head):
    """Gaze angles of an eye-in-head rotation composed with a head rotation.

    Args:
        head: 3x3 head rotation matrix, or a (pitch, yaw) pair.
        eye_in_head: 3x3 eye-in-head rotation matrix, or a (pitch, yaw) pair.

    Returns:
        (pitch, yaw) of head . eye_in_head . (0,0,-1).
    """
    rh = _as_rotation(head)
    re = _as_rotation(eye_in_head)
    return vec_to_angles(rh @ re @ BASE_DIRECTION)


def _as_rotation(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape == (2,):
        return rotation_from_angles(r)
    return check_rotation(r)


def mirror_sample(img, head, gaze):
    """Mirror an eye sample about the vertical axis.

    Image columns are reversed and both yaw signs flipped; pitches are
    unchanged.  Involution: applying twice returns the original sample.

    Returns:
        (mirrored image, mirrored head, mirrored gaze); the image is a copy.
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected HxW or HxWxC image, got ndim={img.ndim}")
    flipped = img[:, ::-1].copy()
    head = np.asarray(head, dtype=np.float64)
    gaze = np.asarray(gaze, dtype=np.float64)
    return flipped, head * [1.0, -1.0], gaze * [1.0, -1.0]


def validate_angles(angles):
    """Check the pitch/yaw range invariants; returns the array."""
    a = np.asarray(angles, dtype=np.float64)
    pitch, yaw = a[..., 0], a[..., 1]
    if np.any(np.abs(pitch) > np.pi / 2):
        raise ValueError("pitch out of [-pi/2, pi/2]")
    if np.any((yaw <= -np.pi) | (yaw > np.pi)):
        raise ValueError("yaw out of (-pi, pi]")
    return a
