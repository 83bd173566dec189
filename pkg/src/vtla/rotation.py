"""6D rotation representation: first two matrix columns, decoded by
Gram-Schmidt orthonormalization."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot_to_6d(rot: np.ndarray) -> np.ndarray:
    """Encode an orthonormal rotation matrix as [col0 ; col1]."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ShapeError(f"rotation matrix must be 3x3, got {rot.shape}")
    return np.concatenate([rot[:, 0], rot[:, 1]])


def sixd_to_rot(v: np.ndarray) -> np.ndarray:
    """Decode 6 floats to a rotation matrix via Gram-Schmidt.

    b1 = norm(v1); b2 = norm(v2 - (b1.v2) b1); b3 = b1 x b2.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (6,):
        raise ShapeError(f"6d rotation must have shape (6,), got {v.shape}")
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise ValidationError("degenerate 6d rotation: first vector is zero")
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < 1e-8:
        raise ValidationError("degenerate 6d rotation: vectors are parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def sixd_to_rot_safe(v: np.ndarray) -> np.ndarray:
    """Total variant for environment stepping: degenerate input -> identity."""
    try:
        return sixd_to_rot(v)
    except ValidationError:
        return np.eye(3)


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation from QR of a Gaussian matrix, det +1."""
    m = rng.normal((3, 3), dtype=np.float64)
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q
