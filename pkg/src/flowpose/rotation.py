"""Exact rotation math: canonical unit quaternions, axis-angle, SVD projection.

Quaternions are stored (w, x, y, z) with w >= 0, which picks one
representative of the double cover once and for all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rotation", "TwoVectorFrame", "InvalidRotationError", "NearCutLocusError",
    "DegenerateProjectionError", "InvalidFrameError", "DegenerateMeanError",
    "quat_to_matrix", "matrix_to_quat", "axis_angle_exp", "axis_angle_log",
    "geodesic_distance", "special_orthogonalize", "frame_complete",
    "rotation_mean", "svd3",
]

_UNIT_TOL = 1e-12


class InvalidRotationError(ValueError):
    pass


class NearCutLocusError(ValueError):
    pass


class DegenerateProjectionError(ValueError):
    pass


class InvalidFrameError(ValueError):
    pass


class DegenerateMeanError(ValueError):
    pass


def _canonicalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidRotationError("quaternion has zero or non-finite norm")
    q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q)):
        q = -q
    return q


def _first_nonzero_negative(q):
    for v in q[1:]:
        if v != 0.0:
            return v < 0.0
    return False


@dataclass(frozen=True)
class Rotation:
    """An element of SO(3) as a canonical-sign unit quaternion (w, x, y, z)."""

    q: np.ndarray

    def __init__(self, q):
        object.__setattr__(self, "q", _canonicalize(q))

    @staticmethod
    def identity():
        return Rotation((1.0, 0.0, 0.0, 0.0))

    @staticmethod
    def from_matrix(m):
        return matrix_to_quat(m)

    def matrix(self):
        return quat_to_matrix(self)

    def compose(self, other: "Rotation") -> "Rotation":
        """Hamilton product self * other (apply ``other`` first)."""
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation((
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation((w, -x, -y, -z))

    def apply(self, v):
        return np.asarray(v, dtype=np.float64) @ self.matrix().T

    def to_json(self):
        # json emits full repr precision (17 significant digits)
        return [float(v) for v in self.q]

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.q, other.q)

    def allclose(self, other: "Rotation", atol=1e-10):
        return bool(np.allclose(self.q, other.q, atol=atol))


@dataclass(frozen=True)
class TwoVectorFrame:
    """Two orthonormal vectors; the third column of a rotation is implied."""

    u1: np.ndarray
    u2: np.ndarray

    def __init__(self, u1, u2):
        u1 = np.asarray(u1, dtype=np.float64)
        u2 = np.asarray(u2, dtype=np.float64)
        if abs(np.linalg.norm(u1) - 1.0) > 1e-10 or abs(np.linalg.norm(u2) - 1.0) > 1e-10:
            raise InvalidFrameError("frame vectors must be unit length")
        if abs(float(u1 @ u2)) > 1e-10:
            raise InvalidFrameError("frame vectors must be orthogonal")
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)


def quat_to_matrix(r: Rotation) -> np.ndarray:
    w, x, y, z = r.q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> Rotation:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidRotationError("expected a 3x3 matrix")
    if not np.allclose(m @ m.T, np.eye(3), atol=1e-6) or np.linalg.det(m) < 0.0:
        raise InvalidRotationError("matrix is not a rotation within tolerance")
    # Shepperd's method: pick the largest pivot for stability
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = (0.25 * s,
             (m[2, 1] - m[1, 2]) / s,
             (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s)
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s,
             (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
             0.25 * s, (m[1, 2] + m[2, 1]) / s)
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    return Rotation(q)


def axis_angle_exp(v) -> Rotation:
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # second-order series keeps exp(log(r)) tight near the identity
        half = 0.5 * angle
        return Rotation((1.0 - half * half / 2.0, *(0.5 * v)))
    axis = v / angle
    half = 0.5 * angle
    return Rotation((np.cos(half), *(np.sin(half) * axis)))


def axis_angle_log(r: Rotation) -> np.ndarray:
    w = min(r.q[0], 1.0)
    angle = 2.0 * np.arccos(w)
    if angle >= np.pi - 1e-6:
        raise NearCutLocusError("rotation angle too close to pi for a stable log")
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < 1e-12:
        return 2.0 * r.q[1:]
    return r.q[1:] * (angle / s)


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    d = abs(float(a.q @ b.q))
    return 2.0 * np.arccos(min(d, 1.0))


def svd3(m):
    """SVD of a 3x3 matrix with descending nonnegative singular values."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("svd3 expects a 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    # deterministic column signs: largest-|entry| of each U column positive
    for i in range(3):
        k = np.argmax(np.abs(u[:, i]))
        if u[k, i] < 0:
            u[:, i] = -u[:, i]
            vt[i, :] = -vt[i, :]
    return u, s, vt.T


def special_orthogonalize(m) -> Rotation:
    """Nearest rotation in Frobenius norm: U V^T diag(1, 1, det(UV^T))."""
    m = np.asarray(m, dtype=np.float64)
    u, s, v = svd3(m)
    if s[2] <= 1e-9:
        raise DegenerateProjectionError("matrix is rank deficient")
    d = np.sign(np.linalg.det(u @ v.T))
    r = u @ np.diag([1.0, 1.0, d]) @ v.T
    return matrix_to_quat(r)


def frame_complete(f: TwoVectorFrame) -> Rotation:
    u3 = np.cross(f.u1, f.u2)
    m = np.column_stack([f.u1, f.u2, u3])
    if not np.allclose(m @ m.T, np.eye(3), atol=1e-6):
        raise InvalidFrameError("frame is not orthonormal within tolerance")
    return matrix_to_quat(m)


def rotation_mean(rotations, weights=None) -> Rotation:
    """Chordal L2 mean: project the weighted sum of matrices onto SO(3)."""
    rotations = list(rotations)
    if not rotations:
        raise ValueError("rotation_mean needs at least one rotation")
    if weights is None:
        weights = np.ones(len(rotations))
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    acc = np.zeros((3, 3))
    for r, w in zip(rotations, weights):
        acc += w * r.matrix()
    try:
        return special_orthogonalize(acc)
    except DegenerateProjectionError as e:
        raise DegenerateMeanError("weighted rotation sum is rank deficient") from e
