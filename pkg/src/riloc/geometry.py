"""Rotations, navigation states and frame constants.

World frame is right-handed and z-up, so gravity points along -z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

GRAVITY_MAGNITUDE = 9.81


def gravity_vector(magnitude: float = GRAVITY_MAGNITUDE) -> NDArray[np.float64]:
    """World-frame gravity ``(0, 0, -magnitude)`` in m/s^2."""
    if not np.isfinite(magnitude) or magnitude <= 0.0:
        raise ValueError(f"gravity magnitude must be positive, got {magnitude}")
    return np.array([0.0, 0.0, -float(magnitude)])


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: NDArray[np.float64]) -> NDArray[np.float64]:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class Rotation3:
    """Element of SO(3), stored as a unit quaternion ``(w, x, y, z)``.

    Instances are immutable. The quaternion is re-normalized on
    construction, so chains of compositions do not drift off the group.
    The sign is fixed to ``w >= 0`` so equal rotations compare equal.
    """

    __slots__ = ("_q", "_m")

    def __init__(self, quaternion: ArrayLike = (1.0, 0.0, 0.0, 0.0)):
        q = np.array(quaternion, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        self._q = q
        m = _quat_to_matrix(q)
        m.setflags(write=False)
        self._m = m

    @classmethod
    def identity(cls) -> Rotation3:
        return cls()

    @classmethod
    def from_quaternion(cls, q: ArrayLike) -> Rotation3:
        return cls(q)

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> Rotation3:
        """Convert an orthonormal matrix (Shepperd's method)."""
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(q)

    @classmethod
    def from_rotvec(cls, rv: ArrayLike) -> Rotation3:
        """Exponential map of an axis-angle vector (radians)."""
        rv = np.asarray(rv, dtype=float)
        angle = np.linalg.norm(rv)
        if angle < 1e-12:
            return cls([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]])
        axis = rv / angle
        s = np.sin(0.5 * angle)
        return cls([np.cos(0.5 * angle), *(s * axis)])

    @classmethod
    def rz(cls, angle: float) -> Rotation3:
        return cls([np.cos(0.5 * angle), 0.0, 0.0, np.sin(0.5 * angle)])

    @classmethod
    def from_euler_zyx(cls, yaw: float, pitch: float = 0.0, roll: float = 0.0) -> Rotation3:
        return cls.rz(yaw) @ cls.from_rotvec([0.0, pitch, 0.0]) @ cls.from_rotvec([roll, 0.0, 0.0])

    def as_quaternion(self) -> NDArray[np.float64]:
        return self._q.copy()

    def as_matrix(self) -> NDArray[np.float64]:
        return self._m

    def as_rotvec(self) -> NDArray[np.float64]:
        """Logarithm map, angle in ``[0, pi]``."""
        w = min(1.0, self._q[0])
        v = self._q[1:]
        sin_half = np.linalg.norm(v)
        if sin_half < 1e-12:
            return 2.0 * v
        angle = 2.0 * np.arctan2(sin_half, w)
        return angle * v / sin_half

    def yaw(self) -> float:
        m = self._m
        return float(np.arctan2(m[1, 0], m[0, 0]))

    def inverse(self) -> Rotation3:
        w, x, y, z = self._q
        return Rotation3([w, -x, -y, -z])

    def compose(self, other: Rotation3) -> Rotation3:
        """Rotation applying ``other`` first, then ``self``."""
        return Rotation3(_quat_mul(self._q, other._q))

    def __matmul__(self, other: Rotation3) -> Rotation3:
        return self.compose(other)

    def rotate(self, v: ArrayLike) -> NDArray[np.float64]:
        return self._m @ np.asarray(v, dtype=float)

    def angle_to(self, other: Rotation3) -> float:
        """Geodesic distance in radians."""
        return float(np.linalg.norm((self.inverse() @ other).as_rotvec()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rotation3):
            return NotImplemented
        return bool(np.array_equal(self._q, other._q))

    def __hash__(self) -> int:
        return hash(self._q.tobytes())

    def __repr__(self) -> str:
        w, x, y, z = self._q
        return f"Rotation3(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"


def compose(a: Rotation3, b: Rotation3) -> Rotation3:
    return a.compose(b)


def rotate(r: Rotation3, v: ArrayLike) -> NDArray[np.float64]:
    return r.rotate(v)


def _frozen_vec3(v: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.array(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NavState:
    """Orientation, position and velocity of the device at ``timestamp``."""

    timestamp: float
    orientation: Rotation3 = field(default_factory=Rotation3.identity)
    position: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    velocity: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if not np.isfinite(self.timestamp) or self.timestamp < 0.0:
            raise ValueError(f"timestamp must be finite and non-negative, got {self.timestamp}")
        object.__setattr__(self, "position", _frozen_vec3(self.position, "position"))
        object.__setattr__(self, "velocity", _frozen_vec3(self.velocity, "velocity"))

    def reduced(self) -> ReducedState:
        return ReducedState(self.position, self.velocity)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NavState):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.orientation == other.orientation
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.velocity, other.velocity)
        )


@dataclass(frozen=True)
class ReducedState:
    """Front-end state: position and velocity stacked as a 6-vector."""

    position: NDArray[np.float64]
    velocity: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _frozen_vec3(self.position, "position"))
        object.__setattr__(self, "velocity", _frozen_vec3(self.velocity, "velocity"))

    @classmethod
    def from_vector(cls, x: ArrayLike) -> ReducedState:
        x = np.asarray(x, dtype=float).reshape(6)
        return cls(x[:3], x[3:])

    def as_vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.position, self.velocity])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReducedState):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.velocity, other.velocity
        )
