"""Probabilistic IMU motion model and the random-walk baseline.

Both models act on the reduced state ``x = (p, v)`` in R^6. The IMU model
takes the current orientation as given, compensates the accelerometer for
bias and gravity, and samples a signed acceleration magnitude along the
resulting world-frame direction::

    a_w = R (a - bias_a) + g
    u   = (zeta * a_w / |a_w|, nu),   zeta ~ N(0, sigma_a^2), nu ~ N(0, sigma_v^2 I)
    x'  = F x + G u
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import ReducedState, Rotation3, gravity_vector

# Below this norm (m/s^2) the compensated acceleration carries no direction.
DEGENERATE_EPS = 1e-3


@dataclass(frozen=True)
class ImuBias:
    accel: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    gyro: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        for name in ("accel", "gyro"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"bias {name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImuBias):
            return NotImplemented
        return np.array_equal(self.accel, other.accel) and np.array_equal(self.gyro, other.gyro)


@dataclass(frozen=True)
class ImuMotionParams:
    sigma_a: float = 1.5
    sigma_v: float = 0.005

    def __post_init__(self) -> None:
        if not (self.sigma_a >= 0 and self.sigma_v >= 0):
            raise ValueError(f"motion noise must be non-negative: {self}")


@dataclass(frozen=True)
class RandomWalkParams:
    sigma_p: float = 0.1
    sigma_v: float = 0.05

    def __post_init__(self) -> None:
        if not (self.sigma_p >= 0 and self.sigma_v >= 0):
            raise ValueError(f"motion noise must be non-negative: {self}")


def system_matrices(t_s: float) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """State and input matrices of the constant-acceleration model."""
    if not t_s > 0:
        raise ValueError(f"sampling time must be positive, got {t_s}")
    i3 = np.eye(3)
    z3 = np.zeros((3, 3))
    F = np.block([[i3, t_s * i3], [z3, i3]])
    G = np.block([[0.5 * t_s**2 * i3, t_s * i3], [t_s * i3, i3]])
    return F, G


def compensated_acceleration(
    a: ArrayLike, rot: Rotation3, bias: ImuBias = ImuBias(), g: ArrayLike | None = None
) -> NDArray[np.float64]:
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    return rot.rotate(np.asarray(a, dtype=float) - bias.accel) + g


def tangential_direction(
    a: ArrayLike,
    rot: Rotation3,
    bias: ImuBias = ImuBias(),
    g: ArrayLike | None = None,
    eps: float = DEGENERATE_EPS,
) -> NDArray[np.float64] | None:
    """Unit world-frame direction of the compensated acceleration, or ``None`` if degenerate."""
    aw = compensated_acceleration(a, rot, bias, g)
    n = np.linalg.norm(aw)
    if n <= eps:
        return None
    return aw / n


def imu_motion_step(
    x: NDArray[np.float64], direction: NDArray[np.float64] | None, zeta, nu, t_s: float
) -> NDArray[np.float64]:
    """Apply ``x' = F x + G u`` for explicit inputs.

    ``x`` may be a single 6-vector or an (n, 6) batch; ``zeta`` is a scalar
    or (n,) and ``nu`` a 3-vector or (n, 3).
    """
    x = np.asarray(x, dtype=float)
    p, v = x[..., :3], x[..., 3:]
    zeta = np.asarray(zeta, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if direction is None:
        acc = np.zeros_like(v)
    else:
        acc = zeta[..., None] * np.asarray(direction)
    # F x + G u written out blockwise
    p_new = p + t_s * v + 0.5 * t_s**2 * acc + t_s * nu
    v_new = v + t_s * acc + nu
    return np.concatenate([p_new, v_new], axis=-1)


def propagate_imu(
    x: NDArray[np.float64],
    direction: NDArray[np.float64] | None,
    params: ImuMotionParams,
    t_s: float,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Sample the IMU motion model for an (n, 6) batch of states."""
    n = x.shape[0]
    zeta = rng.normal(0.0, params.sigma_a, n)
    nu = rng.normal(0.0, params.sigma_v, (n, 3))
    return imu_motion_step(x, direction, zeta, nu, t_s)


def propagate_random_walk(
    x: NDArray[np.float64], params: RandomWalkParams, t_s: float, rng: np.random.Generator
) -> NDArray[np.float64]:
    n = x.shape[0]
    out = np.empty_like(x)
    out[:, :3] = x[:, :3] + t_s * x[:, 3:] + rng.normal(0.0, params.sigma_p, (n, 3))
    out[:, 3:] = x[:, 3:] + rng.normal(0.0, params.sigma_v, (n, 3))
    return out


def sample_imu_motion(
    state: ReducedState,
    a: ArrayLike,
    rot: Rotation3,
    bias: ImuBias,
    params: ImuMotionParams,
    t_s: float,
    rng: np.random.Generator,
    g: ArrayLike | None = None,
) -> ReducedState:
    if not t_s > 0:
        raise ValueError(f"sampling time must be positive, got {t_s}")
    d = tangential_direction(a, rot, bias, g)
    x = propagate_imu(state.as_vector()[None, :], d, params, t_s, rng)[0]
    return ReducedState.from_vector(x)


def sample_random_walk(
    state: ReducedState, params: RandomWalkParams, t_s: float, rng: np.random.Generator
) -> ReducedState:
    if not t_s > 0:
        raise ValueError(f"sampling time must be positive, got {t_s}")
    x = propagate_random_walk(state.as_vector()[None, :], params, t_s, rng)[0]
    return ReducedState.from_vector(x)
