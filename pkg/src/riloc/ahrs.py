"""Complementary-filter attitude and heading estimation.

The gyroscope is integrated at the IMU rate. The accelerometer pulls the
tilt toward the measured gravity direction and the magnetometer pulls the
yaw toward magnetic north. Both corrections are first-order: each update
removes ``gain * dt`` of the remaining angular error, so gains are rates
in 1/s and the filter behaves the same at any sampling rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .geometry import GRAVITY_MAGNITUDE, Rotation3
from .motion import ImuBias
from .sensors import ImuSample, MagSample

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class AhrsConfig:
    accel_gain: float = 0.02
    mag_gain: float = 0.01
    use_magnetometer: bool = True
    # accelerometer is ignored when its norm is this far from gravity
    accel_gate: float = 2.0
    # nor while turning faster than this (rad/s): centripetal acceleration
    # would pass the norm gate and tilt the estimate
    rate_gate: float = 0.3
    gravity: float = GRAVITY_MAGNITUDE
    # heading of the horizontal magnetic field in the world frame
    mag_heading: float = 0.0

    def __post_init__(self) -> None:
        for name in ("accel_gain", "mag_gain"):
            g = getattr(self, name)
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {g}")
        if not self.accel_gate >= 0.0 or not self.rate_gate > 0.0:
            raise ValueError("accel_gate must be non-negative and rate_gate positive")


@dataclass(frozen=True)
class AhrsState:
    orientation: Rotation3
    timestamp: float
    gyro_bias: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    accel_bias_ref: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _qrot(q, v):
    w, x, y, z = q
    vx, vy, vz = v
    # v + 2 w (u x v) + 2 u x (u x v)
    cx = y * vz - z * vy
    cy = z * vx - x * vz
    cz = x * vy - y * vx
    return (
        vx + 2.0 * (w * cx + y * cz - z * cy),
        vy + 2.0 * (w * cy + z * cx - x * cz),
        vz + 2.0 * (w * cz + x * cy - y * cx),
    )


def _qexp(rx, ry, rz):
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    if angle < 1e-12:
        return (1.0, 0.5 * rx, 0.5 * ry, 0.5 * rz)
    s = math.sin(0.5 * angle) / angle
    return (math.cos(0.5 * angle), s * rx, s * ry, s * rz)


def _qnormalize(q):
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    return (q[0] / n, q[1] / n, q[2] / n, q[3] / n)


def _step(q, dt, gyro, accel, mag, gyro_bias, accel_bias, cfg: AhrsConfig):
    """One filter update on plain-float quaternions; ``mag`` may be None."""
    wx, wy, wz = gyro[0] - gyro_bias[0], gyro[1] - gyro_bias[1], gyro[2] - gyro_bias[2]
    q = _qmul(q, _qexp(wx * dt, wy * dt, wz * dt))

    if cfg.accel_gain > 0.0 and wx * wx + wy * wy + wz * wz <= cfg.rate_gate * cfg.rate_gate:
        ax, ay, az = accel[0] - accel_bias[0], accel[1] - accel_bias[1], accel[2] - accel_bias[2]
        na = math.sqrt(ax * ax + ay * ay + az * az)
        if na > 0.0 and abs(na - cfg.gravity) <= cfg.accel_gate:
            ux, uy, uz = _qrot(q, (ax / na, ay / na, az / na))
            # axis = up x e_z
            s = math.hypot(ux, uy)
            if s > 1e-15:
                angle = math.atan2(s, uz)
                k = min(1.0, cfg.accel_gain * dt)
                h = 0.5 * k * angle
                c = math.sin(h) / s
                q = _qmul((math.cos(h), uy * c, -ux * c, 0.0), q)

    if mag is not None and cfg.use_magnetometer and cfg.mag_gain > 0.0:
        mx, my, _ = _qrot(q, mag)
        if math.hypot(mx, my) > 1e-9:
            err = _wrap(math.atan2(my, mx) - cfg.mag_heading)
            h = -0.5 * min(1.0, cfg.mag_gain * dt) * err
            q = _qmul((math.cos(h), 0.0, 0.0, math.sin(h)), q)

    return _qnormalize(q)


def ahrs_update(
    state: AhrsState, imu: ImuSample, mag: MagSample | None = None, cfg: AhrsConfig = AhrsConfig()
) -> AhrsState:
    """Gyro propagation followed by accelerometer tilt and magnetometer yaw corrections."""
    dt = imu.timestamp - state.timestamp
    if not dt > 0.0:
        raise ValueError(f"imu timestamp {imu.timestamp} does not follow state time {state.timestamp}")
    q = _step(
        tuple(state.orientation.as_quaternion().tolist()),
        dt,
        imu.angular_velocity,
        imu.acceleration,
        None if mag is None else tuple(np.asarray(mag.field, dtype=float).tolist()),
        state.gyro_bias,
        state.accel_bias_ref,
        cfg,
    )
    return replace(state, orientation=Rotation3(q), timestamp=imu.timestamp)


def run_ahrs(
    state: AhrsState,
    t: NDArray[np.float64],
    gyro: NDArray[np.float64],
    accel: NDArray[np.float64],
    mag: NDArray[np.float64] | None = None,
    cfg: AhrsConfig = AhrsConfig(),
) -> tuple[AhrsState, NDArray[np.float64]]:
    """Apply :func:`ahrs_update` over arrays of samples.

    ``mag`` has one row per IMU sample, NaN where no magnetometer sample
    arrived. Returns the final state and the quaternion after each sample.
    """
    m = t.size
    out = np.empty((m, 4))
    q = tuple(state.orientation.as_quaternion().tolist())
    gb = tuple(np.asarray(state.gyro_bias, dtype=float).tolist())
    ab = tuple(np.asarray(state.accel_bias_ref, dtype=float).tolist())
    prev = state.timestamp
    tl, gl, al = t.tolist(), gyro.tolist(), accel.tolist()
    ml = mag.tolist() if mag is not None else None
    for k in range(m):
        dt = tl[k] - prev
        if not dt > 0.0:
            raise ValueError(f"imu timestamp {tl[k]} does not follow state time {prev}")
        mk = None
        if ml is not None and ml[k][0] == ml[k][0]:
            mk = ml[k]
        q = _step(q, dt, gl[k], al[k], mk, gb, ab, cfg)
        out[k] = q
        prev = tl[k]
    if m:
        state = replace(state, orientation=Rotation3(out[-1]), timestamp=float(tl[-1]))
    return state, out


def apply_bias_feedback(state: AhrsState, bias: ImuBias) -> AhrsState:
    return replace(
        state,
        gyro_bias=np.array(bias.gyro, dtype=float),
        accel_bias_ref=np.array(bias.accel, dtype=float),
    )


def align(
    imu: Sequence[ImuSample],
    mag: Sequence[MagSample] = (),
    cfg: AhrsConfig = AhrsConfig(),
    duration: float = 0.5,
    yaw: float = 0.0,
) -> AhrsState:
    """Static alignment from the first ``duration`` seconds of data.

    Tilt comes from the mean specific force; heading from the mean
    magnetic field when available, otherwise from ``yaw``.
    """
    if not imu:
        raise ValueError("alignment needs at least one IMU sample")
    t0 = imu[0].timestamp
    acc = np.mean([s.acceleration for s in imu if s.timestamp - t0 <= duration], axis=0)
    z_b = acc / np.linalg.norm(acc)
    fields = [s.field for s in mag if s.timestamp - t0 <= duration]
    if cfg.use_magnetometer and fields:
        m = np.mean(fields, axis=0)
        x_b = m - (m @ z_b) * z_b
        x_b /= np.linalg.norm(x_b)
        y_b = np.cross(z_b, x_b)
        rot = Rotation3.rz(cfg.mag_heading) @ Rotation3.from_matrix(np.vstack([x_b, y_b, z_b]))
    else:
        # tilt only: smallest rotation taking body-up to world-up
        axis = np.cross(z_b, _UP)
        s = np.linalg.norm(axis)
        angle = math.atan2(s, float(z_b @ _UP))
        tilt = Rotation3.from_rotvec(axis * (angle / s)) if s > 1e-15 else Rotation3.identity()
        rot = Rotation3.rz(yaw) @ tilt
    return AhrsState(rot, imu[0].timestamp)
