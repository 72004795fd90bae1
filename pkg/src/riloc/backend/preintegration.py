"""Accelerometer preintegration between keyframes with fixed orientation.

Orientation comes from the AHRS, so the world-frame acceleration of each
sample ``R_k (a_k - bias) + g`` is affine in the accelerometer bias and the
bias Jacobians below are exact rather than first order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..geometry import Rotation3, gravity_vector
from ..motion import ImuBias
from ..sensors import ImuSample


@dataclass(frozen=True)
class PreintegratedImu:
    delta_t: float
    delta_p: NDArray[np.float64]
    delta_v: NDArray[np.float64]
    # d(delta_p, delta_v) / d(accel bias), stacked 6x3
    bias_jacobian: NDArray[np.float64]
    linearization_bias: NDArray[np.float64]
    covariance: NDArray[np.float64]

    def corrected(self, accel_bias: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        d = self.bias_jacobian @ (np.asarray(accel_bias) - self.linearization_bias)
        return self.delta_p + d[:3], self.delta_v + d[3:]


class ImuIntegrator:
    """Cumulative trapezoidal integration over a run of IMU samples.

    Args:
        t: Sample times, shape (m,), strictly increasing.
        rotations: Body-to-world rotation matrices, shape (m, 3, 3).
        accel: Specific force in the body frame, shape (m, 3).
        bias: Accelerometer bias used as linearization point.
        gravity: World-frame gravity vector.

    Cumulative quantities are relative to the first sample, so
    ``delta_p[i]`` is the displacement accrued between ``t[0]`` and ``t[i]``
    on top of the initial-velocity term.
    """

    def __init__(
        self,
        t: NDArray[np.float64],
        rotations: NDArray[np.float64],
        accel: NDArray[np.float64],
        bias: ArrayLike = (0.0, 0.0, 0.0),
        gravity: ArrayLike | None = None,
    ):
        t = np.asarray(t, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("need at least one IMU sample")
        if np.any(np.diff(t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        g = gravity_vector() if gravity is None else np.asarray(gravity, dtype=float)
        self.t = t
        self.bias = np.asarray(bias, dtype=float).reshape(3)
        rot = np.asarray(rotations, dtype=float)
        self.rotations = rot
        a_w = np.einsum("kij,kj->ki", rot, np.asarray(accel, dtype=float) - self.bias) + g
        self.accel_world = a_w
        m = t.size
        self.delta_v = np.zeros((m, 3))
        self.delta_p = np.zeros((m, 3))
        self.jac_v = np.zeros((m, 3, 3))
        self.jac_p = np.zeros((m, 3, 3))
        if m > 1:
            dt = np.diff(t)
            a_mid = 0.5 * (a_w[:-1] + a_w[1:])
            b_mid = -0.5 * (rot[:-1] + rot[1:])
            self.delta_v[1:] = np.cumsum(a_mid * dt[:, None], axis=0)
            self.delta_p[1:] = np.cumsum(self.delta_v[:-1] * dt[:, None] + 0.5 * a_mid * dt[:, None] ** 2, axis=0)
            self.jac_v[1:] = np.cumsum(b_mid * dt[:, None, None], axis=0)
            self.jac_p[1:] = np.cumsum(
                self.jac_v[:-1] * dt[:, None, None] + 0.5 * b_mid * dt[:, None, None] ** 2, axis=0
            )

    @classmethod
    def from_samples(
        cls,
        imu: Sequence[ImuSample],
        orientations: Sequence[Rotation3],
        bias: ImuBias = ImuBias(),
        gravity: ArrayLike | None = None,
    ) -> ImuIntegrator:
        if len(imu) != len(orientations):
            raise ValueError("need one orientation per IMU sample")
        if not imu:
            raise ValueError("need at least one IMU sample")
        t = np.array([s.timestamp for s in imu])
        rot = np.array([r.as_matrix() for r in orientations])
        acc = np.array([s.acceleration for s in imu])
        return cls(t, rot, acc, bias.accel, gravity)

    def at(self, tau: float) -> tuple[NDArray, NDArray, NDArray, NDArray]:
        """``(delta_p, delta_v, jac_p, jac_v)`` from ``t[0]`` to ``tau``.

        Past the last sample the last world acceleration is held constant.
        """
        t = self.t
        if tau < t[0] - 1e-12:
            raise ValueError(f"time {tau} precedes the integration start {t[0]}")
        i = int(np.searchsorted(t, tau, side="right")) - 1
        i = max(i, 0)
        r = tau - t[i]
        if i < t.size - 1 and r > 0:
            # inside an interval: integrate with the interval's mean acceleration
            a = 0.5 * (self.accel_world[i] + self.accel_world[i + 1])
            b = -0.5 * (self.rotations[i] + self.rotations[i + 1])
        else:
            a = self.accel_world[i]
            b = -self.rotations[i]
        dp = self.delta_p[i] + self.delta_v[i] * r + 0.5 * a * r * r
        dv = self.delta_v[i] + a * r
        jp = self.jac_p[i] + self.jac_v[i] * r + 0.5 * b * r * r
        jv = self.jac_v[i] + b * r
        return dp, dv, jp, jv

    def summary(self, accel_sigma: float = 0.05, floor_sigma: float = 1e-4) -> PreintegratedImu:
        return PreintegratedImu(
            delta_t=float(self.t[-1] - self.t[0]),
            delta_p=self.delta_p[-1].copy(),
            delta_v=self.delta_v[-1].copy(),
            bias_jacobian=np.vstack([self.jac_p[-1], self.jac_v[-1]]),
            linearization_bias=self.bias.copy(),
            covariance=preintegration_covariance(self.t, accel_sigma, floor_sigma),
        )


def noise_coefficients(t: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-sample weights of the accelerometer noise in the final ``(delta_p, delta_v)``."""
    m = t.size
    cp = np.zeros(m)
    cv = np.zeros(m)
    if m < 2:
        return cp, cv
    dt = np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    wv = 0.5 * dt
    wp = 0.5 * dt * (t[-1] - mid)
    cv[:-1] += wv
    cv[1:] += wv
    cp[:-1] += wp
    cp[1:] += wp
    return cp, cv


def preintegration_covariance(
    t: NDArray[np.float64], accel_sigma: float, floor_sigma: float = 1e-4
) -> NDArray[np.float64]:
    """Covariance of ``(delta_p, delta_v)`` from white per-sample accelerometer noise.

    Rotations preserve isotropic noise, so the result is a 2x2 pattern
    expanded over the three axes. ``floor_sigma`` keeps it positive definite.
    """
    cp, cv = noise_coefficients(np.asarray(t, dtype=float))
    s2 = accel_sigma**2
    pp, pv, vv = s2 * cp @ cp, s2 * cp @ cv, s2 * cv @ cv
    i3 = np.eye(3)
    cov = np.block([[pp * i3, pv * i3], [pv * i3, vv * i3]])
    return cov + floor_sigma**2 * np.eye(6)


def preintegrate(
    imu: Sequence[ImuSample],
    orientations: Sequence[Rotation3],
    bias: ImuBias = ImuBias(),
    accel_sigma: float = 0.05,
    gravity: ArrayLike | None = None,
    floor_sigma: float = 1e-4,
) -> PreintegratedImu:
    """Summarize the samples spanning ``[imu[0].t, imu[-1].t]`` as one relative-motion constraint."""
    if not imu:
        raise ValueError("cannot preintegrate an empty IMU sequence")
    integ = ImuIntegrator.from_samples(imu, orientations, bias, gravity)
    return integ.summary(accel_sigma, floor_sigma)
