"""Variables, residuals and factors of the smoothing problem.

Every variable is a 3-vector: a keyframe position, a keyframe velocity,
a keyframe accelerometer bias, or a beacon position. Residuals are
whitened, so the cost of a factor is ``0.5 * |r|^2``.

Each factor type linearizes all of its instances in one vectorized call;
``linearize`` returns whitened residuals of shape (n, m) and one Jacobian
block of shape (n, m, 3) per connected variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .preintegration import PreintegratedImu


class SingularGeometryError(ValueError):
    """A range factor's position coincides with its beacon."""


class Kind(str, Enum):
    POSE = "pose"
    VELOCITY = "velocity"
    BIAS = "bias"
    BEACON = "beacon"


@dataclass(frozen=True, order=True)
class VariableId:
    kind: Kind
    index: int | str

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> VariableId:
        kind, _, idx = text.partition(":")
        k = Kind(kind)
        return cls(k, idx if k is Kind.BEACON else int(idx))


def P(k: int) -> VariableId:
    return VariableId(Kind.POSE, k)


def V(k: int) -> VariableId:
    return VariableId(Kind.VELOCITY, k)


def B(k: int) -> VariableId:
    return VariableId(Kind.BIAS, k)


def L(beacon_id: str) -> VariableId:
    return VariableId(Kind.BEACON, beacon_id)


# --- single-instance residuals ---------------------------------------------


def range_residual(
    pose: ArrayLike, beacon: ArrayLike, z: float, sigma_n: float
) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Whitened ``(z - |p - l|) / sigma`` and its Jacobians w.r.t. ``p`` and ``l``."""
    diff = np.asarray(pose, dtype=float) - np.asarray(beacon, dtype=float)
    d = float(np.linalg.norm(diff))
    if d <= 1e-6:
        raise SingularGeometryError(f"position and beacon coincide (distance {d:.3g} m)")
    u = diff / d
    return (z - d) / sigma_n, -u / sigma_n, u / sigma_n


def whitener(covariance: ArrayLike) -> NDArray[np.float64]:
    """Matrix ``W`` with ``W^T W = covariance^-1`` (inverse Cholesky factor)."""
    chol = np.linalg.cholesky(np.asarray(covariance, dtype=float))
    return np.linalg.inv(chol)


def preint_residual(
    p_prev: ArrayLike,
    v_prev: ArrayLike,
    p_cur: ArrayLike,
    v_cur: ArrayLike,
    bias_prev: ArrayLike,
    pre: PreintegratedImu,
) -> tuple[NDArray[np.float64], list[NDArray[np.float64]]]:
    """Whitened 6-vector residual and Jacobians in the order ``(p_prev, v_prev, p_cur, v_cur, bias_prev)``.

    Gravity is already folded into the preintegrated deltas.
    """
    dp, dv = pre.corrected(bias_prev)
    dt = pre.delta_t
    e = np.concatenate(
        [
            np.asarray(p_cur) - np.asarray(p_prev) - np.asarray(v_prev) * dt - dp,
            np.asarray(v_cur) - np.asarray(v_prev) - dv,
        ]
    )
    W = whitener(pre.covariance)
    i3, z3 = np.eye(3), np.zeros((3, 3))
    jacs = [
        np.vstack([-i3, z3]),
        np.vstack([-dt * i3, -i3]),
        np.vstack([i3, z3]),
        np.vstack([z3, i3]),
        -pre.bias_jacobian,
    ]
    return W @ e, [W @ J for J in jacs]


def bias_walk_residual(
    bias_prev: ArrayLike, bias_cur: ArrayLike, walk_sigma: float, delta_t: float
) -> NDArray[np.float64]:
    """Random-walk residual ``(b_t - b_{t-1}) / (sigma sqrt(dt))``; works for any bias length."""
    if not delta_t > 0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    return (np.asarray(bias_cur, dtype=float) - np.asarray(bias_prev, dtype=float)) / (
        walk_sigma * np.sqrt(delta_t)
    )


# --- factors ----------------------------------------------------------------


@dataclass
class Factor:
    variant: ClassVar[str] = "Factor"
    dim: ClassVar[int] = 3

    @property
    def keys(self) -> tuple[VariableId, ...]:
        raise NotImplementedError

    @classmethod
    def stack(cls, factors: Sequence[Factor]) -> dict:
        """Measurement payloads of ``factors`` as arrays, reusable across linearizations."""
        raise NotImplementedError

    @classmethod
    def linearize(
        cls, factors: Sequence[Factor], values: list[NDArray], data: dict | None = None
    ) -> tuple[NDArray, list[NDArray]]:
        """``values[i]`` is an (n, 3) array holding the i-th connected variable of every factor.

        ``data`` is the output of :meth:`stack` for the same factors.
        """
        raise NotImplementedError

    def payload(self) -> str:
        raise NotImplementedError

    def dump(self) -> str:
        return f"{self.variant} {' '.join(str(k) for k in self.keys)} {self.payload()}"


def _fmt(v: ArrayLike) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(v))


@dataclass
class PriorFactor(Factor):
    """Gaussian prior on one variable. ``variant`` names what it anchors."""

    key: VariableId
    mean: NDArray[np.float64]
    covariance: NDArray[np.float64]
    sqrt_info: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim == 0 or cov.shape == (3,):
            cov = np.diag(np.broadcast_to(cov, (3,)) ** 2) if cov.ndim == 1 else np.eye(3) * float(cov) ** 2
        self.covariance = cov
        self.sqrt_info = whitener(cov)

    @property
    def variant(self) -> str:  # type: ignore[override]
        return {
            Kind.POSE: "PriorPose",
            Kind.VELOCITY: "PriorVelocity",
            Kind.BIAS: "PriorBias",
            Kind.BEACON: "PriorBeacon",
        }[self.key.kind]

    @property
    def keys(self) -> tuple[VariableId, ...]:
        return (self.key,)

    @classmethod
    def stack(cls, factors) -> dict:
        return {"mean": np.array([f.mean for f in factors]), "W": np.array([f.sqrt_info for f in factors])}

    @classmethod
    def linearize(cls, factors, values, data=None):
        data = data or cls.stack(factors)
        x = values[0]
        W = data["W"]
        r = np.einsum("nij,nj->ni", W, x - data["mean"])
        return r, [W]

    def payload(self) -> str:
        return f"mean={_fmt(self.mean)} cov={_fmt(self.covariance)}"


@dataclass
class RangeFactor(Factor):
    """Range from a device position to a beacon.

    The position may lie ``offset`` seconds after its keyframe; it is then
    extrapolated with the keyframe velocity and the partial preintegration
    ``(delta_p, jac_p)`` up to the measurement time, which connects the
    keyframe velocity and bias as well::

        q = p_k + v_k * offset + delta_p + jac_p (b_k - lin_bias)
    """

    pose: VariableId
    beacon: VariableId
    z: float
    sigma: float
    offset: float = 0.0
    velocity: VariableId | None = None
    bias: VariableId | None = None
    delta_p: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    jac_p: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    lin_bias: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    log_scale: bool = False

    variant: ClassVar[str] = "Range"
    dim: ClassVar[int] = 1

    def __post_init__(self) -> None:
        if (self.velocity is None) != (self.bias is None):
            raise ValueError("an offset range factor needs both velocity and bias")
        if self.velocity is None and self.offset != 0.0:
            raise ValueError("a non-zero offset needs velocity and bias variables")
        if self.log_scale and not self.z > 0:
            raise ValueError("a log-scale range needs a positive measurement")

    @property
    def extrapolated(self) -> bool:
        return self.velocity is not None

    @property
    def keys(self) -> tuple[VariableId, ...]:
        if self.extrapolated:
            return (self.pose, self.beacon, self.velocity, self.bias)  # type: ignore[return-value]
        return (self.pose, self.beacon)

    @classmethod
    def stack(cls, factors) -> dict:
        data = {
            "z": np.array([f.z for f in factors]),
            "s": np.array([f.sigma for f in factors]),
            "log": np.array([f.log_scale for f in factors], dtype=bool),
        }
        if factors and factors[0].extrapolated:
            data["off"] = np.array([f.offset for f in factors])
            data["dp"] = np.array([f.delta_p for f in factors])
            data["jp"] = np.array([f.jac_p for f in factors])
            data["lb"] = np.array([f.lin_bias for f in factors])
        return data

    @classmethod
    def linearize(cls, factors, values, data=None):
        data = data or cls.stack(factors)
        p, l = values[0], values[1]
        z, s = data["z"], data["s"]
        ext = len(values) == 4
        q = p
        if ext:
            off, jp = data["off"], data["jp"]
            q = p + values[2] * off[:, None] + data["dp"] + np.einsum("nij,nj->ni", jp, values[3] - data["lb"])
        diff = q - l
        d = np.linalg.norm(diff, axis=1)
        if np.any(d <= 1e-6):
            raise SingularGeometryError("range factor position coincides with its beacon")
        u = diff / d[:, None]
        lg = data["log"]
        if lg.any():
            r = np.where(lg, np.log(np.where(lg, z, 1.0) / d), z - d) / s
            u = u / np.where(lg, d, 1.0)[:, None]
        else:
            r = (z - d) / s
        r = r[:, None]
        jq = (-u / s[:, None])[:, None, :]
        jacs = [jq, -jq]
        if ext:
            jacs.append(jq * off[:, None, None])
            jacs.append(np.einsum("nij,njk->nik", jq, jp))
        return r, jacs

    def payload(self) -> str:
        text = f"z={self.z!r} sigma={self.sigma!r}"
        if self.log_scale:
            text += " log_scale=1"
        if self.extrapolated:
            text += f" offset={self.offset!r} delta_p={_fmt(self.delta_p)} jac_p={_fmt(self.jac_p)} lin_bias={_fmt(self.lin_bias)}"
        return text


@dataclass
class PreintImuFactor(Factor):
    p_prev: VariableId
    v_prev: VariableId
    p_cur: VariableId
    v_cur: VariableId
    bias_prev: VariableId
    pre: PreintegratedImu
    sqrt_info: NDArray[np.float64] = field(init=False, repr=False)

    variant: ClassVar[str] = "PreintImu"
    dim: ClassVar[int] = 6

    def __post_init__(self) -> None:
        self.sqrt_info = whitener(self.pre.covariance)

    @property
    def keys(self) -> tuple[VariableId, ...]:
        return (self.p_prev, self.v_prev, self.p_cur, self.v_cur, self.bias_prev)

    @classmethod
    def stack(cls, factors) -> dict:
        return {
            "dt": np.array([f.pre.delta_t for f in factors]),
            "dp": np.array([f.pre.delta_p for f in factors]),
            "dv": np.array([f.pre.delta_v for f in factors]),
            "J": np.array([f.pre.bias_jacobian for f in factors]),
            "lb": np.array([f.pre.linearization_bias for f in factors]),
            "W": np.array([f.sqrt_info for f in factors]),
        }

    @classmethod
    def linearize(cls, factors, values, data=None):
        data = data or cls.stack(factors)
        pp, vp, pc, vc, bp = values
        n = pp.shape[0]
        dt, dp0, dv0, J, lb, W = (data[k] for k in ("dt", "dp", "dv", "J", "lb", "W"))
        corr = np.einsum("nij,nj->ni", J, bp - lb)
        e = np.empty((n, 6))
        e[:, :3] = pc - pp - vp * dt[:, None] - dp0 - corr[:, :3]
        e[:, 3:] = vc - vp - dv0 - corr[:, 3:]
        r = np.einsum("nij,nj->ni", W, e)
        # W @ [blocks]: columns 0:3 act on position rows, 3:6 on velocity rows
        Wp, Wv = W[:, :, :3], W[:, :, 3:]
        jacs = [-Wp, -Wp * dt[:, None, None] - Wv, Wp, Wv, -np.einsum("nij,njk->nik", W, J)]
        return r, jacs

    def payload(self) -> str:
        p = self.pre
        return (
            f"dt={p.delta_t!r} dp={_fmt(p.delta_p)} dv={_fmt(p.delta_v)} J={_fmt(p.bias_jacobian)} "
            f"lin_bias={_fmt(p.linearization_bias)} cov={_fmt(p.covariance)}"
        )


@dataclass
class BiasWalkFactor(Factor):
    b_prev: VariableId
    b_cur: VariableId
    walk_sigma: float
    delta_t: float

    variant: ClassVar[str] = "BiasWalk"

    def __post_init__(self) -> None:
        if not self.delta_t > 0 or not self.walk_sigma > 0:
            raise ValueError("bias walk needs positive sigma and delta_t")

    @property
    def keys(self) -> tuple[VariableId, ...]:
        return (self.b_prev, self.b_cur)

    @classmethod
    def stack(cls, factors) -> dict:
        return {"s": np.array([f.walk_sigma * np.sqrt(f.delta_t) for f in factors])}

    @classmethod
    def linearize(cls, factors, values, data=None):
        s = (data or cls.stack(factors))["s"]
        r = (values[1] - values[0]) / s[:, None]
        eye = np.eye(3)[None, :, :] / s[:, None, None]
        return r, [-eye, eye]

    def payload(self) -> str:
        return f"sigma={self.walk_sigma!r} dt={self.delta_t!r}"


def group_key(f: Factor) -> tuple[type, int]:
    """Factors sharing this key can be linearized together."""
    return type(f), len(f.keys)
