"""Sequential importance resampling filter for global localization and tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import ReducedState, Rotation3
from .motion import (
    ImuBias,
    ImuMotionParams,
    RandomWalkParams,
    propagate_imu,
    propagate_random_walk,
    tangential_direction,
)
from .sensors import BeaconMap, RangeMeasurement

log = logging.getLogger(__name__)

_warned_ids: set[str] = set()


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= p <= hi`` in meters."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(np.isfinite(lo + hi)):
            raise ValueError(f"box corners must be finite 3-vectors: {self.lo}, {self.hi}")
        if any(h < l for l, h in zip(lo, hi)) or sum(h > l for l, h in zip(lo, hi)) < 2:
            raise ValueError(f"degenerate box: {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> NDArray[np.float64]:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def contains(self, p: ArrayLike) -> NDArray[np.bool_]:
        p = np.asarray(p)
        return np.all((p >= np.array(self.lo)) & (p <= np.array(self.hi)), axis=-1)


@dataclass(frozen=True)
class RangeNoise:
    sigma_n: float = 5.0

    def __post_init__(self) -> None:
        if not self.sigma_n > 0:
            raise ValueError(f"sigma_n must be positive, got {self.sigma_n}")


@dataclass(frozen=True)
class Particle:
    state: ReducedState
    log_weight: float


@dataclass(frozen=True)
class ParticleSet:
    """``n_p`` weighted hypotheses stored as arrays.

    ``states`` is (n_p, 6) with rows ``(p, v)``; ``log_weights`` is (n_p,)
    and normalized so that their log-sum-exp is 0.
    """

    states: NDArray[np.float64]
    log_weights: NDArray[np.float64]
    orientation: Rotation3 = field(default_factory=Rotation3.identity)
    timestamp: float = 0.0

    @property
    def n_p(self) -> int:
        return self.states.shape[0]

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.exp(self.log_weights)

    @property
    def particles(self) -> list[Particle]:
        return [Particle(ReducedState.from_vector(x), float(w)) for x, w in zip(self.states, self.log_weights)]


@dataclass(frozen=True)
class FrontendEstimate:
    timestamp: float
    position: NDArray[np.float64]
    velocity: NDArray[np.float64]
    position_covariance: NDArray[np.float64]


@dataclass(frozen=True)
class FrontendConfig:
    """Particle filter settings; defaults are the experimental values."""

    motion_model: str = "imu"  # "imu" or "rw"
    imu_motion: ImuMotionParams = ImuMotionParams()
    random_walk: RandomWalkParams = RandomWalkParams()
    noise: RangeNoise = RangeNoise()
    n_p: int = 300
    n_thr: float = 60.0
    # height of a platform confined to a floor plane; None leaves z free
    planar_height: float | None = None

    def __post_init__(self) -> None:
        if self.planar_height is not None and not np.isfinite(self.planar_height):
            raise ValueError("planar_height must be finite")
        if self.motion_model not in ("imu", "rw"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if self.n_p < 1:
            raise ValueError("n_p must be at least 1")


@dataclass(frozen=True)
class Tick:
    """Inputs for one filter step: latest orientation, accelerometer sample and ranges."""

    timestamp: float
    acceleration: NDArray[np.float64]
    orientation: Rotation3
    ranges: Sequence[RangeMeasurement] = ()


def initialize_global(bounds: Box, n_p: int, rng: np.random.Generator) -> ParticleSet:
    """Uniform positions over ``bounds``, zero velocity, uniform weights."""
    if n_p < 1:
        raise ValueError("n_p must be at least 1")
    lo, hi = np.array(bounds.lo), np.array(bounds.hi)
    states = np.zeros((n_p, 6))
    states[:, :3] = lo + (hi - lo) * rng.random((n_p, 3))
    return ParticleSet(states, np.full(n_p, -np.log(n_p)))


def normalize(set_: ParticleSet) -> ParticleSet:
    return replace(set_, log_weights=set_.log_weights - np.logaddexp.reduce(set_.log_weights))


def predict(
    set_: ParticleSet,
    a: ArrayLike | None,
    rot: Rotation3,
    bias: ImuBias,
    cfg: FrontendConfig,
    t_s: float,
    rng: np.random.Generator,
) -> ParticleSet:
    """Advance every particle through the configured motion model; weights are untouched."""
    if cfg.motion_model == "imu":
        d = None if a is None else tangential_direction(a, rot, bias)
        states = propagate_imu(set_.states, d, cfg.imu_motion, t_s, rng)
    else:
        states = propagate_random_walk(set_.states, cfg.random_walk, t_s, rng)
    if cfg.planar_height is not None:
        states[:, 2] = cfg.planar_height
        states[:, 5] = 0.0
    return replace(set_, states=states, orientation=rot, timestamp=set_.timestamp + t_s)


def range_log_likelihood(
    positions: NDArray[np.float64], beacon: NDArray[np.float64], z: float, noise: RangeNoise
) -> NDArray[np.float64]:
    d = np.linalg.norm(positions - beacon, axis=-1)
    return -((z - d) ** 2) / (2.0 * noise.sigma_n**2)


def update_weights(
    set_: ParticleSet, z: RangeMeasurement, beacons: BeaconMap, noise: RangeNoise
) -> ParticleSet:
    if z.beacon_id not in beacons:
        if z.beacon_id not in _warned_ids:
            _warned_ids.add(z.beacon_id)
            log.warning("skipping range to unknown beacon %r", z.beacon_id)
        return set_
    ll = range_log_likelihood(set_.states[:, :3], beacons.position(z.beacon_id), z.range, noise)
    return normalize(replace(set_, log_weights=set_.log_weights + ll))


def effective_sample_size(set_: ParticleSet) -> float:
    """``1 / sum(w_i^2)`` of the normalized weights."""
    w = np.exp(set_.log_weights - np.logaddexp.reduce(set_.log_weights))
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights: NDArray[np.float64], u: float) -> NDArray[np.intp]:
    """Offspring parent indices for the comb ``(u + k) / n``, ``u`` in [0, 1)."""
    n = weights.shape[0]
    cdf = np.cumsum(weights)
    scaled = n * cdf / cdf[-1]
    # snap rounding noise so exact comb ties go to the next particle
    whole = np.rint(scaled)
    scaled = np.where(np.abs(scaled - whole) < 1e-9, whole, scaled)
    comb = u + np.arange(n)
    return np.minimum(np.searchsorted(scaled, comb, side="right"), n - 1)


def systematic_resample(
    set_: ParticleSet, rng: np.random.Generator, u: float | None = None
) -> ParticleSet:
    """Low-variance resampling with one uniform draw; weights reset to ``1/n_p``.

    ``u`` in [0, 1/n_p) is the first comb position; pass it to force a
    specific draw instead of sampling it from ``rng``.
    """
    n = set_.n_p
    if u is not None and not 0.0 <= u < 1.0 / n:
        raise ValueError(f"u must lie in [0, 1/{n})")
    offset = rng.random() if u is None else u * n
    idx = systematic_indices(np.exp(set_.log_weights - np.logaddexp.reduce(set_.log_weights)), offset)
    return replace(set_, states=set_.states[idx].copy(), log_weights=np.full(n, -np.log(n)))


def estimate(set_: ParticleSet) -> FrontendEstimate:
    w = np.exp(set_.log_weights - np.logaddexp.reduce(set_.log_weights))
    mean = w @ set_.states
    dp = set_.states[:, :3] - mean[:3]
    cov = (dp * w[:, None]).T @ dp
    cov = 0.5 * (cov + cov.T)
    return FrontendEstimate(set_.timestamp, mean[:3], mean[3:], cov)


def step(
    set_: ParticleSet,
    tick: Tick,
    beacons: BeaconMap,
    cfg: FrontendConfig,
    rng: np.random.Generator,
    bias: ImuBias = ImuBias(),
) -> tuple[ParticleSet, FrontendEstimate, bool]:
    """One sample / importance / resample cycle.

    Returns the new set, its estimate, and whether resampling happened.
    """
    t_s = tick.timestamp - set_.timestamp
    if t_s > 0:
        set_ = predict(set_, tick.acceleration, tick.orientation, bias, cfg, t_s, rng)
    else:
        set_ = replace(set_, orientation=tick.orientation)
    resampled = False
    if tick.ranges:
        for z in tick.ranges:
            set_ = update_weights(set_, z, beacons, cfg.noise)
        if effective_sample_size(set_) < cfg.n_thr:
            set_ = systematic_resample(set_, rng)
            resampled = True
    return set_, estimate(set_), resampled
