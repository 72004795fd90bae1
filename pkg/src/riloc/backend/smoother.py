"""Keyframe bookkeeping, incremental solving and feedback for the smoothing back-end."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..frontend import FrontendEstimate
from ..geometry import NavState, Rotation3
from ..motion import ImuBias
from ..sensors import BeaconMap, RangeMeasurement, save_beacon_map
from .factors import (
    B,
    BiasWalkFactor,
    L,
    P,
    PreintImuFactor,
    PriorFactor,
    RangeFactor,
    V,
)
from .graph import FactorGraph, LMResult, levenberg_marquardt
from .preintegration import ImuIntegrator, PreintegratedImu

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendConfig:
    range_sigma: float = 1.5
    # shadowing is multiplicative, so when set, ranges are compared in log
    # space with this dimensionless sigma and ``range_sigma`` is unused
    log_range_sigma: float | None = 0.27
    # vertical prior sigma for surveyed mounting heights; None uses the map's sigma
    beacon_height_sigma: float | None = 0.05
    # ranges above this are left to the front-end; None keeps all
    max_range: float | None = 6.0
    # per-sample accelerometer noise used for the preintegration covariance
    accel_sigma: float = 0.05
    preint_floor_sigma: float = 1e-3
    bias_walk_sigma: float = 0.001
    bias_prior_sigma: float = 0.2
    # lower bound on the first keyframe's position prior
    pose_prior_sigma: float = 1.0
    velocity_prior_sigma: float = 0.5
    keyframe_interval: float = 1.0
    relinearize_every: int = 10
    incremental_iterations: int = 3
    max_iterations: int = 100
    rel_tol: float = 1e-6

    def __post_init__(self) -> None:
        positive = (
            "range_sigma", "accel_sigma", "preint_floor_sigma", "bias_walk_sigma", "bias_prior_sigma",
            "pose_prior_sigma", "velocity_prior_sigma", "keyframe_interval", "rel_tol",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("log_range_sigma", "beacon_height_sigma", "max_range"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive or null, got {v}")
        for name in ("relinearize_every", "incremental_iterations", "max_iterations"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class Keyframe:
    index: int
    timestamp: float
    orientation: Rotation3


@dataclass
class BackendSolution:
    trajectory: list[NavState]
    beacons: BeaconMap
    biases: list[ImuBias]
    final_cost: float
    iterations: int = 0
    cost_history: list[float] = field(default_factory=list)

    def positions(self) -> NDArray[np.float64]:
        return np.array([s.position for s in self.trajectory]).reshape(-1, 3)

    def timestamps(self) -> NDArray[np.float64]:
        return np.array([s.timestamp for s in self.trajectory])


class Smoother:
    """Full-smoothing back-end over keyframe positions, velocities, accel biases and beacons.

    Orientation is supplied by the AHRS and held fixed. Each call to
    :meth:`update` warm-starts Levenberg-Marquardt from the previous
    solution; every ``relinearize_every`` keyframes it runs to convergence.
    """

    def __init__(self, prior_map: BeaconMap, cfg: BackendConfig = BackendConfig(), gravity: ArrayLike | None = None):
        self.prior_map = prior_map
        self.cfg = cfg
        self.gravity = gravity
        self.graph = FactorGraph()
        self.keyframes: list[Keyframe] = []
        self.last_result: LMResult | None = None
        self._since_full = 0

    @property
    def num_keyframes(self) -> int:
        return len(self.keyframes)

    def latest_bias(self) -> ImuBias:
        if not self.keyframes:
            return ImuBias()
        return ImuBias(accel=self.graph.value(B(self.keyframes[-1].index)))

    def _ensure_beacon(self, beacon_id: str) -> bool:
        key = L(beacon_id)
        if key in self.graph:
            return True
        if beacon_id not in self.prior_map:
            log.debug("no prior for beacon %r; range ignored by the back-end", beacon_id)
            return False
        e = self.prior_map[beacon_id]
        self.graph.add_variable(key, e.position)
        h = self.cfg.beacon_height_sigma
        sigma = e.prior_sigma if h is None else np.diag([e.prior_sigma**2, e.prior_sigma**2, h**2])
        self.graph.add_factor(PriorFactor(key, e.position, sigma))
        return True

    def add_keyframe(
        self,
        estimate: FrontendEstimate,
        orientation: Rotation3,
        preint: PreintegratedImu | None = None,
        ranges: Sequence[RangeMeasurement] = (),
        integrator: ImuIntegrator | None = None,
    ) -> Keyframe:
        """Append a keyframe initialized from the front-end estimate.

        ``ranges`` are the measurements since the previous keyframe. Those
        stamped exactly at this keyframe attach to it directly; earlier ones
        attach to the previous keyframe through ``integrator``, which must
        start at the previous keyframe time.
        """
        t = float(estimate.timestamp)
        k = len(self.keyframes)
        if self.keyframes and t <= self.keyframes[-1].timestamp:
            raise ValueError(f"keyframe time {t} does not follow {self.keyframes[-1].timestamp}")
        g = self.graph
        cfg = self.cfg
        if k == 0:
            bias0 = np.zeros(3)
        else:
            if preint is None:
                raise ValueError("keyframes after the first need a preintegrated IMU factor")
            bias0 = g.value(B(k - 1))
        g.add_variable(P(k), estimate.position)
        g.add_variable(V(k), estimate.velocity)
        g.add_variable(B(k), bias0)
        if k == 0:
            cov = np.asarray(estimate.position_covariance, dtype=float)
            cov = 0.5 * (cov + cov.T) + cfg.pose_prior_sigma**2 * np.eye(3)
            g.add_factor(PriorFactor(P(0), estimate.position, cov))
            g.add_factor(PriorFactor(V(0), estimate.velocity, cfg.velocity_prior_sigma))
            g.add_factor(PriorFactor(B(0), bias0, cfg.bias_prior_sigma))
        else:
            prev = self.keyframes[-1]
            if abs(preint.delta_t - (t - prev.timestamp)) > 1e-6:
                raise ValueError(
                    f"preintegration spans {preint.delta_t} s but keyframes are {t - prev.timestamp} s apart"
                )
            g.add_factor(PreintImuFactor(P(k - 1), V(k - 1), P(k), V(k), B(k - 1), preint))
            g.add_factor(BiasWalkFactor(B(k - 1), B(k), cfg.bias_walk_sigma, preint.delta_t))
        for z in ranges:
            if cfg.max_range is not None and z.range > cfg.max_range:
                continue
            if not self._ensure_beacon(z.beacon_id):
                continue
            log_scale = cfg.log_range_sigma is not None
            sigma = cfg.log_range_sigma if log_scale else cfg.range_sigma
            if abs(z.timestamp - t) <= 1e-9:
                g.add_factor(RangeFactor(P(k), L(z.beacon_id), z.range, sigma, log_scale=log_scale))
            elif k > 0 and integrator is not None and self.keyframes[-1].timestamp < z.timestamp < t:
                prev = self.keyframes[-1]
                dp, _, jp, _ = integrator.at(z.timestamp)
                g.add_factor(
                    RangeFactor(
                        P(k - 1), L(z.beacon_id), z.range, sigma,
                        offset=z.timestamp - prev.timestamp, velocity=V(k - 1), bias=B(k - 1),
                        delta_p=dp, jac_p=jp, lin_bias=integrator.bias.copy(), log_scale=log_scale,
                    )
                )
        kf = Keyframe(k, t, orientation)
        self.keyframes.append(kf)
        self._since_full += 1
        return kf

    def update(self, full: bool | None = None) -> LMResult:
        """Solve after new keyframes. ``full`` forces (or suppresses) a converged solve."""
        if full is None:
            full = self._since_full >= self.cfg.relinearize_every
        if full:
            self._since_full = 0
            res = levenberg_marquardt(self.graph, self.cfg.max_iterations, self.cfg.rel_tol)
        else:
            res = levenberg_marquardt(self.graph, self.cfg.incremental_iterations, self.cfg.rel_tol)
        self.last_result = res
        return res

    def optimize(self) -> BackendSolution:
        self.update(full=True)
        return self.solution()

    def solution(self) -> BackendSolution:
        g = self.graph
        traj = [NavState(kf.timestamp, kf.orientation, g.value(P(kf.index)), g.value(V(kf.index))) for kf in self.keyframes]
        biases = [ImuBias(accel=g.value(B(kf.index))) for kf in self.keyframes]
        res = self.last_result
        return BackendSolution(
            trajectory=traj,
            beacons=self.optimized_map(),
            biases=biases,
            final_cost=g.cost(),
            iterations=res.iterations if res else 0,
            cost_history=list(res.cost_history) if res else [],
        )

    def optimized_map(self) -> BeaconMap:
        """Prior map with every beacon in the graph replaced by its estimate."""
        out = BeaconMap()
        for bid, e in self.prior_map.entries.items():
            key = L(bid)
            pos = self.graph.value(key) if key in self.graph else e.position
            out.add(bid, pos, e.prior_sigma)
        return out

    def emit_feedback(self) -> tuple[ImuBias, BeaconMap]:
        return self.latest_bias(), self.optimized_map()


def export_solution(solution: BackendSolution, directory: str | Path) -> None:
    """Write ``backend_trajectory.csv`` (t, p, v, bias) and ``backend_beacons.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "backend_trajectory.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "bax", "bay", "baz"])
        for s, b in zip(solution.trajectory, solution.biases):
            w.writerow([repr(float(x)) for x in (s.timestamp, *s.position, *s.velocity, *b.accel)])
    save_beacon_map(solution.beacons, directory / "backend_beacons.csv")
