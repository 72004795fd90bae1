"""End-to-end runs: sensor filtering, AHRS, particle front-end and smoothing back-end with feedback."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .ahrs import AhrsState, align, apply_bias_feedback, run_ahrs
from .backend import BackendSolution, ImuIntegrator, Smoother, export_solution
from .config import RunConfig
from .frontend import Box, FrontendEstimate, Tick, initialize_global, step
from .geometry import Rotation3, gravity_vector
from .metrics import ErrorSeries, position_errors, write_errors_csv
from .motion import ImuBias
from .sensors import (
    BeaconMap,
    LogValidationError,
    RangeMeasurement,
    SensorLog,
    filter_imu,
    filter_mag,
    filter_rssi_windows,
    make_range_measurement,
)

log = logging.getLogger(__name__)

# duration of the static alignment window at the start of a log
ALIGN_DURATION = 0.5


@dataclass
class PreparedLog:
    """Filtered streams in array form, shared by every mode."""

    t: NDArray[np.float64]
    gyro: NDArray[np.float64]
    accel: NDArray[np.float64]
    # magnetometer field per IMU sample, NaN where none arrived
    mag: NDArray[np.float64]
    # BLE scan times and the valid ranges of each scan
    tick_times: NDArray[np.float64]
    tick_ranges: list[list[RangeMeasurement]]
    # the same ranges stamped at the time they describe, sorted by that time
    backend_ranges: list[RangeMeasurement]
    align_state: AhrsState
    gt_t: NDArray[np.float64] | None = None
    gt_p: NDArray[np.float64] | None = None


def prepare(sensor_log: SensorLog, cfg: RunConfig) -> PreparedLog:
    """Validate and median-filter the log, convert RSSI to ranges and align the AHRS."""
    sensor_log.validate()
    if not sensor_log.imu:
        raise LogValidationError("log has no IMU samples")
    if not sensor_log.rssi:
        raise LogValidationError("log has no RSSI samples")
    imu = filter_imu(sensor_log.imu, cfg.imu_filter_window)
    mag = filter_mag(sensor_log.mag, cfg.mag_filter_window) if sensor_log.mag else []
    if cfg.rssi_filter_span > 0:
        rssi = filter_rssi_windows(sensor_log.rssi, cfg.rssi_filter_span)
    else:
        rssi = [(s, s.timestamp) for s in sensor_log.rssi]
    t = np.array([s.timestamp for s in imu])
    gyro = np.array([s.angular_velocity for s in imu])
    accel = np.array([s.acceleration for s in imu])
    mag_arr = np.full((t.size, 3), np.nan)
    if mag:
        # each magnetometer sample is consumed by the first IMU update at or after it
        mt = np.array([s.timestamp for s in mag])
        idx = np.searchsorted(t, mt, side="left")
        ok = idx < t.size
        mag_arr[idx[ok]] = np.array([s.field for s in mag])[ok]
    params = cfg.path_loss()
    tick_times = np.unique([s.timestamp for s in sensor_log.rssi])
    by_time: dict[float, list[RangeMeasurement]] = {}
    backend_ranges = []
    # smoothing windows overlap, so the back-end only takes disjoint ones to keep its errors independent
    last_kept: dict[str, float] = {}
    for sample, t_obs in rssi:
        z = make_range_measurement(sample, params, cfg.max_range)
        if z is not None:
            by_time.setdefault(z.timestamp, []).append(z)
            prev = last_kept.get(z.beacon_id)
            if prev is None or z.timestamp - prev >= cfg.rssi_filter_span:
                last_kept[z.beacon_id] = z.timestamp
                backend_ranges.append(replace(z, timestamp=t_obs))
    backend_ranges.sort(key=lambda z: z.timestamp)
    tick_ranges = [by_time.get(float(tt), []) for tt in tick_times]
    state = align(imu, mag, cfg.ahrs, ALIGN_DURATION)
    gt_t = gt_p = None
    if sensor_log.ground_truth:
        gt_t = np.array([s.timestamp for s in sensor_log.ground_truth])
        gt_p = np.array([s.position for s in sensor_log.ground_truth])
    return PreparedLog(t, gyro, accel, mag_arr, tick_times, tick_ranges, backend_ranges, state, gt_t, gt_p)


@dataclass
class RunResult:
    mode: str
    estimates: list[FrontendEstimate]
    solution: BackendSolution | None = None
    frontend_errors: ErrorSeries | None = None
    backend_errors: ErrorSeries | None = None
    # bias and map handed back after each back-end solve (closed loop only)
    feedback: list[tuple[float, ImuBias]] = field(default_factory=list)
    graph_dump: str = ""

    def positions(self) -> NDArray[np.float64]:
        return np.array([e.position for e in self.estimates]).reshape(-1, 3)

    def timestamps(self) -> NDArray[np.float64]:
        return np.array([e.timestamp for e in self.estimates])


class _Orientation:
    """AHRS output on the IMU time grid, produced lazily so feedback can steer it."""

    def __init__(self, prep: PreparedLog, cfg: RunConfig, enabled: bool):
        self.prep = prep
        self.cfg = cfg
        self.enabled = enabled
        self.state = prep.align_state
        m = prep.t.size
        self.quats = np.empty((m, 4))
        self.quats[0] = prep.align_state.orientation.as_quaternion()
        # index of the last processed IMU sample
        self.k = 0

    def advance_to(self, t: float) -> int:
        """Process IMU samples up to time ``t``; returns the index of the last one."""
        p = self.prep
        end = int(np.searchsorted(p.t, t, side="right"))
        if end - 1 > self.k:
            if self.enabled:
                s = slice(self.k + 1, end)
                self.state, q = run_ahrs(self.state, p.t[s], p.gyro[s], p.accel[s], p.mag[s], self.cfg.ahrs)
                self.quats[s] = q
            self.k = end - 1
        return self.k

    def rotation(self, k: int) -> Rotation3:
        return Rotation3(self.quats[k]) if self.enabled else Rotation3.identity()

    def matrices(self, start: int, stop: int) -> NDArray[np.float64]:
        w, x, y, z = self.quats[start:stop].T
        return np.stack(
            [
                np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
                np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
                np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
            ],
            axis=1,
        )

    def feedback(self, bias: ImuBias) -> None:
        self.state = apply_bias_feedback(self.state, bias)


@dataclass
class _KeyframeCandidate:
    imu_index: int
    estimate: FrontendEstimate
    orientation: Rotation3


class _BackendDriver:
    """Feeds keyframes to the smoother once every range describing their interval has arrived.

    Back-end ranges carry the time they describe, up to ``delay`` seconds
    before they arrive, so a keyframe is committed ``delay`` seconds late.
    """

    def __init__(self, prep: PreparedLog, cfg: RunConfig, smoother: Smoother, orient: _Orientation, g, incremental: bool):
        self.prep = prep
        self.cfg = cfg
        self.smoother = smoother
        self.orient = orient
        self.g = g
        self.incremental = incremental
        self.delay = cfg.rssi_filter_span
        self.queue: list[_KeyframeCandidate] = []
        self.range_ptr = 0
        self.prev_index = -1

    def offer(self, cand: _KeyframeCandidate) -> None:
        self.queue.append(cand)

    def commit_ready(self, now: float) -> bool:
        """Commit due keyframes; returns whether the smoother was updated."""
        updated = False
        while self.queue and now >= self.prep.t[self.queue[0].imu_index] + self.delay - 1e-9:
            self._commit(self.queue.pop(0))
            updated = True
        return updated

    def flush(self) -> None:
        while self.queue:
            self._commit(self.queue.pop(0))

    def _commit(self, cand: _KeyframeCandidate) -> None:
        prep, sm, k = self.prep, self.smoother, cand.imu_index
        t_kf = float(prep.t[k])
        ranges = prep.backend_ranges
        attach = []
        while self.range_ptr < len(ranges) and ranges[self.range_ptr].timestamp <= t_kf + 1e-9:
            attach.append(ranges[self.range_ptr])
            self.range_ptr += 1
        est = replace(cand.estimate, timestamp=t_kf)
        if self.prev_index < 0:
            # earlier ranges have no keyframe to hang from
            sm.add_keyframe(est, cand.orientation, ranges=[z for z in attach if abs(z.timestamp - t_kf) <= 1e-9])
        else:
            s = slice(self.prev_index, k + 1)
            integ = ImuIntegrator(
                prep.t[s], self.orient.matrices(self.prev_index, k + 1), prep.accel[s], sm.latest_bias().accel, self.g
            )
            pre = integ.summary(self.cfg.backend.accel_sigma, self.cfg.backend.preint_floor_sigma)
            sm.add_keyframe(est, cand.orientation, pre, attach, integ)
        self.prev_index = k
        if self.incremental:
            sm.update()


def run(
    prep: PreparedLog,
    prior_map: BeaconMap,
    bounds: Box,
    cfg: RunConfig,
    mode: str | None = None,
) -> RunResult:
    """Execute one run in ``mode`` (default ``cfg.mode``); deterministic in ``cfg.seed``.

    The back-end is stepped synchronously between BLE ticks, so its
    feedback reaches the front-end at the next tick. Without feedback
    (open loop) nothing consumes intermediate solutions and the graph is
    solved once at the end.
    """
    mode = mode or cfg.mode
    fcfg = replace(cfg, mode=mode).frontend()
    if bounds.lo[2] == bounds.hi[2]:
        # a flat search area means the platform stays on that plane
        fcfg = replace(fcfg, planar_height=float(bounds.lo[2]))
    use_backend = mode in ("open-loop", "closed-loop")
    closed = mode == "closed-loop"
    rng = np.random.default_rng(cfg.seed)
    g = gravity_vector(cfg.ahrs.gravity)
    orient = _Orientation(prep, cfg, enabled=mode != "pf-rw")
    t0 = float(prep.t[0])
    t_init_end = t0 + cfg.init_period

    pset = replace(initialize_global(bounds, fcfg.n_p, rng), timestamp=t0)
    beacons = prior_map
    bias = ImuBias()
    smoother = Smoother(prior_map, cfg.backend, g) if use_backend else None
    driver = _BackendDriver(prep, cfg, smoother, orient, g, incremental=closed) if smoother else None
    estimates: list[FrontendEstimate] = []
    feedback: list[tuple[float, ImuBias]] = []
    next_kf = t_init_end
    last_kf_index = -1

    for t, ranges in zip(prep.tick_times.tolist(), prep.tick_ranges):
        if t < t0:
            continue
        k = orient.advance_to(t)
        rot = orient.rotation(k)
        pset, est, _ = step(pset, Tick(t, prep.accel[k], rot, ranges), beacons, fcfg, rng, bias)
        if t < t_init_end:
            continue
        estimates.append(est)
        if driver is None:
            continue
        # keyframes sit on IMU sample times so preintegration spans them exactly
        if t + 1e-9 >= next_kf and k > last_kf_index:
            driver.offer(_KeyframeCandidate(k, est, rot))
            last_kf_index = k
            next_kf = float(prep.t[k]) + cfg.backend.keyframe_interval
        if driver.commit_ready(t) and closed:
            bias, beacons = smoother.emit_feedback()
            orient.feedback(bias)
            feedback.append((t, bias))

    if not estimates:
        raise LogValidationError("log ends before the initialization period is over")
    result = RunResult(mode, estimates, feedback=feedback)
    if driver is not None:
        driver.flush()
        if smoother.num_keyframes:
            result.solution = smoother.optimize()
            result.graph_dump = smoother.graph.dump()
    if prep.gt_t is not None:
        result.frontend_errors = position_errors(result.timestamps(), result.positions(), prep.gt_t, prep.gt_p)
        if result.solution is not None:
            sol = result.solution
            result.backend_errors = position_errors(sol.timestamps(), sol.positions(), prep.gt_t, prep.gt_p)
    return result


def write_run(result: RunResult, cfg: RunConfig, outdir: str | Path) -> None:
    """Write estimates, errors, back-end solution, graph dump and the effective config."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frontend_estimates.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "cov_trace"])
        for e in result.estimates:
            w.writerow([repr(float(x)) for x in (e.timestamp, *e.position, *e.velocity, np.trace(e.position_covariance))])
    if result.frontend_errors is not None:
        write_errors_csv(result.frontend_errors, out / "frontend_errors.csv")
    if result.solution is not None:
        export_solution(result.solution, out)
        (out / "graph.txt").write_text(result.graph_dump)
        if result.backend_errors is not None:
            write_errors_csv(result.backend_errors, out / "backend_errors.csv")
    if result.feedback:
        with open(out / "feedback.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "bax", "bay", "baz"])
            for t, b in result.feedback:
                w.writerow([repr(float(x)) for x in (t, *b.accel)])
    (out / "config.json").write_text(replace(cfg, mode=result.mode).dumps())


def summary_json(result: RunResult) -> str:
    d: dict = {"mode": result.mode, "estimates": len(result.estimates)}
    if result.frontend_errors is not None:
        e = result.frontend_errors.errors
        d["frontend_q"] = [float(x) for x in np.quantile(e, [0.25, 0.5, 0.75])]
    if result.solution is not None:
        d["keyframes"] = len(result.solution.trajectory)
        d["final_cost"] = result.solution.final_cost
        d["final_bias"] = result.solution.biases[-1].accel.tolist()
    return json.dumps(d, sort_keys=True)
