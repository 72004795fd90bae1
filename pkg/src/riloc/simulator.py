"""Ground-truth trajectories and synthetic IMU, magnetometer and BLE RSSI logs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .frontend import Box
from .geometry import NavState, Rotation3, gravity_vector
from .sensors import BeaconMap, ImuSample, MagSample, PathLossParams, RssiSample, SensorLog, range_to_rssi


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[tuple[float, float, float], ...]
    speed: float = 1.0
    turn_time: float = 2.0
    yaw_follows_path: bool = True
    ramp_accel: float = 0.5
    # stationary time before moving off and after arriving
    start_hold: float = 2.0
    end_hold: float = 0.0

    def __post_init__(self) -> None:
        wp = tuple(tuple(float(c) for c in w) for w in self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if len(wp) < 2 or any(len(w) != 3 for w in wp):
            raise ValueError("need at least two 3D waypoints")
        if not self.speed > 0 or not self.ramp_accel > 0:
            raise ValueError("speed and ramp_accel must be positive")
        if self.turn_time < 0 or self.start_hold < 0 or self.end_hold < 0:
            raise ValueError("turn_time and hold times must be non-negative")
        w = np.array(wp)
        if np.any(np.linalg.norm(np.diff(w, axis=0), axis=1) < 1e-9):
            raise ValueError("consecutive waypoints coincide")


@dataclass(frozen=True)
class SensorNoiseSpec:
    accel_noise_sigma: float = 0.05
    gyro_noise_sigma: float = 0.001
    mag_noise_sigma: float = 0.01
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # random-walk density of the accelerometer bias, (m/s^2)/sqrt(s)
    accel_bias_walk: float = 0.0
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rssi_shadowing_sigma: float = 4.0
    imu_rate: float = 200.0
    mag_rate: float = 50.0
    # mean BLE scan rate; intervals are uniform in [2/3, 4/3] of the mean
    ble_rate: float = 7.0
    ble_jitter: bool = True
    # beacons farther than this produce no RSSI at all
    radio_range: float = 25.0

    def __post_init__(self) -> None:
        for name in ("imu_rate", "mag_rate", "ble_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("accel_noise_sigma", "gyro_noise_sigma", "mag_noise_sigma", "rssi_shadowing_sigma", "accel_bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "accel_bias", tuple(float(x) for x in self.accel_bias))
        object.__setattr__(self, "gyro_bias", tuple(float(x) for x in self.gyro_bias))


@dataclass(frozen=True)
class WorldSpec:
    bounds: Box
    beacons: BeaconMap
    beacon_prior_offset_sigma: float = 0.0
    # misalign priors in the horizontal plane only (beacons keep their mounting height)
    horizontal_offset_only: bool = True
    beacon_prior_sigma: float = 0.5
    # magnetic dip angle, radians below the horizontal
    mag_dip: float = 1.1
    # device height of a planar platform; pins the search area to that plane
    floor_height: float | None = None

    def __post_init__(self) -> None:
        inside = self.bounds.contains(self.beacons.positions())
        if not np.all(inside):
            raise ValueError("all beacons must lie inside the world bounds")
        if self.floor_height is not None and not self.bounds.lo[2] <= self.floor_height <= self.bounds.hi[2]:
            raise ValueError("floor_height must lie within the world bounds")

    def search_area(self) -> Box:
        """Region the particles are initialized over."""
        if self.floor_height is None:
            return self.bounds
        lo, hi = list(self.bounds.lo), list(self.bounds.hi)
        lo[2] = hi[2] = self.floor_height
        return Box(tuple(lo), tuple(hi))

    def prior_map(self, rng: np.random.Generator) -> BeaconMap:
        """Beacon map handed to the estimator, with random placement errors."""
        out = BeaconMap()
        for bid, e in self.beacons.entries.items():
            off = rng.normal(0.0, self.beacon_prior_offset_sigma, 3) if self.beacon_prior_offset_sigma > 0 else np.zeros(3)
            if self.horizontal_offset_only:
                off[2] = 0.0
            out.add(bid, e.position + off, self.beacon_prior_sigma)
        return out

    def mag_reference(self) -> NDArray[np.float64]:
        return np.array([math.cos(self.mag_dip), 0.0, -math.sin(self.mag_dip)])


@dataclass
class Trajectory:
    """Densely sampled ground truth with analytic derivatives."""

    t: NDArray[np.float64]
    position: NDArray[np.float64]
    velocity: NDArray[np.float64]
    acceleration: NDArray[np.float64]
    yaw: NDArray[np.float64]

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def rotation(self, i: int) -> Rotation3:
        return Rotation3.rz(float(self.yaw[i]))

    def rotation_matrices(self) -> NDArray[np.float64]:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.zeros((self.t.size, 3, 3))
        R[:, 0, 0], R[:, 0, 1] = c, -s
        R[:, 1, 0], R[:, 1, 1] = s, c
        R[:, 2, 2] = 1.0
        return R

    def states(self, stride: int = 1) -> list[NavState]:
        return [
            NavState(float(self.t[i]), self.rotation(i), self.position[i], self.velocity[i])
            for i in range(0, self.t.size, stride)
        ]

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.position, axis=0), axis=1)))


# --- trajectory -------------------------------------------------------------


@dataclass
class _Piece:
    s0: float
    length: float
    start: NDArray[np.float64]
    direction: NDArray[np.float64]
    # arcs only
    normal: NDArray[np.float64] | None = None
    radius: float = 0.0


def _build_path(spec: TrajectorySpec) -> list[_Piece]:
    w = np.array(spec.waypoints)
    seg = np.diff(w, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    dirs = seg / lengths[:, None]
    arc_len = spec.speed * spec.turn_time
    # per-corner tangent length, turn angle, inward normal
    corners = []
    for i in range(1, len(w) - 1):
        d0, d1 = dirs[i - 1], dirs[i]
        phi = math.acos(float(np.clip(d0 @ d1, -1.0, 1.0)))
        if phi < 1e-9 or arc_len <= 0:
            corners.append((0.0, 0.0, None, 0.0))
            continue
        if phi > math.pi - 1e-6:
            raise ValueError(f"waypoint {i} reverses direction; cannot round the corner")
        r = arc_len / phi
        tl = r * math.tan(phi / 2)
        limit = 0.5 * min(lengths[i - 1], lengths[i])
        if tl > limit:
            tl = limit
            r = tl / math.tan(phi / 2)
        n = d1 - (d1 @ d0) * d0
        n /= np.linalg.norm(n)
        corners.append((tl, phi, n, r))
    pieces: list[_Piece] = []
    s = 0.0
    pos = w[0].copy()
    for i in range(len(dirs)):
        tl_in = corners[i - 1][0] if i > 0 else 0.0
        tl_out = corners[i][0] if i < len(corners) else 0.0
        line_len = lengths[i] - tl_in - tl_out
        if line_len > 1e-12:
            pieces.append(_Piece(s, line_len, pos.copy(), dirs[i]))
            s += line_len
            pos = pos + line_len * dirs[i]
        if i < len(corners) and corners[i][1] > 0:
            tl, phi, n, r = corners[i]
            pieces.append(_Piece(s, r * phi, pos.copy(), dirs[i], n, r))
            s += r * phi
            pos = w[i + 1] + tl * dirs[i + 1]
    return pieces


def _speed_profile(t: NDArray[np.float64], total: float, spec: TrajectorySpec):
    """Arc length, speed and tangential acceleration of a trapezoidal profile."""
    a, v = spec.ramp_accel, spec.speed
    if total >= v * v / a:
        t_ramp = v / a
        t_cruise = (total - v * v / a) / v
    else:
        t_ramp = math.sqrt(total / a)
        v = a * t_ramp
        t_cruise = 0.0
    tau = np.clip(t - spec.start_hold, 0.0, None)
    t1, t2, t3 = t_ramp, t_ramp + t_cruise, 2 * t_ramp + t_cruise
    s = np.empty_like(tau)
    sd = np.empty_like(tau)
    sdd = np.zeros_like(tau)
    m = tau <= t1
    s[m], sd[m], sdd[m] = 0.5 * a * tau[m] ** 2, a * tau[m], a
    m = (tau > t1) & (tau <= t2)
    s[m], sd[m] = 0.5 * a * t1**2 + v * (tau[m] - t1), v
    m = (tau > t2) & (tau <= t3)
    r = tau[m] - t2
    s[m], sd[m], sdd[m] = 0.5 * a * t1**2 + v * t_cruise + v * r - 0.5 * a * r**2, v - a * r, -a
    m = tau > t3
    s[m], sd[m] = total, 0.0
    # no acceleration while holding
    sdd[t < spec.start_hold] = 0.0
    return s, sd, sdd, spec.start_hold + t3


def generate_trajectory(spec: TrajectorySpec, dt: float = 0.005) -> Trajectory:
    """Sample a C1 trajectory along rounded waypoints at a uniform ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    pieces = _build_path(spec)
    total = pieces[-1].s0 + pieces[-1].length
    _, _, _, t_move_end = _speed_profile(np.zeros(1), total, spec)
    n = int(math.ceil((t_move_end + spec.end_hold) / dt - 1e-9)) + 1
    t = np.arange(n) * dt
    s, sd, sdd, _ = _speed_profile(t, total, spec)
    pos = np.zeros((n, 3))
    tan = np.zeros((n, 3))
    curv = np.zeros((n, 3))
    starts = np.array([p.s0 for p in pieces])
    idx = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(pieces) - 1)
    for k, p in enumerate(pieces):
        m = idx == k
        u = np.clip(s[m] - p.s0, 0.0, p.length)
        if p.normal is None:
            pos[m] = p.start + u[:, None] * p.direction
            tan[m] = p.direction
        else:
            th = (u / p.radius)[:, None]
            c, sn = np.cos(th), np.sin(th)
            center = p.start + p.radius * p.normal
            pos[m] = center - p.radius * p.normal * c + p.radius * p.direction * sn
            tan[m] = p.direction * c + p.normal * sn
            curv[m] = (p.normal * c - p.direction * sn) / p.radius
    vel = sd[:, None] * tan
    acc = sdd[:, None] * tan + (sd**2)[:, None] * curv
    if spec.yaw_follows_path:
        yaw = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))
    else:
        yaw = np.zeros(n)
    return Trajectory(t, pos, vel, acc, yaw)


# --- sensors ----------------------------------------------------------------


def _stride(traj: Trajectory, rate: float) -> int:
    k = (1.0 / rate) / traj.dt
    stride = int(round(k))
    if stride < 1 or abs(k - stride) > 1e-6:
        raise ValueError(f"trajectory step {traj.dt} s does not divide the {rate} Hz sample period")
    return stride


def synthesize_imu(
    traj: Trajectory, noise: SensorNoiseSpec, rng: np.random.Generator, gravity: ArrayLike | None = None
) -> list[ImuSample]:
    """Specific force ``R^T (p_dd - g) + bias + noise`` and gyro rates from yaw differences."""
    g = gravity_vector() if gravity is None else np.asarray(gravity)
    stride = _stride(traj, noise.imu_rate)
    idx = np.arange(0, traj.t.size, stride)
    m = idx.size
    R = traj.rotation_matrices()[idx]
    f = np.einsum("kji,kj->ki", R, traj.acceleration[idx] - g)
    bias = np.tile(np.asarray(noise.accel_bias), (m, 1))
    if noise.accel_bias_walk > 0 and m > 1:
        step = noise.accel_bias_walk * math.sqrt(stride * traj.dt)
        bias[1:] += np.cumsum(rng.normal(0.0, step, (m - 1, 3)), axis=0)
    a = f + bias + rng.normal(0.0, noise.accel_noise_sigma, (m, 3))
    w = np.zeros((m, 3))
    # rate that carries sample k-1's attitude exactly onto sample k
    w[1:, 2] = np.diff(traj.yaw[idx]) / (stride * traj.dt)
    w += np.asarray(noise.gyro_bias) + rng.normal(0.0, noise.gyro_noise_sigma, (m, 3))
    t = traj.t[idx]
    return [ImuSample(float(t[k]), w[k], a[k]) for k in range(m)]


def synthesize_mag(
    traj: Trajectory,
    noise: SensorNoiseSpec,
    rng: np.random.Generator,
    reference: ArrayLike = (math.cos(1.1), 0.0, -math.sin(1.1)),
) -> list[MagSample]:
    stride = _stride(traj, noise.mag_rate)
    idx = np.arange(0, traj.t.size, stride)
    R = traj.rotation_matrices()[idx]
    m = np.einsum("kji,j->ki", R, np.asarray(reference, dtype=float))
    m = m + rng.normal(0.0, noise.mag_noise_sigma, m.shape)
    return [MagSample(float(traj.t[i]), m[k]) for k, i in enumerate(idx)]


def ble_tick_times(traj: Trajectory, noise: SensorNoiseSpec, rng: np.random.Generator) -> NDArray[np.float64]:
    """Scan times snapped to the IMU sample grid."""
    mean = 1.0 / noise.ble_rate
    grid = 1.0 / noise.imu_rate
    t_end = float(traj.t[-1])
    out = []
    t = float(traj.t[0])
    while True:
        t += rng.uniform(2 * mean / 3, 4 * mean / 3) if noise.ble_jitter else mean
        snapped = round(t / grid) * grid
        if snapped > t_end + 1e-9:
            break
        if not out or snapped > out[-1]:
            out.append(snapped)
    return np.array(out)


def synthesize_rssi(
    traj: Trajectory,
    world: WorldSpec,
    params: PathLossParams,
    noise: SensorNoiseSpec,
    rng: np.random.Generator,
) -> list[RssiSample]:
    ticks = ble_tick_times(traj, noise, rng)
    ids = world.beacons.ids()
    L = world.beacons.positions()
    idx = np.clip(np.searchsorted(traj.t, ticks - 1e-9), 0, traj.t.size - 1)
    out = []
    for t, i in zip(ticks, idx):
        d = np.linalg.norm(L - traj.position[i], axis=1)
        for j in np.flatnonzero(d <= noise.radio_range):
            rssi = float(range_to_rssi(max(d[j], 1e-3), params)) + rng.normal(0.0, noise.rssi_shadowing_sigma)
            out.append(RssiSample(float(t), ids[j], rssi))
    return out


# --- scenarios --------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    trajectory: TrajectorySpec
    world: WorldSpec
    noise: SensorNoiseSpec = SensorNoiseSpec()
    path_loss: PathLossParams = PathLossParams()
    dt: float = 0.005

    def to_dict(self) -> dict:
        w = self.world
        return {
            "trajectory": {**asdict(self.trajectory), "waypoints": [list(p) for p in self.trajectory.waypoints]},
            "world": {
                "bounds": {"lo": list(w.bounds.lo), "hi": list(w.bounds.hi)},
                "beacons": [{"id": b, "x": float(e.position[0]), "y": float(e.position[1]), "z": float(e.position[2])}
                            for b, e in w.beacons.entries.items()],
                "beacon_prior_offset_sigma": w.beacon_prior_offset_sigma,
                "horizontal_offset_only": w.horizontal_offset_only,
                "beacon_prior_sigma": w.beacon_prior_sigma,
                "mag_dip": w.mag_dip,
                "floor_height": w.floor_height,
            },
            "noise": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.noise).items()},
            "path_loss": asdict(self.path_loss),
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        w = d["world"]
        beacons = BeaconMap()
        sigma = float(w.get("beacon_prior_sigma", 0.5))
        for b in w["beacons"]:
            beacons.add(str(b["id"]), (b["x"], b["y"], b["z"]), sigma)
        traj = dict(d["trajectory"])
        traj["waypoints"] = tuple(tuple(p) for p in traj["waypoints"])
        noise = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("noise", {}).items()}
        world = WorldSpec(
            Box(tuple(w["bounds"]["lo"]), tuple(w["bounds"]["hi"])),
            beacons,
            beacon_prior_offset_sigma=float(w.get("beacon_prior_offset_sigma", 0.0)),
            horizontal_offset_only=bool(w.get("horizontal_offset_only", True)),
            beacon_prior_sigma=sigma,
            mag_dip=float(w.get("mag_dip", 1.1)),
            floor_height=None if w.get("floor_height") is None else float(w["floor_height"]),
        )
        return cls(
            TrajectorySpec(**traj),
            world,
            SensorNoiseSpec(**noise),
            PathLossParams(**d.get("path_loss", {})),
            float(d.get("dt", 0.005)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        """Read a scenario file, or a built-in scenario by name (see ``SCENARIOS``)."""
        if str(path) in SCENARIOS:
            return SCENARIOS[str(path)]()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as e:
            raise ScenarioError(f"cannot read scenario {path}: {e}") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"invalid scenario {path}: {e!r}") from None


class ScenarioError(ValueError):
    """Unreadable or inconsistent scenario description."""


@dataclass
class SimulatedRun:
    log: SensorLog
    prior_map: BeaconMap
    trajectory: Trajectory
    true_map: BeaconMap = field(repr=False)


def simulate(scenario: Scenario, seed: int) -> SimulatedRun:
    """Generate one log plus the (misaligned) prior map; deterministic in ``seed``.

    Independent child streams drive each sensor so that changing one noise
    setting does not reshuffle the others.
    """
    traj = generate_trajectory(scenario.trajectory, scenario.dt)
    imu_rng, mag_rng, ble_rng, map_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
    imu = synthesize_imu(traj, scenario.noise, imu_rng)
    mag = synthesize_mag(traj, scenario.noise, mag_rng, scenario.world.mag_reference())
    rssi = synthesize_rssi(traj, scenario.world, scenario.path_loss, scenario.noise, ble_rng)
    gt_stride = _stride(traj, scenario.noise.imu_rate)
    log = SensorLog(imu, mag, rssi, traj.states(gt_stride))
    return SimulatedRun(log, scenario.world.prior_map(map_rng), traj, scenario.world.beacons)


def office_scenario(
    shadowing_sigma: float = 4.0,
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0),
    beacon_prior_offset_sigma: float = 0.0,
    speed: float = 1.0,
    beacon_heights: tuple[float, ...] = (2.5, 0.5),
    planar_bounds: bool = True,
    layout: str = "serpentine",
) -> Scenario:
    """A 40 x 50 m office with a path of about 120 m and at least 20 beacons.

    ``"serpentine"`` walks four 25 m aisles 6 m apart with 21 beacons in the
    three rows between them, so each beacon is ranged from both sides.
    ``"loop"`` walks an open 118 m loop past 24 beacons on alternating sides.
    Beacon heights cycle through ``beacon_heights``; mixing heights above and
    below the device keeps its height observable from ranges. With
    ``planar_bounds`` the search area is the floor plane at device height.
    """
    z = 1.0
    beacons = BeaconMap()
    if layout == "serpentine":
        x0, x1 = 7.5, 32.5
        lanes = [10.0 + 6.0 * i for i in range(4)]
        waypoints = []
        for i, y in enumerate(lanes):
            xs = (x0, x1) if i % 2 == 0 else (x1, x0)
            waypoints += [(xs[0], y, z), (xs[1], y, z)]
        waypoints = tuple(waypoints)
        k = 0
        for y in lanes[:-1]:
            for x in np.arange(8.0, 32.5, 4.0):
                beacons.add(f"b{k:02d}", (x, y + 3.0, beacon_heights[k % len(beacon_heights)]), 0.5)
                k += 1
    elif layout == "loop":
        waypoints = ((5.0, 5.0, z), (5.0, 45.0, z), (35.0, 45.0, z), (35.0, 15.0, z), (15.0, 15.0, z))
        w = np.array(waypoints)
        k = 0
        for a, b in zip(w[:-1], w[1:]):
            seg = b - a
            length = np.linalg.norm(seg)
            d = seg / length
            normal = np.array([-d[1], d[0], 0.0])
            for s in np.arange(2.5, length, 5.0):
                side = 1.5 if k % 2 == 0 else -1.5
                p = a + s * d + side * normal
                beacons.add(f"b{k:02d}", (p[0], p[1], beacon_heights[k % len(beacon_heights)]), 0.5)
                k += 1
    else:
        raise ValueError(f"unknown layout {layout!r}")
    world = WorldSpec(
        Box((0.0, 0.0, 0.0), (40.0, 50.0, 3.0)),
        beacons,
        beacon_prior_offset_sigma=beacon_prior_offset_sigma,
        floor_height=z if planar_bounds else None,
    )
    noise = SensorNoiseSpec(rssi_shadowing_sigma=shadowing_sigma, accel_bias=accel_bias)
    return Scenario(TrajectorySpec(waypoints, speed=speed), world, noise)


SCENARIOS = {"office": office_scenario}
