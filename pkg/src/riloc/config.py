"""Run configuration with the filter's parameter names as keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ahrs import AhrsConfig
from .backend import BackendConfig
from .frontend import FrontendConfig, RangeNoise
from .motion import ImuMotionParams, RandomWalkParams
from .sensors import PathLossParams

MODES = ("pf-rw", "pf-imu", "closed-loop", "open-loop")


class ConfigError(ValueError):
    """Invalid or unreadable configuration; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    # path loss
    a_x: float = -64.53
    gamma: float = 1.72
    d0: float = 1.78
    # range likelihood
    sigma_n: float = 5.0
    # random-walk motion model
    sigma_p: float = 0.1
    sigma_v_rw: float = 0.05
    # IMU motion model
    sigma_a: float = 1.5
    sigma_v_imu: float = 0.005
    # particle filter
    n_p: int = 300
    n_thr: float = 60.0
    # BLE metadata, not used by the estimator
    ble_tx_power: float = 4.0
    ble_frequency: float = 10.0

    mode: str = "pf-imu"
    seed: int = 0
    scenario: str | None = None
    output: str | None = None

    max_range: float = 10.0
    # measurements before this many seconds only shape the particle cloud
    init_period: float = 2.0
    imu_filter_window: int = 5
    mag_filter_window: int = 5
    # trailing RSSI median span in seconds; 0 disables smoothing
    rssi_filter_span: float = 1.0
    ahrs: AhrsConfig = field(default_factory=AhrsConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self) -> None:
        try:
            self.path_loss()
            self.frontend()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.n_thr > self.n_p:
            raise ConfigError("n_thr must not exceed n_p")
        if not self.max_range > 0 or self.init_period < 0 or self.rssi_filter_span < 0:
            raise ConfigError("max_range must be positive; init_period and rssi_filter_span non-negative")
        if self.imu_filter_window < 1 or self.mag_filter_window < 1:
            raise ConfigError("filter windows must be at least 1")
        if not self.backend.keyframe_interval > 0:
            raise ConfigError("backend.keyframe_interval must be positive")

    def path_loss(self) -> PathLossParams:
        return PathLossParams(self.a_x, self.gamma, self.d0)

    def frontend(self) -> FrontendConfig:
        return FrontendConfig(
            motion_model="rw" if self.mode == "pf-rw" else "imu",
            imu_motion=ImuMotionParams(self.sigma_a, self.sigma_v_imu),
            random_walk=RandomWalkParams(self.sigma_p, self.sigma_v_rw),
            noise=RangeNoise(self.sigma_n),
            n_p=self.n_p,
            n_thr=self.n_thr,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        try:
            if "ahrs" in d:
                d["ahrs"] = _sub(AhrsConfig, d["ahrs"], "ahrs")
            if "backend" in d:
                d["backend"] = _sub(BackendConfig, d["backend"], "backend")
            for key in ("n_p", "seed", "imu_filter_window", "mag_filter_window"):
                if key in d and (isinstance(d[key], bool) or not isinstance(d[key], int)):
                    raise ConfigError(f"{key} must be an integer")
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> RunConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.loads(text)


def _sub(cls, d, name: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None
