"""Sensor samples, log I/O, median filtering and RSSI ranging."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from .geometry import NavState, Rotation3

log = logging.getLogger(__name__)

# Largest range kept after RSSI conversion; BLE is not usable beyond this.
DEFAULT_MAX_RANGE = 10.0
# Relative slack so a range computed at exactly max_range survives float round-off.
_RANGE_EPS = 1e-12


class LogFormatError(ValueError):
    """A log line could not be parsed."""


class LogValidationError(ValueError):
    """A log parsed but violates stream invariants."""


@dataclass(frozen=True, slots=True)
class ImuSample:
    timestamp: float
    angular_velocity: NDArray[np.float64]
    acceleration: NDArray[np.float64]


@dataclass(frozen=True, slots=True)
class MagSample:
    timestamp: float
    field: NDArray[np.float64]


@dataclass(frozen=True, slots=True)
class RssiSample:
    timestamp: float
    beacon_id: str
    rssi: float


@dataclass(frozen=True, slots=True)
class RangeMeasurement:
    timestamp: float
    beacon_id: str
    range: float


@dataclass(frozen=True)
class PathLossParams:
    """Log-distance path-loss model; defaults are the experimental values."""

    a_x: float = -64.53
    gamma: float = 1.72
    d0: float = 1.78

    def __post_init__(self) -> None:
        if not self.gamma > 0 or not self.d0 > 0:
            raise ValueError(f"gamma and d0 must be positive: {self}")


@dataclass
class SensorLog:
    imu: list[ImuSample] = field(default_factory=list)
    mag: list[MagSample] = field(default_factory=list)
    rssi: list[RssiSample] = field(default_factory=list)
    ground_truth: list[NavState] | None = None

    def imu_arrays(self) -> tuple[NDArray, NDArray, NDArray]:
        """Return ``(t, gyro, accel)`` as arrays of shape (N,), (N, 3), (N, 3)."""
        n = len(self.imu)
        t = np.fromiter((s.timestamp for s in self.imu), float, n)
        w = np.array([s.angular_velocity for s in self.imu], dtype=float).reshape(n, 3)
        a = np.array([s.acceleration for s in self.imu], dtype=float).reshape(n, 3)
        return t, w, a

    def mag_arrays(self) -> tuple[NDArray, NDArray]:
        n = len(self.mag)
        t = np.fromiter((s.timestamp for s in self.mag), float, n)
        m = np.array([s.field for s in self.mag], dtype=float).reshape(n, 3)
        return t, m

    def ground_truth_arrays(self) -> tuple[NDArray, NDArray, NDArray]:
        gt = self.ground_truth or []
        n = len(gt)
        t = np.fromiter((s.timestamp for s in gt), float, n)
        p = np.array([s.position for s in gt], dtype=float).reshape(n, 3)
        v = np.array([s.velocity for s in gt], dtype=float).reshape(n, 3)
        return t, p, v

    def validate(self) -> None:
        for name, stream, strict in (
            ("imu", self.imu, True),
            ("mag", self.mag, True),
            ("rssi", self.rssi, False),
            ("gt", self.ground_truth or [], True),
        ):
            t = np.fromiter((s.timestamp for s in stream), float, len(stream))
            if not np.all(np.isfinite(t)):
                raise LogValidationError(f"{name}: non-finite timestamp")
            d = np.diff(t)
            bad = np.flatnonzero(d <= 0 if strict else d < 0)
            if bad.size:
                i = int(bad[0]) + 1
                raise LogValidationError(
                    f"{name}: timestamps not increasing at sample {i} (t={t[i]!r} after {t[i - 1]!r})"
                )
        if self.imu:
            _, w, a = self.imu_arrays()
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
                raise LogValidationError("imu: non-finite sample")
        if self.mag:
            _, m = self.mag_arrays()
            if not np.all(np.isfinite(m)) or np.any(np.linalg.norm(m, axis=1) == 0):
                raise LogValidationError("mag: non-finite or zero field")
        for s in self.rssi:
            if not s.beacon_id or not math.isfinite(s.rssi):
                raise LogValidationError(f"rssi: invalid sample at t={s.timestamp!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SensorLog):
            return NotImplemented
        if (self.ground_truth is None) != (other.ground_truth is None):
            return False
        if self.rssi != other.rssi:
            return False
        if len(self.imu) != len(other.imu) or len(self.mag) != len(other.mag):
            return False
        for x, y in ((self.imu_arrays(), other.imu_arrays()), (self.mag_arrays(), other.mag_arrays())):
            if not all(np.array_equal(u, v) for u, v in zip(x, y)):
                return False
        return (self.ground_truth or []) == (other.ground_truth or [])


@dataclass(frozen=True)
class BeaconEntry:
    position: NDArray[np.float64]
    prior_sigma: float


class BeaconMap:
    """Beacon id to position and prior standard deviation."""

    def __init__(self, entries: dict[str, BeaconEntry] | None = None):
        self.entries: dict[str, BeaconEntry] = {}
        for bid, e in (entries or {}).items():
            self.add(bid, e.position, e.prior_sigma)

    def add(self, beacon_id: str, position: ArrayLike, prior_sigma: float) -> None:
        pos = np.array(position, dtype=float).reshape(3)
        if not beacon_id:
            raise ValueError("beacon id must be non-empty")
        if beacon_id in self.entries:
            raise ValueError(f"duplicate beacon id {beacon_id!r}")
        if not np.all(np.isfinite(pos)) or not prior_sigma > 0:
            raise ValueError(f"invalid beacon {beacon_id!r}: {pos}, sigma={prior_sigma}")
        pos.setflags(write=False)
        self.entries[beacon_id] = BeaconEntry(pos, float(prior_sigma))

    def __contains__(self, beacon_id: str) -> bool:
        return beacon_id in self.entries

    def __getitem__(self, beacon_id: str) -> BeaconEntry:
        return self.entries[beacon_id]

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return list(self.entries)

    def position(self, beacon_id: str) -> NDArray[np.float64]:
        return self.entries[beacon_id].position

    def positions(self) -> NDArray[np.float64]:
        return np.array([e.position for e in self.entries.values()]).reshape(-1, 3)

    def copy(self) -> BeaconMap:
        return BeaconMap(dict(self.entries))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BeaconMap):
            return NotImplemented
        if self.ids() != other.ids():
            return False
        return all(
            np.array_equal(e.position, other.entries[k].position)
            and e.prior_sigma == other.entries[k].prior_sigma
            for k, e in self.entries.items()
        )

    def __repr__(self) -> str:
        return f"BeaconMap({len(self)} beacons)"


# --- filtering --------------------------------------------------------------


def median_filter(stream: ArrayLike, window: int) -> NDArray[np.float64]:
    """Component-wise centered median with truncated boundary windows.

    Windows that are truncated to an even count take the lower-middle
    order statistic.
    """
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window!r}")
    x = np.asarray(stream, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("stream must be non-empty")
    if window == 1:
        return x.copy()
    n = x.shape[0]
    h = window // 2
    out = np.empty_like(x)
    if n > 2 * h:
        win = sliding_window_view(x, window, axis=0)
        out[h : n - h] = np.sort(win, axis=-1)[..., h]
    for i in list(range(min(h, n))) + list(range(max(h, n - h), n)):
        seg = np.sort(x[max(0, i - h) : i + h + 1], axis=0)
        out[i] = seg[(seg.shape[0] - 1) // 2]
    return out


def filter_imu(samples: Sequence[ImuSample], window: int = 5) -> list[ImuSample]:
    if not samples:
        return []
    t = [s.timestamp for s in samples]
    w = median_filter(np.array([s.angular_velocity for s in samples]), window)
    a = median_filter(np.array([s.acceleration for s in samples]), window)
    return [ImuSample(ti, wi, ai) for ti, wi, ai in zip(t, w, a)]


def filter_mag(samples: Sequence[MagSample], window: int = 5) -> list[MagSample]:
    if not samples:
        return []
    m = median_filter(np.array([s.field for s in samples]), window)
    return [MagSample(s.timestamp, mi) for s, mi in zip(samples, m)]


def filter_rssi(
    samples: Sequence[RssiSample], span: float = 1.0, min_count: int = 3
) -> list[RssiSample]:
    """Causal per-beacon median over the trailing ``span`` seconds.

    A sample is replaced only when its beacon produced at least
    ``min_count`` samples in the window; otherwise it passes through raw.
    """
    return [s for s, _ in filter_rssi_windows(samples, span, min_count)]


def filter_rssi_windows(
    samples: Sequence[RssiSample], span: float = 1.0, min_count: int = 3
) -> list[tuple[RssiSample, float]]:
    """:func:`filter_rssi` plus the mean timestamp of each output's window.

    A trailing median lags the signal by about half the window; the mean
    window time is when the filtered value was actually observed.
    """
    history: dict[str, deque[RssiSample]] = defaultdict(deque)
    out = []
    for s in samples:
        h = history[s.beacon_id]
        h.append(s)
        while s.timestamp - h[0].timestamp >= span:
            h.popleft()
        if len(h) >= min_count:
            vals = sorted(x.rssi for x in h)
            t_mid = sum(x.timestamp for x in h) / len(h)
            out.append((RssiSample(s.timestamp, s.beacon_id, vals[(len(vals) - 1) // 2]), t_mid))
        else:
            out.append((s, s.timestamp))
    return out


# --- path loss --------------------------------------------------------------


def rssi_to_range(rssi, params: PathLossParams = PathLossParams()):
    """Invert the log-distance model: ``d0 * 10**((a_x - rssi) / (10 gamma))``."""
    return params.d0 * np.power(10.0, (params.a_x - np.asarray(rssi, dtype=float)) / (10.0 * params.gamma))


def range_to_rssi(distance, params: PathLossParams = PathLossParams()):
    """Forward log-distance model: ``a_x - 10 gamma log10(d / d0)``."""
    return params.a_x - 10.0 * params.gamma * np.log10(np.asarray(distance, dtype=float) / params.d0)


def make_range_measurement(
    sample: RssiSample,
    params: PathLossParams = PathLossParams(),
    max_range: float = DEFAULT_MAX_RANGE,
) -> RangeMeasurement | None:
    """Convert one RSSI sample; returns ``None`` when the range exceeds ``max_range``."""
    r = float(rssi_to_range(sample.rssi, params))
    if r > max_range * (1.0 + _RANGE_EPS):
        return None
    return RangeMeasurement(sample.timestamp, sample.beacon_id, r)


def ranges_from_rssi(
    samples: Iterable[RssiSample],
    params: PathLossParams = PathLossParams(),
    max_range: float = DEFAULT_MAX_RANGE,
) -> list[RangeMeasurement]:
    out = []
    for s in samples:
        m = make_range_measurement(s, params, max_range)
        if m is not None:
            out.append(m)
    return out


# --- log I/O ----------------------------------------------------------------

_IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
_MAG_HEADER = ["t", "mx", "my", "mz"]
_RSSI_HEADER = ["t", "id", "rssi"]
_GT_HEADER = ["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"]


def _vec(obj: dict, key: str, n: int, lineno: int) -> NDArray[np.float64]:
    try:
        v = np.array([float(x) for x in obj[key]], dtype=float)
    except KeyError:
        raise LogFormatError(f"line {lineno}: missing field {key!r}") from None
    except (TypeError, ValueError):
        raise LogFormatError(f"line {lineno}: field {key!r} is not a numeric list") from None
    if v.shape != (n,):
        raise LogFormatError(f"line {lineno}: field {key!r} must have {n} entries")
    return v


def _record(obj: dict, lineno: int):
    if not isinstance(obj, dict):
        raise LogFormatError(f"line {lineno}: expected a JSON object")
    try:
        t = float(obj["t"])
        kind = obj["type"]
    except KeyError as e:
        raise LogFormatError(f"line {lineno}: missing field {e.args[0]!r}") from None
    except (TypeError, ValueError):
        raise LogFormatError(f"line {lineno}: field 't' is not a number") from None
    if kind == "imu":
        return kind, ImuSample(t, _vec(obj, "w", 3, lineno), _vec(obj, "a", 3, lineno))
    if kind == "mag":
        return kind, MagSample(t, _vec(obj, "m", 3, lineno))
    if kind == "rssi":
        if "id" not in obj or "rssi" not in obj:
            missing = "id" if "id" not in obj else "rssi"
            raise LogFormatError(f"line {lineno}: missing field {missing!r}")
        try:
            return kind, RssiSample(t, str(obj["id"]), float(obj["rssi"]))
        except (TypeError, ValueError):
            raise LogFormatError(f"line {lineno}: field 'rssi' is not a number") from None
    if kind == "gt":
        q = _vec(obj, "q", 4, lineno)
        return kind, NavState(t, Rotation3(q), _vec(obj, "p", 3, lineno), _vec(obj, "v", 3, lineno))
    raise LogFormatError(f"line {lineno}: unknown record type {kind!r}")


def read_jsonl(stream: IO[str]) -> SensorLog:
    out = SensorLog()
    gt: list[NavState] = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise LogFormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
        kind, rec = _record(obj, lineno)
        if kind == "gt":
            gt.append(rec)
        else:
            getattr(out, kind).append(rec)
    out.ground_truth = gt or None
    out.validate()
    return out


def _jsonl_records(log: SensorLog) -> list[tuple[float, int, dict]]:
    recs: list[tuple[float, int, dict]] = []
    for s in log.ground_truth or []:
        recs.append((s.timestamp, 0, {"t": s.timestamp, "type": "gt", "q": s.orientation.as_quaternion().tolist(),
                                      "p": s.position.tolist(), "v": s.velocity.tolist()}))
    for s in log.imu:
        recs.append((s.timestamp, 1, {"t": s.timestamp, "type": "imu", "w": np.asarray(s.angular_velocity).tolist(),
                                      "a": np.asarray(s.acceleration).tolist()}))
    for s in log.mag:
        recs.append((s.timestamp, 2, {"t": s.timestamp, "type": "mag", "m": np.asarray(s.field).tolist()}))
    for s in log.rssi:
        recs.append((s.timestamp, 3, {"t": s.timestamp, "type": "rssi", "id": s.beacon_id, "rssi": s.rssi}))
    # stable sort keeps per-stream order for equal timestamps
    recs.sort(key=lambda r: (r[0], r[1]))
    return recs


def write_jsonl(log: SensorLog, stream: IO[str]) -> None:
    for _, _, obj in _jsonl_records(log):
        stream.write(json.dumps(obj, separators=(",", ":")))
        stream.write("\n")


def _read_csv_rows(path: Path, header: list[str]) -> list[list[str]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != header:
        raise LogFormatError(f"{path.name} line 1: expected header {','.join(header)}")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise LogFormatError(f"{path.name} line {i}: expected {len(header)} columns, got {len(r)}")
    return rows[1:]


def _floats(row: list[str], path: Path, lineno: int) -> list[float]:
    try:
        return [float(x) for x in row]
    except ValueError:
        raise LogFormatError(f"{path.name} line {lineno}: non-numeric value") from None


def read_csv_dir(directory: Path) -> SensorLog:
    directory = Path(directory)
    out = SensorLog()
    p = directory / "imu.csv"
    for i, r in enumerate(_read_csv_rows(p, _IMU_HEADER), start=2):
        v = _floats(r, p, i)
        out.imu.append(ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7])))
    p = directory / "mag.csv"
    for i, r in enumerate(_read_csv_rows(p, _MAG_HEADER), start=2):
        v = _floats(r, p, i)
        out.mag.append(MagSample(v[0], np.array(v[1:4])))
    p = directory / "rssi.csv"
    for i, r in enumerate(_read_csv_rows(p, _RSSI_HEADER), start=2):
        t, rssi = _floats([r[0], r[2]], p, i)
        out.rssi.append(RssiSample(t, r[1], rssi))
    p = directory / "gt.csv"
    if p.exists():
        out.ground_truth = []
        for i, r in enumerate(_read_csv_rows(p, _GT_HEADER), start=2):
            v = _floats(r, p, i)
            out.ground_truth.append(NavState(v[0], Rotation3(v[1:5]), v[5:8], v[8:11]))
    out.validate()
    return out


def write_csv_dir(log: SensorLog, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def dump(name: str, header: list[str], rows: Iterable[list]) -> None:
        with open(directory / name, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(x)) if not isinstance(x, str) else x for x in r])

    dump("imu.csv", _IMU_HEADER, ([s.timestamp, *s.angular_velocity, *s.acceleration] for s in log.imu))
    dump("mag.csv", _MAG_HEADER, ([s.timestamp, *s.field] for s in log.mag))
    dump("rssi.csv", _RSSI_HEADER, ([s.timestamp, s.beacon_id, s.rssi] for s in log.rssi))
    if log.ground_truth is not None:
        dump(
            "gt.csv",
            _GT_HEADER,
            ([s.timestamp, *s.orientation.as_quaternion(), *s.position, *s.velocity] for s in log.ground_truth),
        )


def load_log(path: str | Path | IO[str], format: str = "jsonl") -> SensorLog:
    """Read a sensor log; ``format`` is ``"jsonl"`` (file) or ``"csv"`` (directory)."""
    if format == "jsonl":
        if hasattr(path, "read"):
            return read_jsonl(path)  # type: ignore[arg-type]
        with open(path) as f:
            return read_jsonl(f)
    if format == "csv":
        return read_csv_dir(Path(path))  # type: ignore[arg-type]
    raise ValueError(f"unknown log format {format!r}")


def save_log(log: SensorLog, path: str | Path | IO[str], format: str = "jsonl") -> None:
    if format == "jsonl":
        if hasattr(path, "write"):
            write_jsonl(log, path)  # type: ignore[arg-type]
            return
        with open(path, "w") as f:
            write_jsonl(log, f)
        return
    if format == "csv":
        write_csv_dir(log, Path(path))  # type: ignore[arg-type]
        return
    raise ValueError(f"unknown log format {format!r}")


def load_beacon_map(path: str | Path) -> BeaconMap:
    """Read a ``id,x,y,z,sigma`` csv."""
    path = Path(path)
    bm = BeaconMap()
    for i, r in enumerate(_read_csv_rows(path, ["id", "x", "y", "z", "sigma"]), start=2):
        x, y, z, s = _floats(r[1:], path, i)
        try:
            bm.add(r[0], (x, y, z), s)
        except ValueError as e:
            raise LogFormatError(f"{path.name} line {i}: {e}") from None
    return bm


def save_beacon_map(bm: BeaconMap, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "x", "y", "z", "sigma"])
        for bid, e in bm.entries.items():
            w.writerow([bid, *(repr(float(c)) for c in e.position), repr(e.prior_sigma)])
