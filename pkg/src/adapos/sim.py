"""Synthetic multipath environment producing normalized CIR datasets.

The propagation model is geometric: a line-of-sight path plus one
single-bounce path per point scatterer.  Each path contributes a band-limited
sinc pulse at its delay, with amplitude ``1 / path_length`` and a carrier
phase ``2*pi*carrier_hz*delay``.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AntennaIdError, ConfigurationError, DegenerateSampleError, FormatError

SPEED_OF_LIGHT = 299_792_458.0
N_TAPS = 80
N_CHANNELS = 3
FORMAT_VERSION = 1
# Distances below this are clamped when computing path gain.
MIN_PATH_LENGTH = 1e-3


@dataclass(frozen=True)
class Environment:
    area: tuple  # (x_min, y_min, x_max, y_max) in meters
    antennas: np.ndarray  # [a_max, 2]
    scatterers: np.ndarray  # [n_scatterers, 2]
    bandwidth_hz: float = 100e6
    noise_std: float = 0.01
    seed: int = 0
    carrier_hz: float = 100e6
    margin: float = 5.0  # world box = area grown by this margin

    def __post_init__(self):
        antennas = np.asarray(self.antennas, dtype=np.float64).reshape(-1, 2)
        scatterers = np.asarray(self.scatterers, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "antennas", antennas)
        object.__setattr__(self, "scatterers", scatterers)
        x0, y0, x1, y1 = self.area
        if not (x1 > x0 and y1 > y0):
            raise ConfigurationError(f"area {self.area} is empty")
        if len(antennas) < 2:
            raise ConfigurationError("an environment needs at least 2 antennas")
        if self.bandwidth_hz <= 0:
            raise ConfigurationError("bandwidth must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")
        lo = np.array([x0, y0]) - self.margin
        hi = np.array([x1, y1]) + self.margin
        for name, pts in (("antenna", antennas), ("scatterer", scatterers)):
            if len(pts) and (np.any(pts < lo) or np.any(pts > hi)):
                raise ConfigurationError(f"{name} outside the world box {tuple(lo)}..{tuple(hi)}")

    @property
    def a_max(self) -> int:
        return len(self.antennas)

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.area
        return math.hypot(x1 - x0, y1 - y0)


def perimeter_antennas(area, count: int) -> np.ndarray:
    """``count`` antennas evenly spaced along the rectangle boundary."""
    x0, y0, x1, y1 = area
    w, h = x1 - x0, y1 - y0
    perimeter = 2 * (w + h)
    out = []
    for i in range(count):
        s = (i + 0.5) * perimeter / count
        if s < w:
            out.append((x0 + s, y0))
        elif s < w + h:
            out.append((x1, y0 + s - w))
        elif s < 2 * w + h:
            out.append((x1 - (s - w - h), y1))
        else:
            out.append((x0, y1 - (s - 2 * w - h)))
    return np.array(out)


def array_antennas(area, n_arrays: int = 4, per_array: int = 8, spacing: float = 0.5) -> np.ndarray:
    """Uniform linear arrays centred on the side midpoints, laid along each side."""
    x0, y0, x1, y1 = area
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    sides = [((cx, y0), (1, 0)), ((x1, cy), (0, 1)), ((cx, y1), (-1, 0)), ((x0, cy), (0, -1))]
    offsets = (np.arange(per_array) - (per_array - 1) / 2) * spacing
    out = []
    for a in range(n_arrays):
        (px, py), (dx, dy) = sides[a % 4]
        out.extend((px + o * dx, py + o * dy) for o in offsets)
    return np.array(out)


def default_environment(seed: int = 0, layout: str = "perimeter", n_antennas: int = 6,
                        width: float = 20.0, height: float = 20.0, n_scatterers: int = 24,
                        bandwidth_hz: float = 100e6, noise_std: float = 0.01,
                        carrier_hz: float = 100e6, margin: float = 5.0) -> Environment:
    area = (0.0, 0.0, float(width), float(height))
    if layout == "perimeter":
        antennas = perimeter_antennas(area, n_antennas)
    elif layout == "arrays":
        if n_antennas % 8:
            raise ConfigurationError("array layout needs a multiple of 8 antennas")
        antennas = array_antennas(area, n_antennas // 8, 8)
    else:
        raise ConfigurationError(f"unknown antenna layout {layout!r}")
    rng = np.random.default_rng([seed, 0x5CA7])
    lo = np.array([-margin, -margin])
    hi = np.array([width + margin, height + margin])
    scatterers = rng.uniform(lo, hi, size=(n_scatterers, 2))
    return Environment(area, antennas, scatterers, bandwidth_hz, noise_std, seed, carrier_hz, margin)


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray  # [M] seconds
    positions: np.ndarray  # [M, 2] meters
    rate: float
    max_speed: float

    def __len__(self) -> int:
        return len(self.timestamps)


def generate_trajectory(env: Environment, duration: float, rate: float, max_speed: float,
                        seed: int, turn_rate: float = math.pi / 2) -> Trajectory:
    """Random-waypoint walk at constant speed with rate-limited heading changes.

    Positions are projected back into the area after every step; projection
    onto a convex set never lengthens a step, so the speed bound holds.
    """
    n = int(math.floor(duration * rate + 1e-9))
    if n < 2:
        raise ConfigurationError(f"duration*rate = {duration * rate} gives fewer than 2 samples")
    if max_speed < 0 or rate <= 0:
        raise ConfigurationError("max_speed must be >= 0 and rate > 0")
    x0, y0, x1, y1 = env.area
    lo, hi = np.array([x0, y0]), np.array([x1, y1])
    dt = 1.0 / rate
    step = max_speed * dt
    if step > min(x1 - x0, y1 - y0):
        raise ConfigurationError(f"area too small for a {step:.3g} m step per sample")
    rng = np.random.default_rng([seed, 0x7A])
    pos = rng.uniform(lo, hi)
    waypoint = rng.uniform(lo, hi)
    heading = rng.uniform(-math.pi, math.pi)
    positions = np.empty((n, 2))
    for i in range(n):
        positions[i] = pos
        if np.linalg.norm(waypoint - pos) < max(2 * step, 0.5):
            waypoint = rng.uniform(lo, hi)
        target = math.atan2(waypoint[1] - pos[1], waypoint[0] - pos[0])
        turn = (target - heading + math.pi) % (2 * math.pi) - math.pi
        limit = turn_rate * dt
        heading += float(np.clip(turn, -limit, limit)) + rng.normal(0.0, 0.1 * limit)
        pos = np.clip(pos + step * np.array([math.cos(heading), math.sin(heading)]), lo, hi)
    timestamps = np.arange(n) / rate
    return Trajectory(timestamps, positions, rate, max_speed)


def _path_geometry(env: Environment, positions: np.ndarray, antenna: np.ndarray) -> np.ndarray:
    """Path lengths ``[M, 1 + n_scatterers]`` from each position to one antenna."""
    los = np.linalg.norm(positions - antenna, axis=-1)[:, None]
    if len(env.scatterers) == 0:
        return los
    to_scat = np.linalg.norm(positions[:, None, :] - env.scatterers[None], axis=-1)
    from_scat = np.linalg.norm(env.scatterers - antenna, axis=-1)
    return np.concatenate([los, to_scat + from_scat[None]], axis=1)


def synthesize_taps(env: Environment, positions: np.ndarray, antenna_id: int,
                    rng: np.random.Generator | None = None, n_taps: int = N_TAPS) -> np.ndarray:
    """Complex CIRs ``[M, n_taps]`` at ``positions`` as seen by one antenna."""
    if not 0 <= antenna_id < env.a_max:
        raise AntennaIdError(f"antenna id {antenna_id} outside [0, {env.a_max})")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    lengths = _path_geometry(env, positions, env.antennas[antenna_id])
    delays = lengths / SPEED_OF_LIGHT
    gains = np.exp(-2j * np.pi * env.carrier_hz * delays) / np.maximum(lengths, MIN_PATH_LENGTH)
    k = np.arange(n_taps)
    pulses = np.sinc(k[None, None, :] - (delays * env.bandwidth_hz)[:, :, None])
    taps = np.einsum("mp,mpk->mk", gains, pulses)
    if env.noise_std > 0:
        if rng is None:
            rng = np.random.default_rng([env.seed, antenna_id, 0xC1])
        noise = rng.normal(0.0, env.noise_std, size=(len(positions), n_taps, 2))
        taps = taps + noise[..., 0] + 1j * noise[..., 1]
    return taps


def synthesize_cir(env: Environment, position, antenna_id: int,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Complex taps ``[80]`` for one position and antenna."""
    return synthesize_taps(env, np.asarray(position, dtype=np.float64)[None], antenna_id, rng)[0]


def normalize_cir(raw: np.ndarray) -> np.ndarray:
    """Map complex taps (``[..., L]``) to ``[..., 3, L]`` real channels in [0, 1].

    All channels are divided by the per-sample peak magnitude; Re and Im are
    then shifted from [-1, 1] to [0, 1].
    """
    raw = np.asarray(raw, dtype=np.complex128)
    mag = np.abs(raw)
    peak = mag.max(axis=-1, keepdims=True)
    if np.any(peak == 0):
        raise DegenerateSampleError("cannot normalize an all-zero CIR")
    re, im, ab = raw.real / peak, raw.imag / peak, mag / peak
    out = np.stack([(re + 1) / 2, (im + 1) / 2, ab], axis=-2)
    return np.clip(out, 0.0, 1.0)


def complex_taps(taps: np.ndarray) -> np.ndarray:
    """Undo the Re/Im affine map: ``[..., 3, L]`` -> complex ``[..., L]`` (peak-scaled)."""
    taps = np.asarray(taps, dtype=np.float64)
    return (2 * taps[..., 0, :] - 1) + 1j * (2 * taps[..., 1, :] - 1)


@dataclass(frozen=True)
class CirSample:
    taps: np.ndarray  # [3, 80]
    antenna_id: int
    timestamp: float
    true_position: tuple


@dataclass
class CirDataset:
    """CIRs grouped by trajectory sample: every sample holds one CIR per antenna.

    ``taps`` is ``[M, a_max, 3, n_taps]``; row ``m`` shares ``timestamps[m]``
    and ``positions[m]``.
    """

    taps: np.ndarray
    timestamps: np.ndarray
    positions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.ascontiguousarray(self.taps, dtype=np.float64)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.taps.ndim != 4 or self.taps.shape[2] != N_CHANNELS:
            raise FormatError(f"taps must be [M, a_max, 3, L], got {self.taps.shape}")
        m = len(self.taps)
        if self.timestamps.shape != (m,) or self.positions.shape != (m, 2):
            raise FormatError("timestamps/positions do not match the tap array")

    def __len__(self) -> int:
        return len(self.taps)

    @property
    def a_max(self) -> int:
        return self.taps.shape[1]

    @property
    def n_taps(self) -> int:
        return self.taps.shape[3]

    def samples(self) -> list[CirSample]:
        """Flat per-antenna view ordered by (timestamp, antenna_id)."""
        return [CirSample(self.taps[m, a], a, float(self.timestamps[m]), tuple(self.positions[m]))
                for m in range(len(self)) for a in range(self.a_max)]

    @classmethod
    def from_samples(cls, samples: Sequence[CirSample], a_max: int | None = None) -> "CirDataset":
        if not samples:
            raise FormatError("no samples")
        a_max = a_max or (max(s.antenna_id for s in samples) + 1)
        if len(samples) % a_max:
            raise FormatError(f"{len(samples)} samples do not split into groups of {a_max}")
        ordered = sorted(samples, key=lambda s: (s.timestamp, s.antenna_id))
        m = len(ordered) // a_max
        taps = np.empty((m, a_max) + np.shape(ordered[0].taps))
        ts, pos = np.empty(m), np.empty((m, 2))
        for i in range(m):
            group = ordered[i * a_max:(i + 1) * a_max]
            if [s.antenna_id for s in group] != list(range(a_max)):
                raise FormatError(f"sample group {i} does not hold antennas 0..{a_max - 1}")
            for s in group:
                taps[i, s.antenna_id] = s.taps
            ts[i], pos[i] = group[0].timestamp, group[0].true_position
        return cls(taps, ts, pos)

    def subset_rows(self, rows) -> "CirDataset":
        rows = np.asarray(rows)
        return CirDataset(self.taps[rows], self.timestamps[rows], self.positions[rows], dict(self.meta))


def generate_dataset(env: Environment, trajectory: Trajectory, seed: int | None = None) -> CirDataset:
    """One normalized CIR per (trajectory sample, antenna)."""
    seed = env.seed if seed is None else seed
    m = len(trajectory)
    taps = np.empty((m, env.a_max, N_CHANNELS, N_TAPS))
    for a in range(env.a_max):
        rng = np.random.default_rng([seed, a, 0xD5])
        raw = synthesize_taps(env, trajectory.positions, a, rng)
        taps[:, a] = normalize_cir(raw)
    return CirDataset(taps, trajectory.timestamps.copy(), trajectory.positions.copy())


# -- file formats --------------------------------------------------------------

_HEADER_PREFIX = b"ADAPOS-CIR"


def _record_dtype(n_values: int) -> np.dtype:
    return np.dtype([("length", "<u4"), ("antenna_id", "<i4"), ("timestamp", "<f8"),
                     ("x", "<f8"), ("y", "<f8"), ("taps", "<f8", (n_values,))])


def write_dataset(path, dataset: CirDataset) -> None:
    """Header line, then one length-prefixed little-endian record per CIR."""
    m, a_max, n_ch, n_taps = dataset.taps.shape
    header = f"ADAPOS-CIR version={FORMAT_VERSION} a_max={a_max} taps={n_taps} channels={n_ch}\n"
    dt = _record_dtype(n_ch * n_taps)
    rec = np.zeros(m * a_max, dtype=dt)
    rec["length"] = dt.itemsize - 4
    rec["antenna_id"] = np.tile(np.arange(a_max), m)
    rec["timestamp"] = np.repeat(dataset.timestamps, a_max)
    rec["x"] = np.repeat(dataset.positions[:, 0], a_max)
    rec["y"] = np.repeat(dataset.positions[:, 1], a_max)
    rec["taps"] = dataset.taps.reshape(m * a_max, n_ch * n_taps)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def _parse_header(line: bytes) -> dict:
    if not line.startswith(_HEADER_PREFIX) or not line.endswith(b"\n"):
        raise FormatError("missing dataset header line")
    fields = dict(tok.split("=", 1) for tok in line.decode("ascii").split()[1:])
    try:
        out = {k: int(fields[k]) for k in ("version", "a_max", "taps", "channels")}
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad dataset header {line!r}") from exc
    if out["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {out['version']}")
    return out


def read_dataset(path) -> CirDataset:
    blob = Path(path).read_bytes()
    end = blob.find(b"\n")
    if end < 0:
        raise FormatError(f"{path}: no header line")
    hdr = _parse_header(blob[:end + 1])
    a_max, n_taps, n_ch = hdr["a_max"], hdr["taps"], hdr["channels"]
    dt = _record_dtype(n_ch * n_taps)
    body = blob[end + 1:]
    if len(body) % dt.itemsize:
        raise FormatError(f"{path}: truncated record stream")
    rec = np.frombuffer(body, dtype=dt)
    if np.any(rec["length"] != dt.itemsize - 4):
        raise FormatError(f"{path}: record length prefix mismatch")
    if len(rec) % a_max or np.any(rec["antenna_id"] != np.tile(np.arange(a_max), len(rec) // a_max)):
        raise FormatError(f"{path}: records are not grouped by antenna")
    m = len(rec) // a_max
    taps = rec["taps"].reshape(m, a_max, n_ch, n_taps)
    ts = rec["timestamp"][::a_max]
    pos = np.stack([rec["x"][::a_max], rec["y"][::a_max]], axis=1)
    return CirDataset(taps.copy(), ts.copy(), pos.copy())


def write_dataset_csv(path, dataset: CirDataset) -> None:
    """Lossless CSV mirror (shortest round-trip float repr)."""
    n_values = dataset.taps.shape[2] * dataset.taps.shape[3]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["antenna_id", "timestamp", "true_x", "true_y"] + [f"tap_{i}" for i in range(n_values)])
        for m in range(len(dataset)):
            t = repr(float(dataset.timestamps[m]))
            x, y = (repr(float(v)) for v in dataset.positions[m])
            for a in range(dataset.a_max):
                writer.writerow([a, t, x, y] + [repr(v) for v in dataset.taps[m, a].reshape(-1).tolist()])


def read_dataset_csv(path, n_channels: int = N_CHANNELS) -> CirDataset:
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_values = len(header) - 4
        for row in reader:
            taps = np.array([float(v) for v in row[4:]]).reshape(n_channels, n_values // n_channels)
            samples.append(CirSample(taps, int(row[0]), float(row[1]), (float(row[2]), float(row[3]))))
    return CirDataset.from_samples(samples)
