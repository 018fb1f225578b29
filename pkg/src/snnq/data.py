"""Event streams: file I/O, frame integration, synthetic datasets, splitting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
MAGIC = b"AERS"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHQ")


class EventFileError(ValueError):
    """Malformed event file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(EventFileError):
    pass


class UnsupportedVersionError(EventFileError):
    pass


class TruncatedFileError(EventFileError):
    pass


class CoordinateRangeError(EventFileError):
    pass


class TimestampOrderError(EventFileError):
    pass


class EmptyStreamError(EventFileError):
    pass


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, EVENT_DTYPE))
    label: int = 0

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        ev = self.events
        if len(ev) and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if len(ev) and (ev["x"].max() >= self.width or ev["y"].max() >= self.height):
            raise ValueError("event coordinates out of sensor range")
        if len(ev) and ev["p"].max() > 1:
            raise ValueError("polarity must be 0 or 1")

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def from_arrays(cls, width, height, t, x, y, p, label=0) -> "EventStream":
        ev = np.zeros(len(t), EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        return cls(width, height, ev, label)


@dataclass
class FrameTensor:
    """Event counts ``[T, 2, H, W]`` plus the sample label."""

    frames: np.ndarray
    label: int = 0


def slice_bounds(n_events: int, t_slices: int) -> np.ndarray:
    """Event-index boundaries for equal-count slices; the remainder goes to the last slice."""
    per = n_events // t_slices
    bounds = np.arange(t_slices + 1) * per
    bounds[-1] = n_events
    return bounds


def events_to_frames(stream: EventStream, t_slices: int = 10, by: str = "count") -> FrameTensor:
    """Integrate a stream into ``t_slices`` frames.

    ``by="count"`` gives each slice the same number of events (remainder in
    the last); ``by="duration"`` splits the time span into equal windows.
    """
    if t_slices < 1:
        raise ValueError("t_slices must be >= 1")
    n = len(stream)
    if n == 0:
        raise EmptyStreamError("cannot integrate an empty event stream")
    ev = stream.events
    if by == "count":
        slice_of = np.searchsorted(slice_bounds(n, t_slices), np.arange(n), side="right") - 1
    elif by == "duration":
        t = ev["t"].astype(np.float64)
        span = t[-1] - t[0]
        if span == 0:
            slice_of = np.zeros(n, dtype=np.int64)
        else:
            slice_of = np.minimum(((t - t[0]) * t_slices / span).astype(np.int64), t_slices - 1)
    else:
        raise ValueError(f"unknown slicing policy {by!r}")
    frames = np.zeros((t_slices, 2, stream.height, stream.width), dtype=np.float32)
    np.add.at(frames, (slice_of, ev["p"], ev["y"], ev["x"]), 1.0)
    return FrameTensor(frames, stream.label)


def encode_event_file(stream: EventStream) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, stream.width, stream.height, stream.label, len(stream))
    return header + stream.events.astype(EVENT_DTYPE).tobytes()


def decode_event_file(buf: bytes) -> EventStream:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header", len(buf))
    _, version, width, height, label, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    if count == 0:
        raise EmptyStreamError("empty event stream", _HEADER.size)
    payload = len(buf) - _HEADER.size
    rec = EVENT_DTYPE.itemsize
    if payload < count * rec:
        k = payload // rec
        raise TruncatedFileError(f"truncated at record {k} of {count}", _HEADER.size + k * rec)
    if payload > count * rec:
        raise EventFileError("trailing bytes after last record", _HEADER.size + count * rec)
    ev = np.frombuffer(buf, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size).copy()
    bad = np.flatnonzero((ev["x"] >= width) | (ev["y"] >= height) | (ev["p"] > 1))
    if bad.size:
        k = int(bad[0])
        raise CoordinateRangeError(f"record {k} out of range", _HEADER.size + k * rec)
    back = np.flatnonzero(np.diff(ev["t"].astype(np.int64)) < 0)
    if back.size:
        k = int(back[0]) + 1
        raise TimestampOrderError(f"timestamp decreases at record {k}", _HEADER.size + k * rec)
    return EventStream(width, height, ev, label)


def read_event_file(path) -> EventStream:
    return decode_event_file(Path(path).read_bytes())


def write_event_file(stream: EventStream, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_event_file(stream))
    tmp.replace(path)


# ---------------------------------------------------------------------------
# synthetic data


def bar_maps(n_classes: int, height: int = 16, width: int = 16, n_phases: int = 4,
             thickness: float = 1.5, travel: float = 3.0) -> np.ndarray:
    """Oriented bars drifting across the sensor centre, one orientation per class.

    Returns rate maps ``[n_classes, n_phases, 2, H, W]``. Within each phase the
    leading side of the bar emits ON events (polarity 1), the trailing side OFF.
    Per-sample translation (``SyntheticSpec.jitter``) is applied when sampling.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy -= (height - 1) / 2
    xx -= (width - 1) / 2
    maps = np.zeros((n_classes, n_phases, 2, height, width))
    for c in range(n_classes):
        theta = np.pi * c / n_classes
        normal = xx * np.cos(theta) + yy * np.sin(theta)
        for k in range(n_phases):
            centre = -travel + 2 * travel * (k + 0.5) / n_phases
            d = normal - centre
            on_bar = np.abs(d) <= thickness
            maps[c, k, 1] = on_bar & (d >= 0)
            maps[c, k, 0] = on_bar & (d < 0)
    return maps


@dataclass
class SyntheticSpec:
    n_classes: int = 3
    samples_per_class: int = 200
    height: int = 16
    width: int = 16
    events_per_sample: int = 1500
    noise_rate: float = 0.1
    duration_us: int = 100_000
    jitter: int = 1
    rate_maps: np.ndarray | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if not 0 <= self.noise_rate <= 1:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.rate_maps is None:
            self.rate_maps = bar_maps(self.n_classes, self.height, self.width)
        maps = np.asarray(self.rate_maps, dtype=np.float64)
        if maps.ndim == 3:  # static per-class map, one polarity-agnostic phase
            maps = np.repeat(maps[:, None, None] / 2, 2, axis=2)
        if maps.shape[0] != self.n_classes or maps.shape[-2:] != (self.height, self.width):
            raise ValueError(f"rate maps shape {maps.shape} inconsistent with spec")
        if np.any(maps < 0):
            raise ValueError("rate maps must be non-negative")
        flat = maps.reshape(self.n_classes, -1)
        for i in range(self.n_classes):
            for j in range(i):
                if np.array_equal(flat[i], flat[j]):
                    raise ValueError(f"classes {j} and {i} share the same rate map")
        self.rate_maps = maps


def _sample_stream(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> EventStream:
    n = spec.events_per_sample
    maps = spec.rate_maps[label]
    if spec.jitter:
        dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        maps = np.roll(maps, (int(dy), int(dx)), axis=(-2, -1))
    n_phases = maps.shape[0]
    t = np.sort(rng.integers(0, spec.duration_us, size=n))
    phase = np.minimum(t * n_phases // spec.duration_us, n_phases - 1)
    is_noise = rng.random(n) < spec.noise_rate
    p = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    x = np.empty(n, dtype=np.int64)
    hw = spec.height * spec.width
    for k in range(n_phases):
        sel = np.flatnonzero((phase == k) & ~is_noise)
        if not sel.size:
            continue
        prob = maps[k].ravel()
        prob = prob / prob.sum()
        cell = rng.choice(prob.size, size=sel.size, p=prob)
        p[sel], rem = np.divmod(cell, hw)
        y[sel], x[sel] = np.divmod(rem, spec.width)
    sel = np.flatnonzero(is_noise)
    p[sel] = rng.integers(0, 2, sel.size)
    y[sel] = rng.integers(0, spec.height, sel.size)
    x[sel] = rng.integers(0, spec.width, sel.size)
    return EventStream.from_arrays(spec.width, spec.height, t, x, y, p, label)


def gen_synthetic(spec: SyntheticSpec | None = None, seed: int = 0) -> list[tuple[EventStream, int]]:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(spec.samples_per_class):
        for c in range(spec.n_classes):
            out.append((_sample_stream(spec, c, rng), c))
    return out


def split(dataset, test_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle then partition into (train, test); test size rounds half up."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_test = min(max(math.floor(n * test_fraction + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test = [dataset[i] for i in order[:n_test]]
    train = [dataset[i] for i in order[n_test:]]
    return train, test


def to_arrays(samples, t_slices: int = 10, by: str = "count"):
    """Stack ``(EventStream, label)`` pairs into ``(X[B, T, 2, H, W], y[B])``."""
    frames = [events_to_frames(s, t_slices, by).frames for s, _ in samples]
    labels = np.array([lab for _, lab in samples], dtype=np.int64)
    return np.stack(frames), labels
