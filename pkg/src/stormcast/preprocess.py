"""Feature stacks, lightning maps, targets and tiling.

A feature stack has ten channels: nine nowcast-error maps (one per
satellite channel) followed by the lightning counts of the preceding
15 minutes.  Targets mark cells with at least one flash in the following
15 minutes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .flow import FlowParams, nowcast_error

STEP = timedelta(minutes=15)
N_ERROR_CHANNELS = 9
N_FEATURES = N_ERROR_CHANNELS + 1
LIGHTNING_CLIP = 10.0
FULL_FRAME = (956, 1114)
DEFAULT_TILE = (144, 160)


@dataclass(frozen=True)
class LightningEvent:
    timestamp: datetime
    row: int
    col: int


class EventTable:
    """Time-sorted lightning events held as parallel arrays."""

    def __init__(self, times: np.ndarray, rows: np.ndarray, cols: np.ndarray):
        times = np.asarray(times, dtype="datetime64[s]")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if not (len(times) == len(rows) == len(cols)):
            raise ValueError("times, rows and cols must have equal length")
        if len(times) > 1 and np.any(np.diff(times.astype(np.int64)) < 0):
            raise ValueError("events must be sorted by timestamp")
        self.times, self.rows, self.cols = times, rows, cols

    @classmethod
    def from_events(cls, events: Iterable[LightningEvent]) -> "EventTable":
        events = sorted(events, key=lambda e: e.timestamp)
        return cls(
            np.array([np.datetime64(e.timestamp.replace(tzinfo=None), "s") for e in events], dtype="datetime64[s]"),
            np.array([e.row for e in events], dtype=np.int64),
            np.array([e.col for e in events], dtype=np.int64),
        )

    @classmethod
    def empty(cls) -> "EventTable":
        return cls(np.array([], dtype="datetime64[s]"), np.array([], dtype=np.int64), np.array([], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        for t, r, c in zip(self.times, self.rows, self.cols):
            yield LightningEvent(t.astype(datetime), int(r), int(c))

    def window(self, start: datetime, end: datetime) -> tuple[np.ndarray, np.ndarray]:
        """Rows and cols of events with start <= t < end."""
        lo = np.searchsorted(self.times, _dt64(start), side="left")
        hi = np.searchsorted(self.times, _dt64(end), side="left")
        return self.rows[lo:hi], self.cols[lo:hi]


def _dt64(t: datetime) -> np.datetime64:
    return np.datetime64(t.replace(tzinfo=None), "s")


def _count_map(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, int]:
    h, w = shape
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    counts = np.bincount(rows[inside] * w + cols[inside], minlength=h * w).reshape(h, w)
    return counts.astype(np.float64), int((~inside).sum())


def accumulate_lightning(events: EventTable, t: datetime, shape: tuple[int, int],
                         window: timedelta = STEP) -> tuple[np.ndarray, int]:
    """Per-cell flash counts in [t - window, t) and the number of rejected events."""
    rows, cols = events.window(t - window, t)
    return _count_map(rows, cols, shape)


def build_target(events: EventTable, t: datetime, shape: tuple[int, int],
                 window: timedelta = STEP) -> tuple[np.ndarray, int]:
    """Binary map of cells with >= 1 flash in [t, t + window)."""
    rows, cols = events.window(t, t + window)
    counts, rejected = _count_map(rows, cols, shape)
    return (counts > 0).astype(np.float64), rejected


@dataclass
class NormStats:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != self.max.shape:
            raise ValueError("min and max must have the same shape")

    @classmethod
    def identity(cls, channels: int = N_FEATURES) -> "NormStats":
        return cls(np.zeros(channels), np.ones(channels))

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["min"], d["max"])


@dataclass
class FeatureStack:
    values: np.ndarray  # [10, H, W] in [0, 1]
    timestamp: datetime | None = None

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != N_FEATURES:
            raise ValueError(f"feature stack must be [{N_FEATURES},H,W], got {self.values.shape}")


def lightning_transform(counts: np.ndarray) -> np.ndarray:
    return np.minimum(counts, LIGHTNING_CLIP) / LIGHTNING_CLIP


def raw_stack(errors: Sequence[np.ndarray], lightning: np.ndarray) -> np.ndarray:
    """Stack nine error maps and the transformed lightning counts, unnormalized."""
    if len(errors) != N_ERROR_CHANNELS:
        raise ValueError(f"expected {N_ERROR_CHANNELS} error rasters, got {len(errors)}")
    layers = [np.asarray(e, dtype=np.float64) for e in errors] + [lightning_transform(np.asarray(lightning, dtype=np.float64))]
    shapes = {a.shape for a in layers}
    if len(shapes) != 1:
        raise ValueError(f"rasters have unequal dims: {sorted(shapes)}")
    return np.stack(layers)


def compute_norm_stats(raw: Iterable[np.ndarray]) -> NormStats:
    """Per-channel min/max over raw stacks ([C,H,W] or [N,C,H,W])."""
    lo = hi = None
    for a in raw:
        a = np.asarray(a)
        axes = tuple(k for k in range(a.ndim) if k != a.ndim - 3)
        amin, amax = a.min(axis=axes), a.max(axis=axes)
        lo = amin if lo is None else np.minimum(lo, amin)
        hi = amax if hi is None else np.maximum(hi, amax)
    if lo is None:
        raise ValueError("no data to compute normalization statistics from")
    return NormStats(lo, hi)


def normalize(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    """Min-max scale channel-wise and clamp to [0, 1]; works on [C,H,W] or [N,C,H,W]."""
    c = raw.shape[-3]
    if stats.min.shape != (c,):
        raise ValueError(f"stats cover {stats.min.shape[0]} channels, data has {c}")
    span = stats.max - stats.min
    const = span <= 0
    if const.any():
        warnings.warn(f"constant channels {np.flatnonzero(const).tolist()} normalized to zero", stacklevel=2)
    shape = (c, 1, 1)
    scaled = (raw - stats.min.reshape(shape)) / np.where(const, 1.0, span).reshape(shape)
    scaled = np.where(const.reshape(shape), 0.0, scaled)
    return np.clip(scaled, 0.0, 1.0)


def assemble_stack(errors: Sequence[np.ndarray], lightning: np.ndarray, stats: NormStats,
                   timestamp: datetime | None = None) -> FeatureStack:
    return FeatureStack(normalize(raw_stack(errors, lightning), stats), timestamp)


def frame_errors(f_m30: np.ndarray, f_m15: np.ndarray, f_0: np.ndarray,
                 params: FlowParams | None = None) -> np.ndarray:
    """Nowcast error for each satellite channel of three consecutive frames."""
    if not (f_m30.shape == f_m15.shape == f_0.shape):
        raise ValueError("frames must have equal dims")
    return np.stack([nowcast_error(a, b, c, params) for a, b, c in zip(f_m30, f_m15, f_0)])


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileIndex:
    timestamp: datetime | None
    tile_row: int
    tile_col: int
    r0: int
    c0: int


def grid_for(frame: int, tile: int) -> tuple[int, int]:
    """Fewest tiles with a uniform integer stride covering ``frame`` exactly.

    Returns (count, stride).  1114 px / 160 px gives (7, 159), 956 / 144
    gives (8, 116).
    """
    if frame < tile:
        raise ValueError(f"frame size {frame} smaller than tile size {tile}")
    if frame == tile:
        return 1, 0
    n = math.ceil((frame - tile) / tile) + 1
    while (frame - tile) % (n - 1):
        n += 1
    return n, (frame - tile) // (n - 1)


@dataclass(frozen=True)
class TileGeometry:
    frame: tuple[int, int]
    tile: tuple[int, int] = DEFAULT_TILE
    origins_r: tuple[int, ...] = field(init=False)
    origins_c: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        (nr, sr), (nc, sc) = grid_for(self.frame[0], self.tile[0]), grid_for(self.frame[1], self.tile[1])
        object.__setattr__(self, "origins_r", tuple(k * sr for k in range(nr)))
        object.__setattr__(self, "origins_c", tuple(k * sc for k in range(nc)))

    @property
    def n_tiles(self) -> int:
        return len(self.origins_r) * len(self.origins_c)

    def index(self, timestamp: datetime | None = None) -> list[TileIndex]:
        return [
            TileIndex(timestamp, i, j, r0, c0)
            for i, r0 in enumerate(self.origins_r)
            for j, c0 in enumerate(self.origins_c)
        ]


def tile_frame(frame: np.ndarray, tile: tuple[int, int] = DEFAULT_TILE,
               timestamp: datetime | None = None) -> tuple[np.ndarray, list[TileIndex]]:
    """Cut a [C,H,W] frame into overlapping [C,th,tw] tiles (row-major grid)."""
    if frame.ndim != 3:
        raise ValueError(f"frame must be [C,H,W], got {frame.shape}")
    geom = TileGeometry(frame.shape[1:], tile)
    index = geom.index(timestamp)
    th, tw = tile
    tiles = np.stack([frame[:, t.r0:t.r0 + th, t.c0:t.c0 + tw] for t in index])
    return tiles, index


def stitch_predictions(tiles: np.ndarray, index: Sequence[TileIndex],
                       frame_shape: tuple[int, int]) -> np.ndarray:
    """Reassemble [N,C,th,tw] tiles into [C,H,W]; overlaps keep the maximum."""
    if len(tiles) != len(index):
        raise ValueError("tiles and index differ in length")
    th, tw = tiles.shape[-2:]
    geom = TileGeometry(tuple(frame_shape), (th, tw))
    have = {(t.r0, t.c0) for t in index}
    for t in geom.index():
        if (t.r0, t.c0) not in have:
            raise ValueError(f"missing tile at row {t.tile_row}, col {t.tile_col}")
    out = np.full((tiles.shape[1],) + tuple(frame_shape), -np.inf)
    for tile, t in zip(tiles, index):
        view = out[:, t.r0:t.r0 + th, t.c0:t.c0 + tw]
        np.maximum(view, tile, out=view)
    return out


def make_batch(frames: Sequence[np.ndarray], targets: Sequence[np.ndarray],
               tile: tuple[int, int] = DEFAULT_TILE) -> tuple[np.ndarray, np.ndarray]:
    """All tiles of several frames as one (x [B,10,th,tw], y [B,1,th,tw]) batch."""
    xs, ys = [], []
    for f, y in zip(frames, targets):
        xs.append(tile_frame(f, tile)[0])
        ys.append(tile_frame(y.reshape((1,) + y.shape[-2:]), tile)[0])
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class Sample:
    timestamp: datetime
    raw: np.ndarray  # [10, H, W], unnormalized
    target: np.ndarray  # [H, W] binary


def build_samples(timestamps: Sequence[datetime], frames: Sequence[np.ndarray], events: EventTable,
                  params: FlowParams | None = None, workers: int = 1) -> list[Sample]:
    """Raw feature stacks and targets for every frame with two on-cadence predecessors.

    Frames whose T-15 or T-30 predecessor is missing (dropped files) yield
    no sample.  ``workers`` > 1 computes frames on a thread pool; results
    keep timestamp order either way.
    """
    by_time = dict(zip(timestamps, frames))
    todo = [t for t in sorted(by_time) if t - STEP in by_time and t - 2 * STEP in by_time]

    def one(t: datetime) -> Sample:
        cur = by_time[t]
        errors = frame_errors(by_time[t - 2 * STEP], by_time[t - STEP], cur, params)
        lightning, _ = accumulate_lightning(events, t, cur.shape[1:])
        target, _ = build_target(events, t, cur.shape[1:])
        return Sample(t, raw_stack(list(errors), lightning), target)

    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, todo))
    return [one(t) for t in todo]
