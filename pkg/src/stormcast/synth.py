"""Synthetic storm sequences standing in for satellite imagery and flash data.

A latent field of Gaussian convective cells advects at a uniform velocity.
Cells are born at a Poisson rate and fade out after a random lifetime.
Nine "satellite channels" are affine transforms of the latent field plus
independent pixel noise.  Flashes are drawn around cells, mostly during the
first steps after initiation, which is exactly where extrapolation fails,
so the nowcast-error channels carry real signal.

Flashes in [t_k, t_k + 15 min) depend only on the cell state at frame k.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .preprocess import STEP, EventTable


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    n_channels: int = 9
    n_frames: int = 130
    start: datetime = datetime(2017, 6, 1, 0, 30)
    initial_cells: int = 4
    amplitude: float = 0.6
    sigma_range: tuple[float, float] = (1.5, 2.5)
    velocity: tuple[float, float] = (1.0, 0.5)  # (col, row) px per step
    initiation_rate: float = 0.3  # new cells per step
    lifetime_range: tuple[int, int] = (8, 16)  # steps
    fade_steps: int = 6
    young_steps: int = 1
    flash_rate: float = 40.0  # flashes per step for a young full-amplitude cell
    old_flash_factor: float = 0.0
    flash_spread: float = 0.9  # px
    noise: float = 0.005
    drop_rate: float = 0.0  # fraction of frames lost (corrupt files)
    seed: int = 0

    def __post_init__(self):
        if min(self.initiation_rate, self.flash_rate, self.old_flash_factor, self.noise, self.drop_rate) < 0:
            raise ValueError("rates must be non-negative")
        if self.fade_steps < 1 or self.young_steps < 1:
            raise ValueError("fade_steps and young_steps must be >= 1")
        if self.height < 2 or self.width < 2 or self.n_frames < 1 or self.n_channels < 1:
            raise ValueError("frame dims must be >= 2 and counts >= 1")


@dataclass
class Cell:
    row: float
    col: float
    amp: float
    sigma: float
    birth: int
    lifetime: int

    def position(self, k: int, velocity: tuple[float, float]) -> tuple[float, float]:
        age = k - self.birth
        return self.row + velocity[1] * age, self.col + velocity[0] * age

    def strength(self, k: int, fade_steps: int) -> float:
        """Amplitude after a linear fade over the last ``fade_steps`` steps of life."""
        left = self.birth + self.lifetime - k
        return self.amp * float(np.clip(left / fade_steps, 0.0, 1.0))


@dataclass
class SynthSequence:
    timestamps: list[datetime]
    frames: list[np.ndarray]  # each [n_channels, H, W] in [0, 1]
    events: EventTable
    latent: list[np.ndarray] = field(default_factory=list)
    cells_born: list[int] = field(default_factory=list)


def channel_transforms(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    gain = rng.uniform(0.6, 1.0, n)
    offset = rng.uniform(0.05, 0.25, n)
    return gain, offset


def gen_sequence(cfg: SynthConfig) -> SynthSequence:
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    gain, offset = channel_transforms(cfg.n_channels, rng)
    rows, cols = np.indices((h, w), dtype=np.float64)

    cells: list[Cell] = []
    for _ in range(cfg.initial_cells):
        # pre-existing cells are mature: born long before the first frame
        age = int(rng.integers(cfg.young_steps + 3, cfg.young_steps + 8))
        life = age + int(rng.integers(*cfg.lifetime_range))
        cells.append(Cell(rng.uniform(0, h), rng.uniform(0, w), cfg.amplitude * rng.uniform(0.7, 1.0),
                          rng.uniform(*cfg.sigma_range), -age, life))

    timestamps, frames, latents, born = [], [], [], []
    ev_t: list[np.ndarray] = []
    ev_r: list[np.ndarray] = []
    ev_c: list[np.ndarray] = []
    step_s = int(STEP.total_seconds())
    for k in range(cfg.n_frames):
        n_new = int(rng.poisson(cfg.initiation_rate)) if k > 0 else 0
        for _ in range(n_new):
            cells.append(Cell(rng.uniform(2, h - 2), rng.uniform(2, w - 2), cfg.amplitude * rng.uniform(0.7, 1.0),
                              rng.uniform(*cfg.sigma_range), k, int(rng.integers(*cfg.lifetime_range))))
        born.append(n_new)
        cells = [c for c in cells if c.strength(k, cfg.fade_steps) > 0]

        latent = np.zeros((h, w))
        t_k = cfg.start + k * STEP
        for c in cells:
            r0, c0 = c.position(k, cfg.velocity)
            s = c.strength(k, cfg.fade_steps)
            latent += s * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * c.sigma ** 2))

            age = k - c.birth
            youth = 1.0 if age < cfg.young_steps else cfg.old_flash_factor
            n_ev = int(rng.poisson(cfg.flash_rate * youth * s / cfg.amplitude))
            if n_ev:
                er = np.rint(r0 + cfg.flash_spread * rng.standard_normal(n_ev)).astype(np.int64)
                ec = np.rint(c0 + cfg.flash_spread * rng.standard_normal(n_ev)).astype(np.int64)
                et = rng.integers(0, step_s, n_ev)
                keep = (er >= 0) & (er < h) & (ec >= 0) & (ec < w)
                ev_r.append(er[keep])
                ev_c.append(ec[keep])
                ev_t.append(np.datetime64(t_k, "s") + et[keep].astype("timedelta64[s]"))

        noise = cfg.noise * rng.standard_normal((cfg.n_channels, h, w))
        frame = np.clip(gain[:, None, None] * latent[None] + offset[:, None, None] + noise, 0.0, 1.0)
        if cfg.drop_rate and rng.random() < cfg.drop_rate:
            continue
        timestamps.append(t_k)
        frames.append(frame)
        latents.append(latent)

    if ev_t:
        t = np.concatenate(ev_t)
        r = np.concatenate(ev_r)
        c = np.concatenate(ev_c)
        order = np.lexsort((c, r, t))
        events = EventTable(t[order], r[order], c[order])
    else:
        events = EventTable.empty()
    return SynthSequence(timestamps, frames, events, latents, born)


def frame_filename(t: datetime) -> str:
    from .data_io import stamp_filename

    return stamp_filename(t)


def write_sequence(seq: SynthSequence, out_dir: str | Path) -> Path:
    """Write ``frames/<stamp>.scr`` and ``events.csv`` under ``out_dir``."""
    from .data_io import write_events, write_raster

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for t, f in zip(seq.timestamps, seq.frames):
        write_raster(out / "frames" / frame_filename(t), f)
    write_events(out / "events.csv", seq.events)
    return out


def positive_fraction(seq: SynthSequence) -> float:
    """Fraction of (frame, pixel) cells with a flash in the next 15 minutes."""
    from .preprocess import build_target

    h, w = seq.frames[0].shape[1:]
    pos = sum(build_target(seq.events, t, (h, w))[0].sum() for t in seq.timestamps)
    return float(pos / (len(seq.timestamps) * h * w))
