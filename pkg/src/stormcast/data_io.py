"""File formats: raster stacks, lightning event CSV, checkpoints, config files.

Raster stack (``.scr``)::

    b"SCR1" | u32 C | u32 H | u32 W | C*H*W float32      (all little-endian)

Checkpoint (``.sckp``)::

    b"SCKP" | u32 version | u32 header_len | header (utf-8 JSON)
    | u32 n_blobs | n_blobs * blob
    blob = u32 name_len | name | u32 ndim | ndim * u32 dim | u64 count | count float64
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .preprocess import EventTable, NormStats

RASTER_MAGIC = b"SCR1"
CHECKPOINT_MAGIC = b"SCKP"
CHECKPOINT_VERSION = 1
EVENT_HEADER = ["timestamp", "row", "col"]


class DataError(Exception):
    """Base for malformed inputs; ``code`` is a stable machine-readable tag."""

    code = "data-error"


class UnrecognizedFormat(DataError):
    code = "bad-magic"


class TruncatedPayload(DataError):
    code = "truncated"


class NonFiniteValues(DataError):
    code = "non-finite"


class EventFileError(DataError):
    code = "bad-events"


class CheckpointError(DataError):
    code = "checkpoint"


class CorruptCheckpoint(CheckpointError):
    code = "corrupt-checkpoint"


class VersionMismatch(CheckpointError):
    code = "version-mismatch"


class MissingBlob(CheckpointError):
    code = "missing-blob"


class BlobShapeMismatch(CheckpointError):
    code = "shape-mismatch"


# ---------------------------------------------------------------------------
# rasters


def encode_raster(stack: np.ndarray) -> bytes:
    a = np.asarray(stack)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"raster stack must be [C,H,W] or [H,W], got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteValues("refusing to write non-finite values")
    c, h, w = a.shape
    return RASTER_MAGIC + struct.pack("<3I", c, h, w) + a.astype("<f4").tobytes()


def decode_raster(buf: bytes) -> np.ndarray:
    if buf[:4] != RASTER_MAGIC:
        raise UnrecognizedFormat("unrecognized format: missing SCR1 header")
    if len(buf) < 16:
        raise TruncatedPayload(f"header truncated at {len(buf)} bytes")
    c, h, w = struct.unpack("<3I", buf[4:16])
    need = 16 + 4 * c * h * w
    if len(buf) != need:
        raise TruncatedPayload(f"payload has {len(buf) - 16} bytes, header implies {need - 16}")
    a = np.frombuffer(buf, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValues("raster contains non-finite values")
    return a


def write_raster(path: str | Path, stack: np.ndarray) -> None:
    Path(path).write_bytes(encode_raster(stack))


def read_raster(path: str | Path) -> np.ndarray:
    """Read a [C,H,W] float64 stack."""
    return decode_raster(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# directories of rasters named by timestamp

STAMP_FORMAT = "%Y%m%dT%H%M"


def stamp_filename(t: datetime) -> str:
    return t.strftime(STAMP_FORMAT) + ".scr"


def stamp_of(path: str | Path) -> datetime:
    try:
        return datetime.strptime(Path(path).stem, STAMP_FORMAT)
    except ValueError:
        raise DataError(f"{path}: file name is not a {STAMP_FORMAT} timestamp") from None


def read_stamped(directory: str | Path) -> tuple[list[datetime], list[np.ndarray]]:
    """All ``*.scr`` rasters in a directory, sorted by their timestamped names."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    paths = sorted(d.glob("*.scr"), key=stamp_of)
    if not paths:
        raise DataError(f"{d}: no .scr rasters found")
    return [stamp_of(p) for p in paths], [read_raster(p) for p in paths]


def write_samples(out_dir: str | Path, samples) -> None:
    """Preprocessed layout: ``features/<stamp>.scr`` (10 raw channels), ``targets/<stamp>.scr``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "targets").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_raster(out / "features" / stamp_filename(s.timestamp), s.raw)
        write_raster(out / "targets" / stamp_filename(s.timestamp), s.target[None])


def read_samples(data_dir: str | Path) -> tuple[list[datetime], np.ndarray, np.ndarray]:
    """Inverse of :func:`write_samples`: (timestamps, raw [N,10,H,W], targets [N,H,W])."""
    d = Path(data_dir)
    ts, feats = read_stamped(d / "features")
    ts_t, targets = read_stamped(d / "targets")
    if ts != ts_t:
        raise DataError(f"{d}: features and targets cover different timestamps")
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise DataError(f"{d}: feature rasters differ in shape: {sorted(shapes)}")
    return ts, np.stack(feats), np.stack([t[0] for t in targets])


# ---------------------------------------------------------------------------
# events


def format_time(t: datetime) -> str:
    return t.replace(tzinfo=None).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_time(s: str) -> datetime:
    t = datetime.fromisoformat(s.strip().replace("Z", "+00:00"))
    if t.tzinfo is not None:
        t = t.astimezone(timezone.utc).replace(tzinfo=None)
    return t


def write_events(path: str | Path, events: EventTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in events:
            w.writerow([format_time(e.timestamp), e.row, e.col])


def read_events(path: str | Path, shape: tuple[int, int] | None = None) -> EventTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != EVENT_HEADER:
        raise EventFileError(f"{path}: expected header {','.join(EVENT_HEADER)}")
    times, rr, cc = [], [], []
    for k, rec in enumerate(rows[1:], start=2):
        if not rec:
            continue
        try:
            times.append(np.datetime64(parse_time(rec[0]), "s"))
            rr.append(int(rec[1]))
            cc.append(int(rec[2]))
        except (ValueError, IndexError) as exc:
            raise EventFileError(f"{path}:{k}: {exc}") from None
    t = np.array(times, dtype="datetime64[s]")
    if len(t) > 1 and np.any(np.diff(t.astype(np.int64)) < 0):
        raise EventFileError(f"{path}: events not sorted by timestamp")
    r, c = np.array(rr, dtype=np.int64), np.array(cc, dtype=np.int64)
    if shape is not None and len(r):
        bad = (r < 0) | (r >= shape[0]) | (c < 0) | (c >= shape[1])
        if bad.any():
            raise EventFileError(f"{path}: {int(bad.sum())} events outside frame {shape}")
    return EventTable(t, r, c)


# ---------------------------------------------------------------------------
# config files


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def _coerce(value: str, default: Any) -> Any:
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        return tuple(type(d)(p) for d, p in zip(default, parts)) if default else tuple(parts)
    if isinstance(default, datetime):
        return parse_time(value)
    return value


def apply_config(obj, mapping: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string overrides coerced to field types."""
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(mapping) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return dataclasses.replace(obj, **{k: _coerce(v, getattr(obj, k)) for k, v in mapping.items()})


# ---------------------------------------------------------------------------
# checkpoints


def _model_blobs(model) -> list[tuple[str, np.ndarray]]:
    blobs = [(name, t.data) for name, t in model.named_parameters()]
    for name, st in model.batchnorm_states():
        blobs.append((f"{name}.running_mean", st.running_mean))
        blobs.append((f"{name}.running_var", st.running_var))
        blobs.append((f"{name}.num_batches_tracked", np.asarray(float(st.num_batches_tracked))))
    return blobs


def save_checkpoint(path: str | Path, model, norm_stats: NormStats | None = None,
                    train_config: dict | None = None) -> None:
    cfg = model.config
    bn = next(model.batchnorm_states())[1]
    header = {
        "variant": cfg.variant,
        "base_width": cfg.base_width,
        "in_channels": cfg.in_channels,
        "seed": cfg.seed,
        "bn_eps": bn.eps,
        "bn_momentum": bn.momentum,
        "norm_stats": norm_stats.to_dict() if norm_stats is not None else None,
        "train_config": train_config or {},
    }
    hb = json.dumps(header, sort_keys=True, default=str).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC + struct.pack("<2I", CHECKPOINT_VERSION, len(hb)) + hb)
    blobs = _model_blobs(model)
    out.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)) + nb)
        out.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(struct.pack("<Q", arr.size) + np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint("corrupt checkpoint: unexpected end of file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str | Path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    """Parse a checkpoint into (header, [(blob name, array), ...])."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise UnrecognizedFormat("unrecognized format: missing SCKP header")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"corrupt checkpoint: bad header ({exc})") from None
    blobs = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode(errors="replace")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = struct.unpack("<Q", r.take(8))[0]
        if count != int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpoint(f"corrupt checkpoint: blob {name!r} length {count} != shape {shape}")
        blobs.append((name, np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)))
    if r.pos != len(r.buf):
        raise CorruptCheckpoint("corrupt checkpoint: trailing bytes")
    return header, blobs


def load_checkpoint(path: str | Path, model=None):
    """Restore a model; returns (model, norm_stats, header).

    With ``model=None`` a fresh model is built from the header.  Blobs are
    matched in file order so an incompatible variant fails on the first blob
    whose shape differs.
    """
    from .model import ModelConfig, UNetPP

    header, blobs = read_checkpoint(path)
    if model is None:
        model = UNetPP(ModelConfig(header["variant"], header["base_width"], header["in_channels"], header["seed"]))
    params = dict(model.named_parameters())
    states = dict(model.batchnorm_states())
    seen = set()
    for name, arr in blobs:
        base, _, field = name.rpartition(".")
        if name in params:
            if params[name].shape != arr.shape:
                raise BlobShapeMismatch(f"shape mismatch at blob {name!r}: file {arr.shape}, model {params[name].shape}")
            params[name].data[...] = arr
        elif base in states and field in ("running_mean", "running_var", "num_batches_tracked"):
            st = states[base]
            if field == "num_batches_tracked":
                st.num_batches_tracked = int(arr)
            else:
                if getattr(st, field).shape != arr.shape:
                    raise BlobShapeMismatch(f"shape mismatch at blob {name!r}")
                setattr(st, field, arr.copy())
        else:
            raise BlobShapeMismatch(f"shape mismatch at blob {name!r}: not present in model")
        seen.add(name)
    expected = [n for n, _ in _model_blobs(model)]
    missing = [n for n in expected if n not in seen]
    if missing:
        raise MissingBlob(f"checkpoint lacks blob {missing[0]!r}")
    for _, st in model.batchnorm_states():
        st.eps = header.get("bn_eps", st.eps)
        st.momentum = header.get("bn_momentum", st.momentum)
    ns = header.get("norm_stats")
    return model, (NormStats.from_dict(ns) if ns else None), header
