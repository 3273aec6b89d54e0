"""Frame ingestion, preprocessing, sliding windows, and synthetic sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import read_tensor, write_tensor

RESOLUTIONS = (64, 128)


class DataError(ValueError):
    """Unreadable, inconsistent, or insufficient input data."""


@dataclass
class FrameSequence:
    """Chronologically ordered frames stacked as ``(N, H, W, C)``.

    ``max_value`` is the largest value the source format can represent; it is
    None once frames are normalized to [0, 1].
    """

    frames: np.ndarray
    max_value: float | None = None
    timestamps: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or len(self.frames) == 0:
            raise DataError(f"frames must be a non-empty N×H×W×C stack, got shape {self.frames.shape}")
        if self.timestamps is not None and len(self.timestamps) != len(self.frames):
            raise DataError("one timestamp per frame required")

    def __len__(self):
        return len(self.frames)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


@dataclass
class WindowedDataset:
    X: np.ndarray  # (samples, timestep, H, W, 1)
    Y: np.ndarray  # (samples, H, W, 1)
    timestep: int

    def __post_init__(self):
        if len(self.X) != len(self.Y):
            raise DataError(f"{len(self.X)} input windows but {len(self.Y)} targets")

    def __len__(self):
        return len(self.X)

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.X[index], self.Y[index], self.timestep)


# ------------------------------------------------------------------ ingest


def read_manifest(manifest_path) -> list[Path]:
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    paths = [base / line.strip() for line in lines if line.strip()]
    if not paths:
        raise DataError(f"manifest {manifest_path} lists no frames")
    return paths


def _load_image(path: Path):
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L"):
                return np.asarray(img, dtype=np.uint16), 65535.0
            if mode in ("L", "P", "1"):
                return np.asarray(img.convert("L")), 255.0
            if mode == "I":
                # Pillow opens 16-bit PGM as mode I
                return np.asarray(img, dtype=np.int32).astype(np.uint16), 65535.0
            return np.asarray(img.convert("RGB")), 255.0
    except FileNotFoundError as exc:
        raise DataError(f"missing frame file {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot decode frame file {path}: {exc}") from exc


def ingest_frames(manifest_path) -> FrameSequence:
    """Load every frame listed in a manifest, in manifest order."""
    paths = read_manifest(manifest_path)
    frames, max_value = [], None
    for path in paths:
        arr, fmt_max = _load_image(path)
        if arr.ndim == 2:
            arr = arr[..., None]
        if frames and arr.shape != frames[0].shape:
            raise DataError(f"frame {path} has shape {arr.shape}, expected {frames[0].shape} like {paths[0]}")
        max_value = fmt_max if max_value is None else max(max_value, fmt_max)
        frames.append(arr)
    stacked = np.stack(frames).astype(np.float32)
    return FrameSequence(stacked, max_value=max_value, timestamps=[p.name for p in paths])


def preprocess(seq: FrameSequence, target: int = 64) -> FrameSequence:
    """Gray (channel mean), bilinear resize to target×target, scale into [0, 1]."""
    scale = 1.0 if seq.max_value is None else float(seq.max_value)
    gray = seq.frames.astype(np.float64).mean(axis=-1) / scale
    out = np.empty((len(seq), target, target, 1), dtype=np.float32)
    for n, frame in enumerate(gray.astype(np.float32)):
        img = Image.fromarray(frame, mode="F")
        if img.size != (target, target):
            img = img.resize((target, target), Image.BILINEAR)
        out[n, :, :, 0] = np.asarray(img, dtype=np.float32)
    np.clip(out, 0.0, 1.0, out=out)
    return FrameSequence(out, None, seq.timestamps, dict(seq.meta))


# --------------------------------------------------------------- windowing


def make_windows(seq: FrameSequence | np.ndarray, timestep: int) -> WindowedDataset:
    """Sliding supervised pairs: sample i is frames[i:i+timestep] -> frames[i+timestep]."""
    frames = seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq)
    if timestep < 1:
        raise DataError(f"timestep must be positive, got {timestep}")
    n = len(frames)
    if n <= timestep:
        raise DataError(f"need more than {timestep} frames to build windows, got {n}")
    idx = np.arange(n - timestep)[:, None] + np.arange(timestep)[None, :]
    return WindowedDataset(frames[idx], frames[timestep:].copy(), timestep)


def chrono_split(ds: WindowedDataset, train_fraction: float = 0.8):
    """Leading ``floor(fraction * samples)`` windows train, the rest validate."""
    if not 0 < train_fraction < 1:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(train_fraction * len(ds))
    if n_train == 0 or n_train == len(ds):
        raise DataError(f"fraction {train_fraction} of {len(ds)} windows leaves an empty partition")
    return ds.subset(slice(0, n_train)), ds.subset(slice(n_train, None))


# --------------------------------------------------------------- synthetic

SYNTH_KINDS = ("moving_square", "diffusing_blob")


def _square_motion(rng, resolution):
    origin = rng.integers(0, resolution, size=2)
    velocity = np.zeros(2, dtype=np.int64)
    while not velocity.any():
        velocity = rng.integers(-2, 3, size=2)
    return origin, velocity


def square_origin(meta: dict, t: int, resolution: int) -> tuple[int, int]:
    """Top-left corner of the moving square in frame ``t`` (toroidal)."""
    oy, ox = meta["origin"]
    vy, vx = meta["velocity"]
    return (oy + vy * t) % resolution, (ox + vx * t) % resolution


def synth_sequence(kind: str, n_frames: int, resolution: int, seed: int, square_size: int = 4) -> FrameSequence:
    if n_frames < 1:
        raise DataError("n_frames must be at least 1")
    rng = np.random.default_rng(seed)
    frames = np.zeros((n_frames, resolution, resolution, 1), dtype=np.float32)
    if kind == "moving_square":
        if resolution < square_size:
            raise DataError(f"resolution {resolution} smaller than square size {square_size}")
        origin, velocity = _square_motion(rng, resolution)
        meta = {"kind": kind, "origin": tuple(int(v) for v in origin),
                "velocity": tuple(int(v) for v in velocity), "square_size": square_size}
        span = np.arange(square_size)
        for t in range(n_frames):
            y0, x0 = square_origin(meta, t, resolution)
            rows = (y0 + span) % resolution
            cols = (x0 + span) % resolution
            frames[t, rows[:, None], cols[None, :], 0] = 1.0
    elif kind == "diffusing_blob":
        yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
        blob = np.zeros((resolution, resolution))
        for _ in range(3):
            cy, cx = rng.uniform(0, resolution, size=2)
            width = rng.uniform(0.05, 0.15) * resolution
            blob += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        blob /= blob.max()
        meta = {"kind": kind}
        for t in range(n_frames):
            frames[t, :, :, 0] = blob
            # one 3×3 box-filter step with wraparound; convex, so values stay in [0, 1]
            blob = sum(np.roll(np.roll(blob, dy, 0), dx, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    else:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    return FrameSequence(frames, None, None, meta)


# ---------------------------------------------------------------------- io


def save_sequence(path, seq: FrameSequence) -> None:
    if seq.frames.shape[-1] != 1 or seq.max_value is not None:
        raise DataError("only normalized single-channel sequences can be saved")
    write_tensor(path, seq.frames)


def load_sequence(path) -> FrameSequence:
    arr = read_tensor(path)
    if arr.ndim != 4 or arr.shape[-1] != 1:
        raise DataError(f"{path} does not hold an N×H×W×1 frame sequence")
    return FrameSequence(arr)


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    """Scale [0, 1] to 0..255 rounding half up."""
    return np.clip(np.floor(np.asarray(frame, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, frame: np.ndarray) -> None:
    """Write an H×W(×1) frame in [0, 1] as an 8-bit binary PGM."""
    img = frame_to_uint8(np.asarray(frame).reshape(frame.shape[0], frame.shape[1]))
    Image.fromarray(img).save(path, format="PPM")
