"""STMap sample type, row normalization, windowing and the STM1 file format.

An STMap is an ``(N, T, C)`` array of ROI color traces: N regions of interest,
T frames, C = 3 channels in R, G, B order. Every (roi, channel) series is
min-max scaled to [0, 1] independently.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

DEFAULT_ROIS = 64
DEFAULT_FRAMES = 256
DEFAULT_FPS = 30.0
WINDOW_STEP = 5
HR_RANGE = (40.0, 180.0)

MAGIC = b"STM1"
_HEADER = struct.Struct("<4sIIIBf")
FLAG_HR = 0x01
FLAG_BVP = 0x02


class STMapError(ValueError):
    pass


class FormatError(STMapError):
    pass


def normalize_rows(raw: np.ndarray) -> np.ndarray:
    """Min-max scale each (roi, channel) series along time; constant series become 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise STMapError(f"expected an (N, T, C) array, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise STMapError("non-finite values in STMap")
    lo = raw.min(axis=1, keepdims=True)
    span = raw.max(axis=1, keepdims=True) - lo
    flat = span <= 0
    out = (raw - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class STMap:
    values: np.ndarray
    frame_rate_hz: float = DEFAULT_FPS

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise STMapError(f"STMap must be (N, T, 3), got {values.shape}")
        if not np.isfinite(values).all():
            raise STMapError("non-finite values in STMap")
        if values.min() < 0.0 or values.max() > 1.0:
            raise STMapError("STMap values must lie in [0, 1]")
        if not self.frame_rate_hz > 0:
            raise STMapError(f"frame rate must be positive, got {self.frame_rate_hz}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_raw(cls, raw: np.ndarray, frame_rate_hz: float = DEFAULT_FPS) -> "STMap":
        return cls(normalize_rows(raw), frame_rate_hz)

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def replace(self, values: np.ndarray) -> "STMap":
        return STMap(values, self.frame_rate_hz)


@dataclass(frozen=True)
class Sample:
    stmap: STMap
    bvp: Optional[np.ndarray] = None
    hr_bpm: Optional[float] = None
    domain_id: str = ""

    def __post_init__(self):
        if self.bvp is not None:
            bvp = np.asarray(self.bvp, dtype=np.float64)
            if bvp.shape != (self.stmap.n_frames,):
                raise STMapError(f"bvp length {bvp.shape} does not match {self.stmap.n_frames} frames")
            bvp.flags.writeable = False
            object.__setattr__(self, "bvp", bvp)
        if self.hr_bpm is not None:
            hr = float(self.hr_bpm)
            if not HR_RANGE[0] <= hr <= HR_RANGE[1]:
                raise STMapError(f"hr_bpm {hr} outside {HR_RANGE}")
            object.__setattr__(self, "hr_bpm", hr)

    def with_stmap(self, stmap: STMap) -> "Sample":
        return Sample(stmap, self.bvp, self.hr_bpm, self.domain_id)


def window(sequence: np.ndarray, start: int, length: int = DEFAULT_FRAMES,
           frame_rate_hz: float = DEFAULT_FPS) -> STMap:
    sequence = np.asarray(sequence)
    if sequence.ndim != 3:
        raise STMapError(f"expected (N, T, C) sequence, got {sequence.shape}")
    if start < 0 or length < 1 or start + length > sequence.shape[1]:
        raise STMapError(f"window [{start}, {start + length}) outside sequence of {sequence.shape[1]} frames")
    return STMap.from_raw(sequence[:, start:start + length], frame_rate_hz)


def window_starts(total_frames: int, length: int = DEFAULT_FRAMES, step: int = WINDOW_STEP) -> range:
    return range(0, total_frames - length + 1, step)


def iter_windows(sequence: np.ndarray, length: int = DEFAULT_FRAMES, step: int = WINDOW_STEP,
                 frame_rate_hz: float = DEFAULT_FPS) -> Iterator[STMap]:
    for start in window_starts(np.asarray(sequence).shape[1], length, step):
        yield window(sequence, start, length, frame_rate_hz)


# -- STM1 binary format -----------------------------------------------------

def encode_stm(sample: Sample) -> bytes:
    st = sample.stmap
    flags = (FLAG_HR if sample.hr_bpm is not None else 0) | (FLAG_BVP if sample.bvp is not None else 0)
    parts = [
        _HEADER.pack(MAGIC, st.n_rois, st.n_frames, st.n_channels, flags, st.frame_rate_hz),
        st.values.astype("<f4").tobytes(order="C"),
    ]
    if sample.hr_bpm is not None:
        parts.append(struct.pack("<f", sample.hr_bpm))
    if sample.bvp is not None:
        parts.append(struct.pack("<I", sample.bvp.size))
        parts.append(sample.bvp.astype("<f4").tobytes())
    return b"".join(parts)


def decode_stm(payload: bytes, domain_id: str = "") -> Sample:
    if len(payload) < _HEADER.size:
        raise FormatError("truncated STM1 header")
    magic, n, t, c, flags, fps = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if c != 3:
        raise FormatError(f"channel count must be 3, got {c}")
    offset = _HEADER.size

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + nbytes > len(payload):
            raise FormatError(f"truncated STM1 payload while reading {what}")
        chunk = payload[offset:offset + nbytes]
        offset += nbytes
        return chunk

    values = np.frombuffer(take(4 * n * t * c, "map values"), dtype="<f4").reshape(n, t, c)
    hr = None
    bvp = None
    if flags & FLAG_HR:
        (hr,) = struct.unpack("<f", take(4, "hr_bpm"))
    if flags & FLAG_BVP:
        (length,) = struct.unpack("<I", take(4, "bvp length"))
        if length != t:
            raise FormatError(f"bvp length {length} does not match {t} frames")
        bvp = np.frombuffer(take(4 * length, "bvp"), dtype="<f4").astype(np.float64)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after STM1 record")
    return Sample(STMap(values.astype(np.float64), float(fps)), bvp, hr, domain_id)


def write_stm(path: str | Path, sample: Sample) -> None:
    Path(path).write_bytes(encode_stm(sample))


def read_stm(path: str | Path, domain_id: str = "") -> Sample:
    return decode_stm(Path(path).read_bytes(), domain_id)


def export_csv(path: str | Path, stmap: STMap) -> None:
    """One row per (roi, channel) series. For inspection only."""
    names = "RGB"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi", "channel"] + [f"t{k}" for k in range(stmap.n_frames)])
        for roi in range(stmap.n_rois):
            for ch in range(stmap.n_channels):
                writer.writerow([roi, names[ch]] + [repr(float(v)) for v in stmap.values[roi, :, ch]])


@dataclass
class Dataset:
    """Stacked samples sharing one map shape, stored as float32 to bound memory."""

    maps: np.ndarray
    bvp: np.ndarray
    hr_bpm: np.ndarray
    domain_id: str = ""
    frame_rate_hz: float = DEFAULT_FPS

    def __len__(self) -> int:
        return self.maps.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(STMap(self.maps[i].astype(np.float64), self.frame_rate_hz),
                      self.bvp[i].astype(np.float64), float(self.hr_bpm[i]), self.domain_id)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], domain_id: str | None = None) -> "Dataset":
        if not samples:
            raise STMapError("cannot build a dataset from zero samples")
        return cls(
            maps=np.stack([s.stmap.values for s in samples]).astype(np.float32),
            bvp=np.stack([s.bvp for s in samples]).astype(np.float32),
            hr_bpm=np.array([s.hr_bpm for s in samples], dtype=np.float64),
            domain_id=samples[0].domain_id if domain_id is None else domain_id,
            frame_rate_hz=samples[0].stmap.frame_rate_hz,
        )

    def subset(self, index) -> "Dataset":
        return Dataset(self.maps[index], self.bvp[index], self.hr_bpm[index], self.domain_id, self.frame_rate_hz)
