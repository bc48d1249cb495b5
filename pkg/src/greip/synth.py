"""Synthetic multi-domain STMaps with known pulse ground truth.

Each domain is a noise model over the same physiology: camera response
(gamma, native frame rate), a lighting matrix, per-channel skin pulsatility,
ROI shuffles from head motion, sensor noise and a finger-to-face delay. The
renderer applies them in that physical order so augmentations have something
real to undo.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .augment import catmull_rom
from .stmap import DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_ROIS, HR_RANGE, Dataset, STMap, Sample, normalize_rows


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class BvpParams:
    hr_bpm: float = 72.0
    harmonic_ratio: float = 0.25
    hrv_depth: float = 0.0
    hrv_freq_hz: float = 0.1
    noise_std: float = 0.0

    def __post_init__(self):
        checks = [
            (HR_RANGE[0] <= self.hr_bpm <= HR_RANGE[1], f"hr_bpm {self.hr_bpm} outside {HR_RANGE}"),
            (0.0 <= self.harmonic_ratio <= 0.5, f"harmonic_ratio {self.harmonic_ratio} outside [0, 0.5]"),
            (0.0 <= self.hrv_depth <= 0.15, f"hrv_depth {self.hrv_depth} outside [0, 0.15]"),
            (0.04 <= self.hrv_freq_hz <= 0.4, f"hrv_freq_hz {self.hrv_freq_hz} outside [0.04, 0.4]"),
            (self.noise_std >= 0.0, f"noise_std {self.noise_std} is negative"),
        ]
        for ok, message in checks:
            if not ok:
                raise SynthError(message)


def instantaneous_hr(p: BvpParams, t_frames: int, fs: float) -> np.ndarray:
    """Per-frame heart rate in bpm."""
    k = np.arange(t_frames)
    return p.hr_bpm * (1.0 + p.hrv_depth * np.sin(2.0 * np.pi * p.hrv_freq_hz * k / fs))


def generate_bvp(p: BvpParams, t_frames: int, fs: float = DEFAULT_FPS, seed=0) -> np.ndarray:
    """Two-harmonic pulse with sinusoidal rate modulation and optional white noise."""
    if t_frames < 2:
        raise SynthError("need at least 2 frames")
    top = p.hr_bpm / 60.0 * (1.0 + p.hrv_depth) * (2.0 if p.harmonic_ratio > 0 else 1.0)
    if not fs > 2.0 * top:
        raise SynthError(f"sampling rate {fs} Hz cannot represent {top:.3f} Hz")
    freq = instantaneous_hr(p, t_frames, fs) / 60.0
    phase = np.concatenate(([0.0], np.cumsum(2.0 * np.pi * freq[:-1] / fs)))
    signal = np.sin(phase) + p.harmonic_ratio * np.sin(2.0 * phase)
    if p.noise_std > 0:
        signal = signal + np.random.default_rng(seed).normal(0.0, p.noise_std, t_frames)
    return signal


@dataclass(frozen=True)
class DomainProfile:
    domain_id: str = "identity"
    camera_gamma: float = 1.0
    native_fps: float = 30.0
    lighting_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    skin_weights: tuple[float, float, float] = (0.35, 1.0, 0.55)
    motion_event_rate: float = 0.0
    sensor_noise_std: float = 0.0
    delay_frames: int = 0
    roi_amplitude: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lighting = np.asarray(self.lighting_matrix, dtype=float)
        checks = [
            (0.8 <= self.camera_gamma <= 2.2, f"camera_gamma {self.camera_gamma} outside [0.8, 2.2]"),
            (float(self.native_fps).is_integer() and 20 <= self.native_fps <= 30,
             f"native_fps {self.native_fps} not an integer in 20..30"),
            (lighting.shape == (3, 3), "lighting_matrix must be 3x3"),
            (len(self.skin_weights) == 3 and min(self.skin_weights) >= 0, "skin_weights must be 3 values >= 0"),
            (0.0 <= self.motion_event_rate <= 1.0, f"motion_event_rate {self.motion_event_rate} outside [0, 1]"),
            (self.sensor_noise_std >= 0, "sensor_noise_std is negative"),
            (int(self.delay_frames) == self.delay_frames and 0 <= self.delay_frames <= 15,
             f"delay_frames {self.delay_frames} outside 0..15"),
            (0 <= self.roi_amplitude[0] <= self.roi_amplitude[1], "roi_amplitude must be (low, high) with low <= high"),
        ]
        for ok, message in checks:
            if not ok:
                raise SynthError(message)


# Centre rows (cheeks, forehead) pulse strongly; edge rows (hair, background) barely.
_FACE_AMPLITUDE = (0.15, 1.0)

PRESETS: dict[str, DomainProfile] = {
    "A": DomainProfile(
        domain_id="A", sensor_noise_std=0.05, roi_amplitude=_FACE_AMPLITUDE,
    ),
    "B": DomainProfile(
        domain_id="B", camera_gamma=2.0, sensor_noise_std=0.08, roi_amplitude=_FACE_AMPLITUDE,
        lighting_matrix=((0.45, 0.05, 0.0), (0.05, 0.4, 0.05), (0.0, 0.05, 0.3)),
    ),
    "C": DomainProfile(
        domain_id="C", native_fps=20, sensor_noise_std=0.25, roi_amplitude=_FACE_AMPLITUDE,
    ),
    "D": DomainProfile(
        domain_id="D", camera_gamma=1.3, motion_event_rate=0.9, delay_frames=10,
        sensor_noise_std=0.1, roi_amplitude=_FACE_AMPLITUDE,
    ),
}


def get_profile(name: str) -> DomainProfile:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown domain preset {name!r}; known: {sorted(PRESETS)}") from None


def roi_amplitudes(n_rois: int, amplitude: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Pulsatile gain per ROI: a bump peaking mid-face, jittered per sample."""
    low, high = amplitude
    pos = np.linspace(-1.0, 1.0, n_rois)
    profile = low + (high - low) * np.exp(-(pos / 0.5) ** 2)
    return profile * rng.uniform(0.8, 1.2, n_rois)


def render_stmap(
    bvp: np.ndarray,
    d: DomainProfile,
    seed=0,
    *,
    hr_bpm: float | None = None,
    n_rois: int = DEFAULT_ROIS,
    n_frames: int = DEFAULT_FRAMES,
    fs: float = DEFAULT_FPS,
) -> Sample:
    bvp = np.asarray(bvp, dtype=np.float64)
    delay = int(d.delay_frames)
    if bvp.size < n_frames + delay:
        raise SynthError(f"bvp has {bvp.size} frames, need {n_frames + delay}")
    rng = np.random.default_rng(seed)

    pulse = bvp[delay:delay + n_frames]
    base = rng.uniform(0.3, 0.7, size=(n_rois, 1, 1))
    gain = roi_amplitudes(n_rois, d.roi_amplitude, rng)[:, None, None]
    skin = np.asarray(d.skin_weights, dtype=np.float64)
    traces = base + skin[None, None, :] * gain * pulse[None, :, None]
    if d.sensor_noise_std > 0:
        traces = traces + rng.normal(0.0, d.sensor_noise_std, traces.shape)
    traces = traces @ np.asarray(d.lighting_matrix, dtype=np.float64).T

    if d.native_fps != fs:
        ratio = fs / d.native_fps
        captured = catmull_rom(traces, np.arange(0.0, n_frames - 1 + 1e-9, ratio), axis=1)
        traces = catmull_rom(captured, np.arange(n_frames) / ratio, axis=1)

    traces = np.power(normalize_rows(traces), d.camera_gamma)
    if d.motion_event_rate > 0 and rng.random() < d.motion_event_rate:
        traces = traces[rng.permutation(n_rois)]
    label = bvp[:n_frames]
    return Sample(STMap(normalize_rows(traces), fs), label, hr_bpm, d.domain_id)


@dataclass(frozen=True)
class PulseRanges:
    """Per-sample draws for the pulse shape; the rate comes from the label range."""

    harmonic_ratio: tuple[float, float] = (0.1, 0.4)
    hrv_depth: tuple[float, float] = (0.0, 0.05)
    hrv_freq_hz: tuple[float, float] = (0.05, 0.35)
    noise_std: float = 0.0


def _draw_sample(profile: DomainProfile, hr_range, ranges: PulseRanges, rng: np.random.Generator,
                 n_rois: int, n_frames: int, fs: float) -> Sample:
    target = float(rng.uniform(*hr_range))
    shape = BvpParams(
        hr_bpm=target,
        harmonic_ratio=float(rng.uniform(*ranges.harmonic_ratio)),
        hrv_depth=float(rng.uniform(*ranges.hrv_depth)),
        hrv_freq_hz=float(rng.uniform(*ranges.hrv_freq_hz)),
        noise_std=ranges.noise_std,
    )
    # Rescale the base rate so the window's mean rate equals the drawn label.
    modulation = instantaneous_hr(replace(shape, hr_bpm=60.0), n_frames, fs).mean() / 60.0
    params = replace(shape, hr_bpm=float(np.clip(target / modulation, *HR_RANGE)))
    length = n_frames + profile.delay_frames
    bvp = generate_bvp(params, length, fs, seed=int(rng.integers(2**32)))
    label = float(instantaneous_hr(params, n_frames, fs).mean())
    return render_stmap(bvp, profile, int(rng.integers(2**32)), hr_bpm=label,
                        n_rois=n_rois, n_frames=n_frames, fs=fs)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_domain(
    profile: DomainProfile,
    n_samples: int,
    hr_range: Sequence[float] = (50.0, 110.0),
    seed: int = 0,
    *,
    pulse: PulseRanges | None = None,
    n_rois: int = DEFAULT_ROIS,
    n_frames: int = DEFAULT_FRAMES,
    fs: float = DEFAULT_FPS,
) -> Dataset:
    """``n_samples`` i.i.d. windows; sample ``i`` depends only on ``(seed, i)``."""
    if n_samples < 1:
        raise SynthError("n_samples must be at least 1")
    lo, hi = hr_range
    if not HR_RANGE[0] <= lo <= hi <= HR_RANGE[1]:
        raise SynthError(f"hr_range {tuple(hr_range)} outside {HR_RANGE}")
    pulse = pulse or PulseRanges()
    maps = np.empty((n_samples, n_rois, n_frames, 3), dtype=np.float32)
    bvps = np.empty((n_samples, n_frames), dtype=np.float32)
    labels = np.empty(n_samples, dtype=np.float64)
    for i in range(n_samples):
        s = _draw_sample(profile, (lo, hi), pulse, sample_rng(seed, i), n_rois, n_frames, fs)
        maps[i] = s.stmap.values
        bvps[i] = s.bvp
        labels[i] = s.hr_bpm
    return Dataset(maps, bvps, labels, profile.domain_id, fs)
