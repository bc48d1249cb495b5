"""Heart-rate estimation from pulse waveforms, HR error statistics, HRV indices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal as sps
from scipy.interpolate import CubicSpline

HR_BAND_HZ = (0.7, 3.0)
LF_BAND_HZ = (0.04, 0.15)
HF_BAND_HZ = (0.15, 0.4)
NFFT = 4096
HRV_RESAMPLE_HZ = 4.0
REFRACTORY_S = 0.35


class MetricError(ValueError):
    pass


def _periodogram(x: np.ndarray, fs: float, nfft: int) -> tuple[np.ndarray, np.ndarray]:
    x = sps.detrend(np.asarray(x, dtype=np.float64), type="linear")
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size), n=max(nfft, x.size))) ** 2
    freqs = np.fft.rfftfreq(max(nfft, x.size), d=1.0 / fs)
    return freqs, spec


def hr_from_bvp(bvp: np.ndarray, fs: float, band: Sequence[float] = HR_BAND_HZ) -> float:
    """Spectral-peak heart rate in bpm (Hann window, zero padded to 4096 bins)."""
    bvp = np.asarray(bvp, dtype=np.float64)
    if bvp.ndim != 1 or bvp.size < 128:
        raise MetricError(f"need a 1-D signal of at least 128 samples, got shape {bvp.shape}")
    if not fs > 0:
        raise MetricError(f"sampling rate must be positive, got {fs}")
    if np.ptp(bvp) == 0:
        raise MetricError("constant signal has no spectral peak")
    freqs, spec = _periodogram(bvp, fs, NFFT)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not mask.any() or spec[mask].max() <= 0:
        raise MetricError("no spectral peak inside the heart-rate band")
    return float(freqs[mask][np.argmax(spec[mask])] * 60.0)


@dataclass(frozen=True)
class HrReport:
    sd: float
    mae: float
    rmse: float
    pearson_r: float
    n: int

    def as_row(self) -> dict[str, float]:
        return {"n": self.n, "mae": self.mae, "rmse": self.rmse, "sd": self.sd, "pearson_r": self.pearson_r}


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom == 0:
        return 0.0
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


def hr_report(preds: Sequence[float], gts: Sequence[float]) -> HrReport:
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 1:
        raise MetricError(f"length mismatch: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise MetricError("empty prediction list")
    err = preds - gts
    return HrReport(
        sd=float(np.std(err)),
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        pearson_r=pearson(preds, gts),
        n=int(preds.size),
    )


@dataclass(frozen=True)
class HrvReport:
    lf_nu: float
    hf_nu: float
    lf_hf_ratio: float
    defined: bool = True
    n_beats: int = 0


def detect_beats(bvp: np.ndarray, fs: float, refractory_s: float = REFRACTORY_S) -> np.ndarray:
    """Beat times in seconds: local maxima at least ``refractory_s`` apart, parabola-refined."""
    x = np.asarray(bvp, dtype=np.float64)
    peaks, _ = sps.find_peaks(x, distance=max(1, int(round(refractory_s * fs))))
    peaks = peaks[(peaks > 0) & (peaks < x.size - 1)]
    y0, y1, y2 = x[peaks - 1], x[peaks], x[peaks + 1]
    curvature = y0 - 2.0 * y1 + y2
    offset = np.where(curvature < 0, 0.5 * (y0 - y2) / np.where(curvature < 0, curvature, 1.0), 0.0)
    return (peaks + offset) / fs


def hrv_report(bvp: np.ndarray, fs: float) -> HrvReport:
    bvp = np.asarray(bvp, dtype=np.float64)
    if fs < 20:
        raise MetricError(f"sampling rate {fs} Hz below 20 Hz")
    if bvp.size < 10 * fs:
        raise MetricError(f"HRV needs at least 10 s of signal, got {bvp.size / fs:.2f} s")
    beats = detect_beats(bvp, fs)
    if beats.size < 4:
        raise MetricError(f"only {beats.size} beats detected; need at least 4")
    ibi = np.diff(beats)
    t_ibi = beats[1:]
    grid = np.arange(t_ibi[0], t_ibi[-1], 1.0 / HRV_RESAMPLE_HZ)
    series = CubicSpline(t_ibi, ibi)(grid) if grid.size > 1 else np.full(2, ibi[0])
    series = series - series.mean()
    spec = np.abs(np.fft.rfft(series * np.hanning(series.size), n=NFFT)) ** 2
    freqs = np.fft.rfftfreq(NFFT, d=1.0 / HRV_RESAMPLE_HZ)
    lf = float(spec[(freqs >= LF_BAND_HZ[0]) & (freqs < LF_BAND_HZ[1])].sum())
    hf = float(spec[(freqs >= HF_BAND_HZ[0]) & (freqs <= HF_BAND_HZ[1])].sum())
    total = lf + hf
    if total < 1e-12:
        return HrvReport(float("nan"), float("nan"), float("nan"), defined=False, n_beats=int(beats.size))
    ratio = lf / hf if hf > 0 else float("inf")
    return HrvReport(lf / total, hf / total, ratio, defined=True, n_beats=int(beats.size))
