"""Explicit noise priors as STMap augmentations, and the one-of-five scheduler.

Each augmentation models one source of domain shift (camera gamma, frame rate,
finger-to-face delay, lighting/skin chroma, head motion) and returns a
re-normalized STMap; heart-rate and BVP labels are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .stmap import STMap, Sample, normalize_rows

BRANCHES = ("gamma", "fps", "delay", "light", "motion")


class AugmentationError(ValueError):
    pass


def catmull_rom(samples: np.ndarray, positions: np.ndarray, axis: int = 1) -> np.ndarray:
    """Evaluate a uniform Catmull-Rom spline through ``samples`` at fractional indices.

    End segments reuse the end sample as the missing neighbour, and positions
    outside ``[0, n-1]`` are clamped onto it.
    """
    samples = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, 0)
    n = samples.shape[0]
    if n < 2:
        raise AugmentationError("cubic interpolation needs at least 2 samples")
    u = np.clip(np.asarray(positions, dtype=np.float64), 0.0, n - 1)
    i = np.minimum(np.floor(u).astype(int), n - 2)
    t = (u - i).reshape((-1,) + (1,) * (samples.ndim - 1))
    p0 = samples[np.maximum(i - 1, 0)]
    p1 = samples[i]
    p2 = samples[i + 1]
    p3 = samples[np.minimum(i + 2, n - 1)]
    out = 0.5 * (
        2.0 * p1
        + (p2 - p0) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t * t * t
    )
    return np.moveaxis(out, 0, axis)


def gamma_augment(st: STMap, gamma: float, gamma_range: Sequence[float] = (0.8, 2.2)) -> STMap:
    if not gamma_range[0] <= gamma <= gamma_range[1]:
        raise AugmentationError(f"gamma {gamma} outside {tuple(gamma_range)}")
    return st.replace(normalize_rows(np.power(st.values, gamma)))


def resample_down_up(values: np.ndarray, down_factor: float, axis: int = 1) -> np.ndarray:
    """Keep every ``down_factor``-th frame, then cubic-interpolate back to the full grid."""
    n = values.shape[axis]
    kept = np.arange(0.0, n - 1 + 1e-9, float(down_factor))
    if isinstance(down_factor, (int, np.integer)) or float(down_factor).is_integer():
        coarse = np.take(values, kept.astype(int), axis=axis)
    else:
        coarse = catmull_rom(values, kept, axis=axis)
    return catmull_rom(coarse, np.arange(n) / float(down_factor), axis=axis)


def framerate_augment(st: STMap, down_factor: float | Fraction) -> STMap:
    factor = float(down_factor)
    if factor <= 1.0:
        raise AugmentationError(f"down factor must exceed 1, got {down_factor}")
    if st.n_frames / factor < 4:
        raise AugmentationError(f"down factor {down_factor} leaves fewer than 4 of {st.n_frames} frames")
    return st.replace(normalize_rows(resample_down_up(st.values, factor)))


def delay_augment(st: STMap, shift: int, delay_max_frames: int = 15) -> STMap:
    """Circular shift along time by ``shift`` frames."""
    if int(shift) != shift or abs(shift) > delay_max_frames:
        raise AugmentationError(f"shift {shift} must be an integer with |shift| <= {delay_max_frames}")
    return st.replace(np.roll(st.values, int(shift), axis=1))


def light_augment(st: STMap, mixing: np.ndarray, entry_range: Sequence[float] = (-0.5, 0.5)) -> STMap:
    """Replace each pixel's [R, G, B] by ``mixing @ [R, G, B]``."""
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (3, 3):
        raise AugmentationError(f"mixing matrix must be 3x3, got {mixing.shape}")
    if mixing.min() < entry_range[0] or mixing.max() > entry_range[1]:
        raise AugmentationError(f"mixing entries must lie in {tuple(entry_range)}")
    return st.replace(normalize_rows(st.values @ mixing.T))


def motion_augment(st: STMap, perm: Sequence[int]) -> STMap:
    perm = np.asarray(perm)
    if perm.shape != (st.n_rois,) or not np.array_equal(np.sort(perm), np.arange(st.n_rois)):
        raise AugmentationError(f"not a permutation of {st.n_rois} ROIs")
    return st.replace(st.values[perm])


@dataclass(frozen=True)
class AugmentationPolicy:
    p_gamma: float = 0.2
    p_fps: float = 0.2
    p_delay: float = 0.2
    p_light: float = 0.2
    p_motion: float = 0.2
    gamma_range: tuple[float, float] = (0.8, 2.2)
    down_factor_set: tuple[float, ...] = (2, 3, 4)
    delay_max_frames: int = 15
    light_entry_range: tuple[float, float] = (-0.5, 0.5)

    def __post_init__(self):
        probs = self.probabilities
        if any(p < 0 or p > 1 for p in probs):
            raise AugmentationError(f"probabilities must lie in [0, 1]: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise AugmentationError(f"probabilities must sum to 1, got {sum(probs)!r}")
        if not self.down_factor_set or min(self.down_factor_set) <= 1:
            raise AugmentationError("down factors must all exceed 1")

    @property
    def probabilities(self) -> tuple[float, float, float, float, float]:
        return (self.p_gamma, self.p_fps, self.p_delay, self.p_light, self.p_motion)

    @classmethod
    def from_percent(cls, gamma: float, fps: float, delay: float, light: float, motion: float,
                     **ranges: Any) -> "AugmentationPolicy":
        return cls(gamma / 100, fps / 100, delay / 100, light / 100, motion / 100, **ranges)


# Per-target mixtures tuned on the real datasets (column order m, l, gamma, f, t there).
PRESETS: dict[str, AugmentationPolicy] = {
    "VIPL-HR": AugmentationPolicy.from_percent(gamma=30, fps=20, delay=0, light=20, motion=30),
    "V4V": AugmentationPolicy.from_percent(gamma=0, fps=0, delay=30, light=30, motion=40),
    "BUAA": AugmentationPolicy.from_percent(gamma=25, fps=15, delay=30, light=15, motion=15),
    "UBFC": AugmentationPolicy.from_percent(gamma=10, fps=40, delay=15, light=15, motion=20),
    "PURE": AugmentationPolicy.from_percent(gamma=20, fps=10, delay=0, light=30, motion=40),
}


def get_policy(name_or_policy: str | AugmentationPolicy) -> AugmentationPolicy:
    if isinstance(name_or_policy, AugmentationPolicy):
        return name_or_policy
    key = {k.lower(): k for k in PRESETS}.get(str(name_or_policy).lower())
    if key is None:
        raise KeyError(f"unknown augmentation preset {name_or_policy!r}; known: {sorted(PRESETS)}")
    return PRESETS[key]


@dataclass(frozen=True)
class AugmentationTag:
    branch: str
    params: dict = field(default_factory=dict)

    def params_text(self) -> str:
        return ";".join(f"{k}={_fmt(v)}" for k, v in self.params.items())


def _fmt(v) -> str:
    if isinstance(v, np.ndarray):
        return " ".join(_fmt(x) for x in v.reshape(-1))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def select_branch(policy: AugmentationPolicy, draw: float) -> str:
    """Map a uniform draw in [0, 1) to exactly one branch by cumulative thresholds."""
    cumulative = 0.0
    last_positive = None
    for name, p in zip(BRANCHES, policy.probabilities):
        if p <= 0:
            continue
        cumulative += p
        last_positive = name
        if draw <= cumulative:
            return name
    # Rounding in the cumulative sum can leave draws just below 1 unassigned.
    assert last_positive is not None
    return last_positive


def apply_policy(st: STMap, policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[STMap, AugmentationTag]:
    branch = select_branch(policy, float(rng.random()))
    if branch == "gamma":
        gamma = float(rng.uniform(*policy.gamma_range))
        return gamma_augment(st, gamma, policy.gamma_range), AugmentationTag(branch, {"gamma": gamma})
    if branch == "fps":
        factor = policy.down_factor_set[int(rng.integers(len(policy.down_factor_set)))]
        return framerate_augment(st, factor), AugmentationTag(branch, {"down_factor": factor})
    if branch == "delay":
        m = policy.delay_max_frames
        shift = int(rng.integers(-m, m + 1))
        return delay_augment(st, shift, m), AugmentationTag(branch, {"shift": shift})
    if branch == "light":
        mixing = rng.uniform(*policy.light_entry_range, size=(3, 3))
        return light_augment(st, mixing, policy.light_entry_range), AugmentationTag(branch, {"matrix": mixing})
    perm = rng.permutation(st.n_rois)
    return motion_augment(st, perm), AugmentationTag(branch, {"perm": perm})


def augment_sample(sample: Sample, policy: AugmentationPolicy, rng: np.random.Generator) -> tuple[Sample, AugmentationTag]:
    stmap, tag = apply_policy(sample.stmap, policy, rng)
    return sample.with_stmap(stmap), tag
