"""Training loop, evaluation, and run manifests.

Checkpoints hold model parameters only. The feature queues are rebuilt from
the seed on every run, so a resumed run starts from fresh queues and its
continuity loss re-warms over the first ``K / batch`` iterations.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..augment import apply_policy
from ..metrics import HrReport, MetricError, hr_from_bvp, hr_report
from ..model import GreipModel, save_checkpoint
from ..numerics import AdamState, NonFiniteError, adam_step, backward
from ..objectives import (
    FeatureQueue,
    continuity_loss,
    hr_l1_loss,
    lambda_schedule,
    orthogonality_loss,
    overall_loss,
    pearson_bvp_loss,
    queue_update,
)
from ..stmap import WINDOW_STEP, Dataset, STMap, window, window_starts
from .config import TrainConfig, format_config

LOG_COLUMNS = ("iter", "L_bvp", "L_hr", "L_con", "L_ort", "lambda", "total")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass(frozen=True)
class RunManifest:
    sources: tuple[str, ...]
    target: str | None = None
    counts: Mapping[str, int] = field(default_factory=dict)
    out_dir: Path | None = None
    protocol: str = "msdg"

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise TrainingError("a run needs at least one source domain")
        if len(set(self.sources)) != len(self.sources):
            raise TrainingError(f"duplicate source domains {self.sources}")
        if self.target is not None and self.target in self.sources:
            raise TrainingError(f"target {self.target!r} is also a source")
        if self.protocol == "ssdg" and len(self.sources) != 1:
            raise TrainingError(f"single-source protocol got {len(self.sources)} sources")
        if self.protocol not in ("msdg", "ssdg"):
            raise TrainingError(f"unknown protocol {self.protocol!r}")
        for name, n in self.counts.items():
            if n < 1:
                raise TrainingError(f"domain {name!r} has {n} samples")


@dataclass
class TrainResult:
    model: GreipModel
    log: list[dict[str, float]]
    seconds: float
    checkpoint: Path | None = None
    log_path: Path | None = None


def _pool(data: Mapping[str, Dataset], sources: Sequence[str]) -> Dataset:
    missing = [s for s in sources if s not in data]
    if missing:
        raise TrainingError(f"no data for source domains {missing}")
    parts = [data[s] for s in sources]
    if any(len(p) == 0 for p in parts):
        raise TrainingError("source datasets must be nonempty")
    rates = {p.frame_rate_hz for p in parts}
    if len(rates) != 1:
        raise TrainingError(f"sources disagree on frame rate: {sorted(rates)}")
    if len(parts) == 1:
        return parts[0]
    return Dataset(
        np.concatenate([p.maps for p in parts]),
        np.concatenate([p.bvp for p in parts]),
        np.concatenate([p.hr_bpm for p in parts]),
        "+".join(sources),
        parts[0].frame_rate_hz,
    )


def format_log(log: Sequence[Mapping[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in log:
        writer.writerow([row["iter"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def build_batch(pool: Dataset, index: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Originals followed by one augmented copy each when explicit priors are on."""
    maps = pool.maps[index].astype(np.float64)
    bvp = pool.bvp[index].astype(np.float64)
    hr = pool.hr_bpm[index].astype(np.float64)
    if config.use_explicit:
        policy = config.augmentation
        augmented = np.stack([apply_policy(STMap(m, pool.frame_rate_hz), policy, rng)[0].values for m in maps])
        maps = np.concatenate([maps, augmented])
        bvp = np.concatenate([bvp, bvp])
        hr = np.concatenate([hr, hr])
    return maps, bvp, hr


def train_step(model: GreipModel, queue: FeatureQueue | None, opt: AdamState, batch, config: TrainConfig,
               iteration: int) -> tuple[dict[str, float], AdamState]:
    maps, bvp, hr = batch
    w = config.weights
    pred = model.predict(maps, use_fusion=config.use_fusion, with_noise=config.use_implicit)
    parts = {"bvp": pearson_bvp_loss(pred.bvp, bvp), "hr": hr_l1_loss(pred.hr, hr)}
    if config.use_implicit:
        b = pred.bundle
        parts["con"] = continuity_loss(b.z_phy_vec, hr, queue, w.temperature)
        parts["ort"] = orthogonality_loss(b.z_n_pooled, queue.q_r, w.floor, queue.q_r_norms)
    lam = lambda_schedule(iteration, config.iterations, config.dann_shift)
    total = overall_loss(parts, w, iteration, config.iterations, config.dann_shift)
    if not np.isfinite(total.item()):
        raise DivergenceError(f"total loss is {total.item()} at iteration {iteration}")
    names = sorted(model.params)
    grads = backward(total, [model.params[n] for n in names])
    new, opt = adam_step({n: model.params[n].data for n in names},
                         {n: grads[model.params[n]] for n in names}, opt, config.lr)
    model.set_arrays(new)
    if config.use_implicit:
        b = pred.bundle
        norms = np.linalg.norm(b.z_phy_pooled.data, axis=1)
        queue_update(queue, b.z_phy_vec.data, b.z_n_vec.data, hr, norms)
    row = {"iter": iteration, "lambda": lam, "total": total.item()}
    for name in ("bvp", "hr", "con", "ort"):
        row[f"L_{name}"] = parts[name].item() if name in parts else 0.0
    return row, opt


def train(
    config: TrainConfig,
    manifest: RunManifest,
    data: Mapping[str, Dataset],
    progress: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Train on the pooled source domains; writes checkpoint and log when ``manifest.out_dir`` is set."""
    start = time.perf_counter()
    pool = _pool(data, manifest.sources)
    cfg = config.model
    if pool.maps.shape[1:] != (cfg.n_rois, cfg.n_frames, 3):
        raise TrainingError(f"data maps {pool.maps.shape[1:]} do not match model input {(cfg.n_rois, cfg.n_frames, 3)}")
    if config.batch_size > len(pool):
        raise TrainingError(f"batch size {config.batch_size} exceeds the {len(pool)} pooled samples")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model_seed, queue_seed = (int(s.generate_state(1)[0]) for s in seeds[:2])
    rng = np.random.default_rng(seeds[2])
    model = GreipModel(cfg, seed=model_seed)
    queue = FeatureQueue(config.queue_capacity, cfg.dim, queue_seed) if config.use_implicit else None
    opt = AdamState()
    log: list[dict[str, float]] = []
    for it in range(config.iterations):
        index = rng.choice(len(pool), size=config.batch_size, replace=False)
        batch = build_batch(pool, index, config, rng)
        try:
            row, opt = train_step(model, queue, opt, batch, config, it)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at iteration {it}: {exc}") from exc
        log.append(row)
        if progress is not None:
            progress(row)
    result = TrainResult(model, log, time.perf_counter() - start)
    if manifest.out_dir is not None:
        out = Path(manifest.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "model.grpk"
        result.log_path = out / "loss_log.csv"
        save_checkpoint(result.checkpoint, model.arrays(), cfg.digest())
        result.log_path.write_text(format_log(log))
        (out / "config.txt").write_text(format_config(config))
    return result


@dataclass(frozen=True)
class Evaluation:
    head: HrReport
    fft: HrReport
    hr_head: np.ndarray
    hr_fft: np.ndarray
    hr_true: np.ndarray
    bvp: np.ndarray

    def rows(self) -> list[dict[str, float]]:
        return [{"column": "hr_head", **self.head.as_row()}, {"column": "bvp_fft", **self.fft.as_row()}]


def predict_dataset(model: GreipModel, data: Dataset, use_fusion: bool, batch_size: int = 64):
    bvps, hrs = [], []
    for lo in range(0, len(data), batch_size):
        pred = model.predict(data.maps[lo:lo + batch_size].astype(np.float64), use_fusion=use_fusion)
        bvps.append(pred.bvp.data)
        hrs.append(pred.hr.data)
    return np.concatenate(bvps), np.concatenate(hrs)


def evaluate(model: GreipModel, data: Dataset, use_fusion: bool = True, batch_size: int = 64) -> Evaluation:
    """HR errors from both the regression head and the spectral peak of the predicted waveform."""
    bvp, hr_head = predict_dataset(model, data, use_fusion, batch_size)
    hr_fft = np.empty(len(data))
    for i, wave in enumerate(bvp):
        try:
            hr_fft[i] = hr_from_bvp(wave, data.frame_rate_hz)
        except MetricError:
            # A flat prediction carries no rate; score it at the band centre.
            hr_fft[i] = 0.5 * (42.0 + 180.0)
    truth = np.asarray(data.hr_bpm, dtype=np.float64)
    return Evaluation(hr_report(hr_head, truth), hr_report(hr_fft, truth), hr_head, hr_fft, truth, bvp)


def predict_recording(model: GreipModel, stmap: STMap, use_fusion: bool = True, step: int = WINDOW_STEP,
                      batch_size: int = 64) -> np.ndarray:
    """Full-length waveform for a recording of any length >= the model window.

    Windows advance by ``step`` frames, each prediction is standardized, and
    overlapping predictions are averaged.
    """
    length = model.config.n_frames
    total = stmap.n_frames
    if total < length:
        raise TrainingError(f"recording has {total} frames, the model needs {length}")
    starts = list(window_starts(total, length, step))
    if starts[-1] != total - length:
        starts.append(total - length)
    acc = np.zeros(total)
    hits = np.zeros(total)
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo:lo + batch_size]
        maps = np.stack([window(stmap.values, s, length, stmap.frame_rate_hz).values for s in chunk])
        waves = model.predict(maps, use_fusion=use_fusion).bvp.data
        waves = (waves - waves.mean(axis=1, keepdims=True)) / (waves.std(axis=1, keepdims=True) + 1e-12)
        for s, wave in zip(chunk, waves):
            acc[s:s + length] += wave
            hits[s:s + length] += 1.0
    return acc / hits
