"""Command-line entry point: ``greip <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentationPolicy, augment_sample, get_policy
from .harness.config import ABLATIONS, ConfigError, TrainConfig, format_config, load_config
from .harness.msdg import VARIANTS, format_table, run_msdg, summarize
from .harness.train import RunManifest, TrainingError, evaluate, predict_recording, train
from .metrics import MetricError, hr_from_bvp, hr_report, hrv_report
from .model import ModelError, load_model
from .stmap import Dataset, STMapError, Sample, read_stm, write_stm
from .synth import SynthError, generate_domain, get_profile

MANIFEST_COLUMNS = ("path", "domain_id", "hr_bpm")


class CliError(Exception):
    pass


# -- manifests ----------------------------------------------------------------

def write_manifest(path: Path, entries: Sequence[tuple[str, str, float | None]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rel, domain, hr in entries:
            writer.writerow([rel, domain, "" if hr is None else repr(float(hr))])


def read_manifest(path: str | Path) -> list[Sample]:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(MANIFEST_COLUMNS) <= set(reader.fieldnames):
            raise CliError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
        rows = list(reader)
    samples = []
    for row in rows:
        sample = read_stm(path.parent / row["path"], row["domain_id"])
        if row["hr_bpm"] and sample.hr_bpm is None:
            sample = Sample(sample.stmap, sample.bvp, float(row["hr_bpm"]), sample.domain_id)
        samples.append(sample)
    if not samples:
        raise CliError(f"{path}: manifest lists no samples")
    return samples


def group_domains(samples: Sequence[Sample]) -> dict[str, Dataset]:
    groups: dict[str, list[Sample]] = defaultdict(list)
    for s in samples:
        if s.bvp is None or s.hr_bpm is None:
            raise CliError(f"training sample in domain {s.domain_id!r} lacks bvp or hr labels")
        groups[s.domain_id].append(s)
    return {d: Dataset.from_samples(group, d) for d, group in groups.items()}


def _load_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_probs(text: str) -> AugmentationPolicy:
    values = [float(v) for v in text.split(",")]
    if len(values) != 5:
        raise CliError("--probs needs five values: gamma,fps,delay,light,motion")
    if abs(sum(values) - 100.0) < 1e-6:
        return AugmentationPolicy.from_percent(*values)
    return AugmentationPolicy(*values)


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    profile = get_profile(args.preset)
    seed = 0 if args.seed is None else args.seed
    data = generate_domain(profile, args.n, (args.hr_min, args.hr_max), seed, n_frames=args.frames)
    out = _out(args, f"synth_{profile.domain_id}")
    entries = []
    for i, sample in enumerate(data):
        name = f"{profile.domain_id}_{i:05d}.stm"
        write_stm(out / name, sample)
        entries.append((name, profile.domain_id, sample.hr_bpm))
    write_manifest(out / "manifest.csv", entries)
    print(f"wrote {len(entries)} samples of domain {profile.domain_id} to {out}")
    return 0


def cmd_augment(args) -> int:
    policy = _parse_probs(args.probs) if args.probs else get_policy(args.policy)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    samples = read_manifest(args.manifest)
    out = _out(args, "augmented")
    entries = []
    with open(out / "tags.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "branch", "params"])
        for i, sample in enumerate(samples):
            augmented, tag = augment_sample(sample, policy, rng)
            name = f"aug_{i:05d}.stm"
            write_stm(out / name, augmented)
            writer.writerow([name, tag.branch, tag.params_text()])
            entries.append((name, sample.domain_id, sample.hr_bpm))
    write_manifest(out / "manifest.csv", entries)
    print(f"augmented {len(entries)} samples into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.ablation:
        cfg = cfg.ablation(args.ablation)
    domains = group_domains([s for m in args.manifest for s in read_manifest(m)])
    sources = tuple(args.sources.split(",")) if args.sources else tuple(d for d in domains if d != args.target)
    out = _out(args, "run")
    manifest = RunManifest(sources, args.target, {d: len(domains[d]) for d in sources if d in domains}, out)
    every = max(1, cfg.iterations // 10)

    def progress(row):
        if row["iter"] % every == 0 or row["iter"] == cfg.iterations - 1:
            print(f"iter {row['iter']:6d}  total {row['total']:.5f}", flush=True)

    result = train(cfg, manifest, domains, progress)
    print(f"checkpoint {result.checkpoint}  log {result.log_path}  ({result.seconds:.1f} s)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    use_fusion = cfg.use_fusion if args.fusion is None else args.fusion
    model = load_model(args.checkpoint, cfg.model)
    samples = read_manifest(args.manifest)
    out = _out(args, "eval")
    with_labels = [s for s in samples if s.hr_bpm is not None]
    if not with_labels:
        raise CliError("no sample in the manifest carries an hr_bpm label")
    hrv_rows = []
    if all(s.stmap.n_frames == cfg.model.n_frames for s in with_labels):
        ev = evaluate(model, Dataset.from_samples(with_labels), use_fusion)
        reports = [("hr_head", ev.head), ("bvp_fft", ev.fft)]
        waves = list(ev.bvp)
    else:
        waves = [predict_recording(model, s.stmap, use_fusion) for s in with_labels]
        fft = [hr_from_bvp(w, s.stmap.frame_rate_hz) for w, s in zip(waves, with_labels)]
        reports = [("bvp_fft", hr_report(fft, [s.hr_bpm for s in with_labels]))]
    for i, (wave, s) in enumerate(zip(waves, with_labels)):
        try:
            h = hrv_report(wave, s.stmap.frame_rate_hz)
            hrv_rows.append([i, repr(h.lf_nu), repr(h.hf_nu), repr(h.lf_hf_ratio), h.defined, h.n_beats, ""])
        except MetricError as exc:
            hrv_rows.append([i, "", "", "", False, 0, str(exc)])
    with open(out / "hr_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint", "manifest", "column", "n", "mae", "rmse", "sd", "pearson_r"])
        for column, rep in reports:
            writer.writerow([args.checkpoint, args.manifest, column, rep.n,
                             repr(rep.mae), repr(rep.rmse), repr(rep.sd), repr(rep.pearson_r)])
            print(f"{column:8s} n={rep.n} mae={rep.mae:.3f} rmse={rep.rmse:.3f} sd={rep.sd:.3f} r={rep.pearson_r:.4f}")
    with open(out / "hrv_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "lf_nu", "hf_nu", "lf_hf_ratio", "defined", "n_beats", "note"])
        writer.writerows(hrv_rows)
    return 0


def cmd_msdg(args) -> int:
    cfg = _load_config(args)
    presets = [p.strip().upper() for p in args.domains.split(",")]
    base_seed = 0 if args.seed is None else args.seed
    domains = {p: generate_domain(get_profile(p), args.n, (args.hr_min, args.hr_max), base_seed + k)
               for k, p in enumerate(presets)}
    sources = args.sources.split(",") if args.sources else None
    variants = args.variants.split(",") if args.variants else VARIANTS
    configs = {v: cfg.ablation(v) for v in variants}
    seeds = range(base_seed, base_seed + args.seeds)

    def progress(row):
        print(f"{row.variant:9s} seed {row.seed}  mae {row.mae:.3f}  head_mae {row.head_mae:.3f}  "
              f"({row.seconds:.0f} s)", flush=True)

    rows = run_msdg(configs, domains, args.target.upper(), seeds, sources, progress)
    out = _out(args, "msdg")
    (out / "msdg_runs.csv").write_text(format_table(rows))
    (out / "msdg_summary.csv").write_text(format_table(summarize(rows)))
    (out / "config.txt").write_text(format_config(cfg))
    print(format_table(summarize(rows)), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    failures = 0
    for result in run_suite(seed=0 if args.seed is None else args.seed):
        print(f"{'PASS' if result.ok else 'FAIL'}  {result.name:28s} max rel err {result.max_error:.2e}")
        failures += not result.ok
    return 1 if failures else 0


# -- parser -------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="random seed")
    parser.add_argument("--config", default=default, help="path to a key = value config file")
    parser.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greip", description="Domain-generalized rPPG toolkit.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic domain as STM1 files")
    p.add_argument("--preset", required=True, help="domain preset (A, B, C or D)")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--hr-min", type=float, default=50.0)
    p.add_argument("--hr-max", type=float, default=110.0)
    p.add_argument("--frames", type=int, default=256, help="frames per sample")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", parents=[common], help="apply an augmentation policy to STM1 files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", default="VIPL-HR", help="preset name")
    p.add_argument("--probs", help="gamma,fps,delay,light,motion as fractions or percents")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train on the domains of one or more manifests")
    p.add_argument("--manifest", required=True, action="append")
    p.add_argument("--sources", help="comma-separated source domain ids (default: all but --target)")
    p.add_argument("--target", help="held-out domain id to exclude")
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fusion", dest="fusion", action="store_true", default=None)
    p.add_argument("--no-fusion", dest="fusion", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("msdg", parents=[common], help="leave-one-domain-out comparison on synthetic domains")
    p.add_argument("--domains", default="A,B,C,D")
    p.add_argument("--target", default="D")
    p.add_argument("--sources", help="comma-separated sources; one source gives the single-source protocol")
    p.add_argument("--variants", help=f"subset of {','.join(VARIANTS)}")
    p.add_argument("--n", type=int, default=400, help="samples per domain")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--hr-min", type=float, default=50.0)
    p.add_argument("--hr-max", type=float, default=110.0)
    p.set_defaults(func=cmd_msdg)

    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, ConfigError, TrainingError, ModelError, STMapError, SynthError, MetricError,
            KeyError, ValueError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"greip {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
