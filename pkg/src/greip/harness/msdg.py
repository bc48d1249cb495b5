"""Leave-one-domain-out (MSDG) and single-source (SSDG) comparison runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..stmap import Dataset
from .config import ABLATIONS, TrainConfig
from .train import RunManifest, evaluate, train

VARIANTS = ("baseline", "ex_prior", "im_prior", "full")
TABLE_COLUMNS = ("variant", "seed", "n", "mae", "rmse", "sd", "pearson_r",
                 "head_mae", "head_rmse", "head_sd", "head_pearson_r", "seconds")


@dataclass(frozen=True)
class MsdgRow:
    variant: str
    seed: int | str
    n: int
    mae: float
    rmse: float
    sd: float
    pearson_r: float
    head_mae: float
    head_rmse: float
    head_sd: float
    head_pearson_r: float
    seconds: float

    def as_list(self) -> list:
        return [getattr(self, c) for c in TABLE_COLUMNS]


def expand_configs(configs: TrainConfig | Mapping[str, TrainConfig],
                   variants: Sequence[str] = VARIANTS) -> dict[str, TrainConfig]:
    """A single config becomes one config per ablation variant."""
    if isinstance(configs, TrainConfig):
        return {name: configs.ablation(name) for name in variants}
    unknown = [name for name in configs if name not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; known: {list(ABLATIONS)}")
    return dict(configs)


def run_msdg(
    configs: TrainConfig | Mapping[str, TrainConfig],
    domains: Mapping[str, Dataset],
    target: str,
    seeds: Iterable[int] = (0,),
    sources: Sequence[str] | None = None,
    progress: Callable[[MsdgRow], None] | None = None,
) -> list[MsdgRow]:
    """Train each variant on the sources, score on the whole target domain.

    Sources default to every other domain; pass one source for the SSDG
    protocol. MAE columns come from the spectral peak of the predicted
    waveform, ``head_*`` columns from the regression head.
    """
    if len(domains) < 2:
        raise ValueError("need at least two domains")
    if target not in domains:
        raise ValueError(f"target {target!r} not among domains {sorted(domains)}")
    chosen = tuple(sources) if sources is not None else tuple(d for d in domains if d != target)
    manifest = RunManifest(chosen, target, {d: len(domains[d]) for d in chosen + (target,)},
                           protocol="ssdg" if len(chosen) == 1 and sources is not None else "msdg")
    rows: list[MsdgRow] = []
    for seed in seeds:
        for variant, cfg in expand_configs(configs).items():
            result = train(replace(cfg, seed=int(seed)), manifest, domains)
            ev = evaluate(result.model, domains[target], use_fusion=cfg.use_fusion)
            row = MsdgRow(variant, int(seed), ev.fft.n, ev.fft.mae, ev.fft.rmse, ev.fft.sd, ev.fft.pearson_r,
                          ev.head.mae, ev.head.rmse, ev.head.sd, ev.head.pearson_r, result.seconds)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def summarize(rows: Sequence[MsdgRow]) -> list[MsdgRow]:
    """One row per variant with metrics averaged over seeds."""
    out = []
    for variant in dict.fromkeys(r.variant for r in rows):
        group = [r for r in rows if r.variant == variant]

        def avg(name):
            return float(np.mean([getattr(r, name) for r in group]))

        out.append(MsdgRow(variant, "mean", group[0].n, *(avg(c) for c in TABLE_COLUMNS[3:])))
    return out


def format_table(rows: Sequence[MsdgRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row.as_list()])
    return buf.getvalue()
