from dataclasses import replace

import numpy as np
import pytest

from greip.augment import PRESETS as POLICIES
from greip.harness import (
    ConfigError,
    DivergenceError,
    RunManifest,
    TrainConfig,
    TrainingError,
    evaluate,
    format_config,
    format_log,
    parse_config,
    train,
)
from greip.harness.msdg import VARIANTS, format_table, run_msdg, summarize
from greip.harness.train import LOG_COLUMNS, build_batch, predict_recording
from greip.model import GreipModel, ModelConfig, load_checkpoint
from greip.numerics import backward
from greip.objectives import LossWeights, hr_l1_loss, overall_loss, pearson_bvp_loss
from greip.stmap import STMap
from greip.synth import generate_domain, get_profile

MICRO = ModelConfig(n_rois=4, n_frames=128, widths=(2, 3, 4), dim=4, head_widths=(4, 4, 4, 4))


def micro_config(**kw):
    base = dict(batch_size=4, iterations=6, queue_capacity=16, model=MICRO, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def domains():
    return {
        name: generate_domain(get_profile(name), 12, seed=k, n_rois=4, n_frames=128)
        for k, name in enumerate("ABCD")
    }


# -- config ---------------------------------------------------------------------

def test_defaults_and_full_scale():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.iterations, cfg.lr, cfg.queue_capacity) == (32, 3000, 1e-3, 5120)
    assert cfg.use_explicit and cfg.use_implicit and cfg.use_fusion and not cfg.dann_shift
    full = TrainConfig.full_scale()
    assert (full.batch_size, full.iterations, full.model.dim) == (256, 40_000, 512)


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=64, queue_capacity=100)
    with pytest.raises(KeyError):
        TrainConfig(policy="nope")


def test_ablation_flags():
    cfg = TrainConfig()
    base = cfg.ablation("baseline")
    assert not (base.use_explicit or base.use_implicit or base.use_fusion)
    assert cfg.ablation("ex_prior").use_explicit and not cfg.ablation("ex_prior").use_implicit
    im = cfg.ablation("im_prior")
    assert im.use_implicit and im.use_fusion and not im.use_explicit
    with pytest.raises(ConfigError):
        cfg.ablation("other")


def test_parse_config_keys():
    text = """
    # comment
    batch_size = 8
    iterations = 10   # trailing comment
    lr = 0.002
    use_fusion = false
    k3 = 0.5
    dim = 16
    widths = 4, 8, 12
    policy = UBFC
    p_gamma = 0.5
    p_fps = 0.0
    """
    cfg = parse_config(text)
    assert (cfg.batch_size, cfg.iterations, cfg.lr, cfg.use_fusion) == (8, 10, 0.002, False)
    assert cfg.weights.k3 == 0.5 and cfg.weights.k1 == 1.0
    assert cfg.model.dim == 16 and cfg.model.widths == (4, 8, 12)
    assert cfg.augmentation.p_gamma == 0.5 and cfg.augmentation.p_motion == POLICIES["UBFC"].p_motion


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("batchsize = 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed = 1\nseed = 2")
    with pytest.raises(ConfigError):
        parse_config("seed 1")
    with pytest.raises(ConfigError):
        parse_config("use_fusion = maybe")
    with pytest.raises(ConfigError):
        parse_config("iterations = many")


def test_format_config_round_trips():
    cfg = replace(TrainConfig(seed=7, dann_shift=True, policy="BUAA"), weights=LossWeights(k2=0.25))
    again = parse_config(format_config(cfg))
    assert again.seed == 7 and again.dann_shift and again.weights == cfg.weights
    assert again.model == cfg.model
    assert again.augmentation.probabilities == cfg.augmentation.probabilities
    assert format_config(again) == format_config(cfg)


def test_ablation_key_in_file():
    cfg = parse_config("ablation = baseline\nuse_fusion = true")
    assert not cfg.use_explicit and not cfg.use_implicit and cfg.use_fusion


# -- manifests ------------------------------------------------------------------

def test_run_manifest_invariants():
    RunManifest(("A", "B"), "C")
    with pytest.raises(TrainingError):
        RunManifest(("A", "B"), "A")
    with pytest.raises(TrainingError):
        RunManifest((), None)
    with pytest.raises(TrainingError):
        RunManifest(("A", "B"), "C", protocol="ssdg")
    assert RunManifest(("A",), "C", protocol="ssdg").sources == ("A",)
    with pytest.raises(TrainingError):
        RunManifest(("A",), counts={"A": 0})


# -- training -------------------------------------------------------------------

def test_training_is_bit_deterministic(tmp_path, domains):
    cfg = micro_config()
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        result = train(cfg, RunManifest(("A", "B", "C"), "D", out_dir=out), domains)
        runs.append((result.log_path.read_bytes(), result.checkpoint.read_bytes()))
    assert runs[0] == runs[1]
    other = train(replace(cfg, seed=4), RunManifest(("A", "B", "C"), "D"), domains)
    assert format_log(other.log).encode() != runs[0][0]


def test_loss_log_layout(tmp_path, domains):
    result = train(micro_config(), RunManifest(("A",), out_dir=tmp_path), domains)
    lines = result.log_path.read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)
    assert len(lines) == 1 + 6
    first = dict(zip(LOG_COLUMNS, lines[1].split(",")))
    assert first["iter"] == "0" and float(first["lambda"]) == 1.0
    assert all(float(r["L_con"]) > 0 and float(r["L_ort"]) >= 1.5e-3 for r in result.log)
    assert (tmp_path / "config.txt").exists()


def test_checkpoint_holds_parameters_only(tmp_path, domains):
    result = train(micro_config(), RunManifest(("A",), out_dir=tmp_path), domains)
    arrays, digest = load_checkpoint(result.checkpoint)
    assert digest == MICRO.digest()
    assert set(arrays) == set(GreipModel(MICRO).params)
    assert not any(name.startswith(("q_", "queue")) for name in arrays)


def test_disabled_priors_reproduce_the_baseline_graph(domains):
    cfg = micro_config(iterations=1).ablation("baseline")
    result = train(cfg, RunManifest(("A",)), domains)

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = GreipModel(MICRO, seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[2])
    index = rng.choice(len(domains["A"]), size=cfg.batch_size, replace=False)
    x = domains["A"].maps[index].astype(np.float64)
    pred = model.predict(x, use_fusion=False)
    bvp = pearson_bvp_loss(pred.bvp, domains["A"].bvp[index].astype(np.float64))
    hr = hr_l1_loss(pred.hr, domains["A"].hr_bpm[index])
    total = overall_loss({"bvp": bvp, "hr": hr}, cfg.weights, 0, 1)
    assert result.log[0]["total"] == total.item()
    assert result.log[0]["L_con"] == 0.0 and result.log[0]["L_ort"] == 0.0
    backward(total)


def test_explicit_prior_duplicates_labels(domains):
    cfg = micro_config(use_implicit=False, use_fusion=False)
    maps, bvp, hr = build_batch(domains["B"], np.arange(4), cfg, np.random.default_rng(0))
    assert maps.shape[0] == 8
    assert np.array_equal(hr[:4], hr[4:]) and np.array_equal(bvp[:4], bvp[4:])
    assert not np.array_equal(maps[:4], maps[4:])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard(domains):
    with pytest.raises(DivergenceError, match="iteration"):
        train(micro_config(lr=1e150, iterations=5), RunManifest(("A",)), domains)


def test_training_preconditions(domains):
    with pytest.raises(TrainingError):
        train(micro_config(), RunManifest(("Z",)), domains)
    with pytest.raises(TrainingError):
        train(micro_config(batch_size=13, queue_capacity=32), RunManifest(("A",)), domains)
    with pytest.raises(TrainingError):
        train(micro_config(model=ModelConfig()), RunManifest(("A",)), domains)


def test_evaluate_reports_both_columns(domains):
    model = GreipModel(MICRO, seed=0)
    ev = evaluate(model, domains["D"], use_fusion=True)
    assert ev.head.n == ev.fft.n == 12
    assert [r["column"] for r in ev.rows()] == ["hr_head", "bvp_fft"]
    assert np.all((ev.hr_fft >= 42) & (ev.hr_fft <= 180))


def test_predict_recording_covers_every_frame():
    model = GreipModel(MICRO, seed=0)
    values = np.random.default_rng(0).uniform(0, 1, (4, 300, 3))
    wave = predict_recording(model, STMap(values), use_fusion=False)
    assert wave.shape == (300,)
    with pytest.raises(TrainingError):
        predict_recording(model, STMap(values[:, :100]))


# -- protocols ------------------------------------------------------------------

def test_msdg_table_structure(domains):
    rows = run_msdg(micro_config(iterations=2), domains, "D", seeds=(0, 1))
    assert [r.variant for r in rows] == list(VARIANTS) * 2
    assert all(r.n == 12 for r in rows)
    summary = summarize(rows)
    assert [r.variant for r in summary] == list(VARIANTS) and summary[0].seed == "mean"
    assert summary[0].mae == pytest.approx(np.mean([r.mae for r in rows if r.variant == "baseline"]))
    table = format_table(summary).splitlines()
    assert table[0].startswith("variant,seed,n,mae,rmse,sd,pearson_r")
    assert len(table) == 5


def test_ssdg_uses_one_source(domains):
    rows = run_msdg({"baseline": micro_config(iterations=1).ablation("baseline")}, domains, "D", sources=["A"])
    assert len(rows) == 1
    with pytest.raises(TrainingError):
        run_msdg(micro_config(iterations=1), domains, "D", sources=["D"])
    with pytest.raises(ValueError):
        run_msdg(micro_config(), {"A": domains["A"]}, "A")
