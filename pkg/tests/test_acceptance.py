"""End-to-end acceptance suite.

Each test pins one release criterion with its tolerance stated inline.
Analytic results are checked against independent oracles (central finite
differences, naive covariance, Monte Carlo, permutation tests); the
multi-seed experiment criteria share session-scoped fixtures so the
expensive runs happen once.
"""

import time

import numpy as np
import pytest

from comodnet.data import CorruptionSpec, corrupt
from comodnet.experiment import (
    MODE_MATRIX_ROWS,
    RunConfig,
    build_dataset,
    build_run_model,
    compute_fixed_task_gains,
    evaluate,
    finetune,
    mode_matrix,
    pretrain,
    robustness_sweep,
)
from comodnet.metrics import (
    ClassificationStats,
    delta_p,
    ece,
    informativeness_dprime,
    pca_spectrum,
    lda_spectrum,
    spearman_permutation_pvalue,
)
from comodnet.model import ArchitectureSpec, build_model, model_forward
from comodnet.modulation import (
    ModulatorConfig,
    ModulatorTrace,
    estimate_decoder_gains,
    sample_modulator,
)
from comodnet.nn import (
    AvgPool2d,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ReLU,
    loss_multi_attribute_bce,
)

from helpers import check_layer_grads, fd_grad, rel_err


def _toy_spec(wiring="base"):
    return ArchitectureSpec(
        in_channels=1, image_size=8, n_tasks=3,
        backbone_channels=(4, 4, 6), backbone_pools=(True, True, False),
        encoder_channels=6, processing_channels=5, decoder_units=10,
        heads={"attr": 3}, wiring=wiring)


# --- criterion: gradient integrity --------------------------------------------
# Every layer kind plus the controller -> gain -> loss chain matches central
# finite differences at relative error < 1e-4, 20 random instances each,
# under a one-minute budget.

def test_gradient_integrity_all_layer_kinds():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    cases = [
        ("dense", lambda: Dense(6, 4, rng), (3, 6)),
        ("conv", lambda: Conv2d(2, 3, 3, rng, pad=1), (2, 2, 5, 5)),
        ("maxpool", lambda: MaxPool2d(2), (2, 2, 4, 4)),
        ("avgpool", lambda: AvgPool2d(2), (2, 2, 4, 4)),
        ("relu", lambda: ReLU(), (4, 5)),
        ("flatten", lambda: Flatten(), (2, 3, 4, 4)),
    ]
    for name, make, shape in cases:
        check_layer_grads(make, shape, rng, n_trials=20, tol=1e-4)
    assert time.monotonic() - t0 < 60.0


def test_gradient_integrity_controller_chain():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    for instance in range(20):
        model = build_model(_toy_spec(), seed=100 + instance)
        x = rng.random((2, 1, 8, 8)).astype(np.float64)
        labels = (rng.random((2, 3)) < 0.5).astype(np.int64)
        task = instance % 3

        def loss_value():
            logits, info = model_forward(model, x, task, "attention", "attr")
            loss, dlogits, = loss_multi_attribute_bce(logits, labels)[:2]
            return loss, dlogits, info

        _, dlogits, info = loss_value()
        model.zero_grads()
        d_gain = model.backward_from_logits(dlogits, "attr", info["dec_act"],
                                            None)
        model.controller.backward(d_gain)
        for p in model.controller.params():
            value = p.value.copy()

            def loss_at(pv, p=p, value=value):
                p.value[...] = pv.astype(np.float32)
                out = loss_value()[0]
                p.value[...] = value
                return out

            num = fd_grad(loss_at, value.astype(np.float64), step=2e-4,
                          quantized=True)
            assert rel_err(p.grad, num) < 1e-4, (instance, p.name)
    assert time.monotonic() - t0 < 60.0


# --- criterion: modulator factorization ---------------------------------------
# On a zero-bias base toy network the decoder activity under encoder gain m is
# m x the unmodulated activity within 1e-5 relative over 100 random
# (input, m) pairs; restoring biases pushes the max deviation above 1e-2.

def test_factorization_split_tolerances():
    rng = np.random.default_rng(21)
    model = build_model(_toy_spec(), seed=5)
    for p in model.all_params():
        if p.name.endswith("/b") and not p.name.startswith("controller"):
            p.value[...] = 0.0
    pairs = [(rng.random((1, 1, 8, 8)).astype(np.float32),
              float(rng.uniform(0.1, 2.0))) for _ in range(100)]
    for x, m in pairs:
        base, _ = model.features(x, None)
        mod, _ = model.features(x, np.full(6, m, dtype=np.float32))
        assert rel_err(mod, m * base) < 1e-5

    bias_rng = np.random.default_rng(1)
    for p in model.all_params():
        if p.name.endswith("/b") and not p.name.startswith("controller"):
            p.value[...] = bias_rng.normal(0.3, 0.2, p.value.shape)
    worst = 0.0
    for x, m in pairs:
        base, _ = model.features(x, None)
        mod, _ = model.features(x, np.full(6, m, dtype=np.float32))
        worst = max(worst, rel_err(mod, m * base))
    assert worst > 1e-2


# --- criterion: gain-estimator oracle ------------------------------------------
# Raw gains equal T x the naive empirical covariance within 1e-5 relative on
# 1000 random traces; normalized gains always land in [0, 1].

def test_gain_estimator_against_naive_covariance():
    rng = np.random.default_rng(33)
    config = ModulatorConfig(variance=0.4, draws=12)
    for trial in range(1000):
        trace = sample_modulator(config, rng)
        h = rng.normal(size=(config.draws, 7))
        gains = estimate_decoder_gains(h, trace)
        m = trace.values
        naive = np.array([np.mean((m - m.mean()) * (h[:, k] - h[:, k].mean()))
                          for k in range(7)])
        assert rel_err(gains.raw, config.draws * naive) < 1e-5, trial
        assert np.all(gains.normalized >= 0.0)
        assert np.all(gains.normalized <= 1.0)


# --- criterion: metric hand cases ----------------------------------------------

def test_delta_p_hand_cases():
    # identical metrics -> 0%; uniform +5% improvement -> +5%;
    # one metric +10%, others unchanged -> +3.33%
    def stats(precision, recall, f1):
        return ClassificationStats(precision, recall, f1, 0.0, 10)

    base = stats(0.6, 0.6, 0.6)
    assert delta_p(base, base) == pytest.approx(0.0)
    assert delta_p(stats(0.63, 0.63, 0.63), base) == pytest.approx(5.0)
    assert delta_p(stats(0.66, 0.6, 0.6), base) == pytest.approx(10.0 / 3.0)


def test_ece_hand_case():
    # (0.9, correct) and (0.6, wrong), 4 equal bins: the wrong prediction
    # sits in [0.5, 0.75) and the correct one in [0.75, 1]
    # -> 0.5*|0 - 0.6| + 0.5*|1 - 0.9| = 0.35
    diagram = ece(np.array([0.9, 0.6]), np.array([True, False]), 4)
    assert diagram.ece == pytest.approx(0.35)


def test_dprime_hand_cases():
    # mu1=1, mu0=0, sigma1=sigma0=1 -> 1 (two-point samples carry the
    # population mean and variance exactly)
    a = np.array([[-1.0], [1.0], [0.0], [2.0]])
    assert informativeness_dprime(a, [0, 0, 1, 1]) == pytest.approx([1.0])
    # identical distributions -> 0
    same = np.array([[0.0], [1.0], [0.0], [1.0]])
    assert informativeness_dprime(same, [0, 0, 1, 1]) == pytest.approx([0.0])
    # mu1=2, mu0=0, sigma1=1, sigma0=3 -> 2/sqrt(0.5*(1+9)) = 0.894
    b = np.array([[-3.0], [3.0], [1.0], [3.0]])
    assert informativeness_dprime(b, [0, 0, 1, 1])[0] == \
        pytest.approx(2.0 / np.sqrt(5.0), abs=1e-9)


def test_pca_spectrum_hand_case():
    # four points whose sample covariance is exactly diag(8, 2)/norm:
    # ratios [0.8, 0.2], one dimension reaches the 0.8 threshold
    data = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    report = pca_spectrum(data)
    assert report.ratios[0] == pytest.approx(0.8, abs=0.02)
    assert report.ratios[1] == pytest.approx(0.2, abs=0.02)
    assert report.dims_to_threshold == 1


# --- criterion: mode-matrix completeness ---------------------------------------
# The analysis path emits all six evaluation rows under both wirings, and
# residual wiring with zeroed skip weights reproduces base outputs exactly.

def _tiny_run_config(**overrides):
    base = dict(dataset_kind="attribute", n_tasks=3, n_samples=200,
                image_size=8, patch_size=2,
                backbone_channels=(4, 4), backbone_pools=(True, True),
                encoder_channels=4, processing_channels=4, decoder_units=8,
                pretrain_batch=32, pretrain_epochs=1,
                finetune_batch=32, finetune_epochs=1, eval_every=1000,
                seeds=(0,))
    base.update(overrides)
    return RunConfig(**base).validate()


def test_mode_matrix_six_rows_both_wirings():
    expected = [label for label, _, _ in MODE_MATRIX_ROWS]
    for wiring in ("base", "residual"):
        cfg = _tiny_run_config(wiring=wiring)
        dataset = build_dataset(cfg, seed=0)
        model = build_run_model(cfg, seed=0)
        pretrain(cfg, model, dataset, seed=0)
        state = {k: v.copy() for k, v in model.state_arrays().items()}
        rows = mode_matrix(cfg, dataset, state, seed=0, max_samples=24)
        assert [label for label, _ in rows] == expected, wiring


def test_mode_matrix_zeroed_skips_match_base_exactly():
    res_cfg = _tiny_run_config(wiring="residual")
    base_cfg = _tiny_run_config(wiring="base")
    dataset = build_dataset(res_cfg, seed=0)
    model = build_run_model(res_cfg, seed=0)
    for p in model.all_params():
        if p.name.startswith("skip/"):
            p.value[...] = 0.0
    state = {k: v.copy() for k, v in model.state_arrays().items()}
    res_rows = mode_matrix(res_cfg, dataset, state, seed=0, max_samples=32)
    base_rows = mode_matrix(base_cfg, dataset, state, seed=0, max_samples=32)
    for (label_r, acc_r), (label_b, acc_b) in zip(res_rows, base_rows):
        assert label_r == label_b
        assert acc_r == acc_b, label_r  # bitwise: zero skips add exact zeros


# --- criterion: determinism -----------------------------------------------------
# The full pipeline (gen-data -> pretrain -> finetune -> eval) with a fixed
# seed, run twice, emits byte-identical metric CSVs.

TINY_INI = """\
[dataset]
kind = attribute
n_tasks = 3
n_samples = 120
image_size = 8
patch_size = 2

[architecture]
backbone_channels = 4,4
backbone_pools = true,true
encoder_channels = 4
processing_channels = 4
decoder_units = 8

[pretrain]
batch_size = 32
epochs = 1

[finetune]
batch_size = 32
epochs = 1

[run]
seeds = 0
"""


def test_pipeline_determinism_byte_identical(tmp_path):
    from comodnet.cli import main
    from comodnet.experiment import config_hash, load_config

    config = tmp_path / "run.ini"
    config.write_text(TINY_INI)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for command in ("gen-data", "pretrain", "finetune", "eval"):
            code = main([command, "--config", str(config), "--out", str(out),
                         "--quiet", "--overwrite"])
            assert code == 0, command
    run = f"run-{config_hash(load_config(config))}"
    for name in ("metrics_pretrain.csv", "metrics_finetune.csv", "eval.csv"):
        a = (outs[0] / run / "seed0" / name).read_bytes()
        b = (outs[1] / run / "seed0" / name).read_bytes()
        assert a == b, name


# --- criterion: robustness sweep, severity-0 column ------------------------------
# Severity 0 must equal the uncorrupted evaluation exactly for every kind and
# mode (the directional severity-trend check lives with the multi-seed runs).

def test_robustness_severity_zero_equals_clean_exactly():
    cfg = _tiny_run_config()
    dataset = build_dataset(cfg, seed=0)
    model = build_run_model(cfg, seed=0)
    pretrain(cfg, model, dataset, seed=0)
    compute_fixed_task_gains(model, dataset, cfg, seed=0)
    rows = robustness_sweep(model, dataset, cfg, seed=0,
                            severities=(0,), max_samples=48)
    clean = {mode: evaluate(model, dataset, cfg, "test", mode, seed=0,
                            max_samples=48)["accuracy"]
             for mode in ("attention", "comod_test_fixed")}
    assert rows, "sweep produced no rows"
    for row in rows:
        assert row["severity"] == 0
        assert row["accuracy"] == clean[row["mode"]], row["kind"]


# --- multi-seed experiment criteria ---------------------------------------------
# The remaining criteria compare fine-tuning methods across five seeds. Both
# experiment presets are shared session fixtures so each seed is trained once.

SEEDS = (0, 1, 2, 3, 4)

ATTR_PRESET = dict(
    dataset_kind="attribute", n_tasks=6, n_samples=3000, image_size=16,
    patch_size=4, variance=0.4, sigmoid_controller=True,
    pretrain_batch=256, pretrain_lr=1e-3, pretrain_epochs=2,
    pretrain_controller="frozen",
    finetune_batch=64, finetune_lr=0.05, finetune_epochs=3)

HIER_PRESET = dict(
    dataset_kind="hierarchy", n_coarse=4, n_fine=8, n_samples=3000,
    image_size=16, variance=0.4, sigmoid_controller=True,
    pretrain_batch=64, pretrain_lr=3e-3, pretrain_epochs=15,
    pretrain_controller="frozen",
    finetune_batch=64, finetune_lr=0.02, finetune_epochs=3)

@pytest.fixture(scope="session")
def artifacts_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance-reports")


@pytest.fixture(scope="session")
def attr_runs():
    """Per-seed attribute experiment: frozen-readout baseline, comodulation
    and attention fine-tuning, plus gain/informativeness alignment."""
    t0 = time.monotonic()
    runs = []
    for seed in SEEDS:
        cfg = RunConfig(seeds=(seed,), **ATTR_PRESET).validate()
        dataset = build_dataset(cfg, seed)
        model = build_run_model(cfg, seed)
        pretrain(cfg, model, dataset, seed)
        state = {k: v.copy() for k, v in model.state_arrays().items()}
        base = evaluate(model, dataset, cfg, "val", "plain", seed)["macro_f1"]

        finetune(cfg, model, dataset, seed, method="comod")
        comod = evaluate(model, dataset, cfg, "val", "comod_test",
                         seed)["macro_f1"]

        # gain/informativeness alignment on the comodulation-tuned model:
        # d-prime on unmodulated decoder activity vs per-task mean gains
        gain_rows = compute_fixed_task_gains(model, dataset, cfg, seed)
        x_tr, y_tr = dataset.subset("train")
        x_tr, y_tr = x_tr[:512], y_tr[:512]
        gains, scores = [], []
        for task, _, norm_mean in gain_rows:
            from comodnet.experiment import collect_decoder_activity
            act = collect_decoder_activity(model, x_tr, task, "plain", cfg,
                                           seed, "attr")
            d = informativeness_dprime(act, y_tr[:, task])
            keep = np.isfinite(d)
            gains.append(np.asarray(norm_mean)[keep])
            scores.append(d[keep])
        rho, pval = spearman_permutation_pvalue(
            np.concatenate(scores), np.concatenate(gains),
            n_perm=2000, seed=seed)

        attn_model = build_run_model(cfg, seed)
        attn_model.load_state(state)
        finetune(cfg, attn_model, dataset, seed, method="attention")
        attn = evaluate(attn_model, dataset, cfg, "val", "attention",
                        seed)["macro_f1"]

        runs.append(dict(seed=seed, base=base, comod=comod, attention=attn,
                         rho=rho, pval=pval))
    return dict(runs=runs, elapsed=time.monotonic() - t0)


@pytest.fixture(scope="session")
def hier_runs():
    """Per-seed hierarchy experiment: comodulation vs attention fine-tuning
    with calibration, dimensionality, and corruption-robustness reports."""
    from comodnet.experiment import collect_decoder_activity

    runs = []
    for seed in SEEDS:
        cfg = RunConfig(seeds=(seed,), **HIER_PRESET).validate()
        dataset = build_dataset(cfg, seed)
        model = build_run_model(cfg, seed)
        pretrain(cfg, model, dataset, seed)
        state = {k: v.copy() for k, v in model.state_arrays().items()}

        finetune(cfg, model, dataset, seed, method="comod")
        rep_c = evaluate(model, dataset, cfg, "test", "comod_test", seed,
                         level="fine")
        ece_c = ece(rep_c["confidences"], rep_c["correct"], 15).ece

        attn_model = build_run_model(cfg, seed)
        attn_model.load_state(state)
        finetune(cfg, attn_model, dataset, seed, method="attention")
        rep_a = evaluate(attn_model, dataset, cfg, "test", "attention", seed,
                         level="fine")
        ece_a = ece(rep_a["confidences"], rep_a["correct"], 15).ece

        x_te, _, y_fine = dataset.subset("test")
        act_c = collect_decoder_activity(model, x_te, 1, "comod_test", cfg,
                                         seed, "fine")
        act_a = collect_decoder_activity(attn_model, x_te, 1, "attention",
                                         cfg, seed, "fine")
        dims = dict(
            pca_c=pca_spectrum(act_c).dims_to_threshold,
            pca_a=pca_spectrum(act_a).dims_to_threshold,
            lda_c=lda_spectrum(act_c, y_fine).dims_to_threshold,
            lda_a=lda_spectrum(act_a, y_fine).dims_to_threshold)

        sweep = robustness_sweep(model, dataset, cfg, seed, max_samples=150)
        runs.append(dict(seed=seed, ece_comod=ece_c, ece_attention=ece_a,
                         sweep=sweep, **dims))
    return runs


# criterion: comodulation fine-tuning gains >= 2 F1 points over the frozen
# pretrained readout (5-seed average) and stays within 1 point of attention.

def test_finetuning_benefit_over_frozen_readout(attr_runs):
    runs = attr_runs["runs"]
    base = np.mean([r["base"] for r in runs])
    comod = np.mean([r["comod"] for r in runs])
    attn = np.mean([r["attention"] for r in runs])
    detail = " ".join(
        f"seed{r['seed']}:{r['base']:.3f}/{r['comod']:.3f}/{r['attention']:.3f}"
        for r in runs)
    assert 100 * (comod - base) >= 2.0, \
        f"comod {comod:.3f} vs frozen readout {base:.3f} ({detail})"
    assert 100 * (comod - attn) >= -1.0, \
        f"comod {comod:.3f} vs attention {attn:.3f} ({detail})"


# criterion: gains target informative units -- positive Spearman correlation
# between per-unit d-prime and mean normalized gain, permutation p < 0.01 in
# at least 4 of 5 seeds, full experiment under 20 CPU-minutes.

def test_gain_targets_informative_units(attr_runs):
    runs = attr_runs["runs"]
    passing = [r for r in runs if r["rho"] > 0 and r["pval"] < 0.01]
    detail = " ".join(f"seed{r['seed']}:rho={r['rho']:.2f},p={r['pval']:.4f}"
                      for r in runs)
    assert len(passing) >= 4, detail
    assert attr_runs["elapsed"] < 20 * 60


# criterion: calibration direction -- mean comodulation ECE across 5 seeds is
# at most the attention ECE; a tie within 0.005 passes with a note.

def test_calibration_direction(hier_runs, artifacts_dir, capsys):
    mean_c = np.mean([r["ece_comod"] for r in hier_runs])
    mean_a = np.mean([r["ece_attention"] for r in hier_runs])
    scatter = artifacts_dir / "calibration_ece_per_seed.csv"
    with open(scatter, "w") as f:
        f.write("seed,ece_comod,ece_attention\n")
        for r in hier_runs:
            f.write(f"{r['seed']},{r['ece_comod']!r},{r['ece_attention']!r}\n")
    detail = (f"mean comod {mean_c:.4f} vs attention {mean_a:.4f}; "
              f"per-seed scatter at {scatter}")
    if mean_c > mean_a:
        assert mean_c - mean_a <= 0.005, detail
        with capsys.disabled():
            print(f"\n[note] calibration tie within 0.005: {detail}")
    assert mean_c <= mean_a + 0.005, detail


# criterion (directional, non-blocking): dims-to-80% ratio comod/attention
# >= 1 under PCA and <= 1 under LDA for the seed majority.

def test_lda_vs_pca_dimensionality_direction(hier_runs, artifacts_dir, capsys):
    report = artifacts_dir / "dims_to_80_per_seed.csv"
    with open(report, "w") as f:
        f.write("seed,pca_comod,pca_attention,lda_comod,lda_attention\n")
        for r in hier_runs:
            f.write(f"{r['seed']},{r['pca_c']},{r['pca_a']},"
                    f"{r['lda_c']},{r['lda_a']}\n")
    pca_ok = sum(r["pca_c"] >= r["pca_a"] for r in hier_runs)
    lda_ok = sum(r["lda_c"] <= r["lda_a"] for r in hier_runs)
    majority = len(hier_runs) // 2 + 1
    if pca_ok < majority or lda_ok < majority:
        with capsys.disabled():
            print(f"\n[non-blocking] dimensionality direction reversed: "
                  f"PCA >= in {pca_ok}/{len(hier_runs)} seeds, "
                  f"LDA <= in {lda_ok}/{len(hier_runs)}; see {report}")
    assert report.exists()


# criterion: robustness sweep -- severity-0 handled above (blocking, exact);
# the comod-minus-attention trend over severity is directional/non-blocking:
# non-decreasing for at least one corruption kind in the seed majority.

def test_robustness_difference_trend(hier_runs, capsys):
    kinds = sorted({row["kind"] for row in hier_runs[0]["sweep"]})
    per_seed_ok = []
    for r in hier_runs:
        ok_kinds = []
        for kind in kinds:
            diffs = [row["comod_minus_attention"] for row in
                     sorted((x for x in r["sweep"] if x["kind"] == kind
                             and x["mode"] == "comod_test_fixed"),
                            key=lambda x: x["severity"])]
            if all(b >= a - 1e-12 for a, b in zip(diffs, diffs[1:])):
                ok_kinds.append(kind)
        per_seed_ok.append(ok_kinds)
    majority = len(hier_runs) // 2 + 1
    hit = sum(bool(k) for k in per_seed_ok)
    if hit < majority:
        with capsys.disabled():
            print(f"\n[non-blocking] no corruption kind shows a "
                  f"non-decreasing comod-attention gap in the seed majority: "
                  f"{per_seed_ok}")
    for r in hier_runs:
        assert r["sweep"], "robustness sweep produced no rows"
