"""Command-line entry point: dataset generation, pretraining, fine-tuning,
evaluation, robustness sweeps, analysis, and activation export.

Exit codes: 0 ok, 2 configuration error, 3 data/artifact error, 4 numerical
failure. Progress goes to standard error; machine-readable output only to
files under the output directory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .checkpoint import CheckpointError
from .data import DataError, save_dataset
from .experiment import (
    FORWARD_MODES,
    ConfigError,
    MetricLog,
    NumericalError,
    build_dataset,
    build_run_model,
    collect_decoder_activity,
    compute_fixed_task_gains,
    config_hash,
    evaluate,
    finetune,
    load_config,
    load_model_state,
    mode_matrix,
    pretrain,
    reliability_report,
    render_config,
    robustness_sweep,
    save_model,
    write_eval_csv,
    write_manifest,
    write_mode_matrix_csv,
    write_reliability_csv,
    write_robustness_csv,
)
from .metrics import informativeness_dprime, informativeness_grad, lda_spectrum, pca_spectrum
from .model import model_forward
from .modulation import dump_gains_csv, gain_sparsity

SNAPSHOT_FRACTIONS = (0.25, 0.5)  # extra pretraining-length checkpoints


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _jobs(args) -> int:
    jobs = max(1, getattr(args, "jobs", 1) or 1)
    cap = os.environ.get("COMODNET_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"COMODNET_THREADS must be an integer, got {cap!r}")
    return jobs


def _require_config(args):
    if not args.config:
        raise ConfigError("this command needs --config")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return load_config(path)


def _seeds(cfg, args):
    return (args.seed,) if args.seed is not None else cfg.seeds


def _run_root(args, cfg, seeds, probe_names) -> Path:
    """Per-config run root; a fresh timestamped sibling is used instead of
    touching existing artifacts unless --overwrite was given."""
    root = Path(args.out) / f"run-{config_hash(cfg)}"
    if not args.overwrite:
        conflict = any((root / f"seed{s}" / name).exists()
                       for s in seeds for name in probe_names)
        conflict = conflict or any((root / name).exists() for name in probe_names)
        if conflict:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            fresh = Path(args.out) / f"run-{config_hash(cfg)}-{stamp}"
            n = 2
            while fresh.exists():
                fresh = Path(args.out) / f"run-{config_hash(cfg)}-{stamp}-{n}"
                n += 1
            _log(args, f"existing artifacts in {root}; writing to {fresh} "
                       "(use --overwrite to replace)")
            root = fresh
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(render_config(cfg))
    return root


def _seed_dir(root: Path, seed: int) -> Path:
    d = root / f"seed{seed}"
    d.mkdir(exist_ok=True)
    return d


def _map_seeds(fn, seeds, jobs):
    if jobs <= 1 or len(seeds) <= 1:
        for s in seeds:
            fn(s)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for future in [pool.submit(fn, s) for s in seeds]:
            future.result()


def _load_run_model(cfg, seed_dir: Path, seed, names=("finetuned.ckpt", "pretrained.ckpt")):
    for name in names:
        path = seed_dir / name
        if path.exists():
            model = build_run_model(cfg, seed)
            load_model_state(path, model)
            return model, name
    raise DataError(f"no checkpoint ({' or '.join(names)}) in {seed_dir}")


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    root = _run_root(args, cfg, seeds, ["dataset.bin"])
    for seed in seeds:
        d = _seed_dir(root, seed)
        save_dataset(d / "dataset.bin", build_dataset(cfg, seed))
        _log(args, f"seed {seed}: wrote {d / 'dataset.bin'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    root = _run_root(args, cfg, seeds, ["pretrained.ckpt"])

    def one(seed):
        t0 = time.time()
        d = _seed_dir(root, seed)
        dataset = build_dataset(cfg, seed)
        model = build_run_model(cfg, seed)
        log = MetricLog()
        snapshots = pretrain(cfg, model, dataset, seed, log=log,
                             snapshot_fractions=SNAPSHOT_FRACTIONS)
        save_model(d / "pretrained.ckpt", model)
        for fraction, state in snapshots.items():
            checkpoint.save_arrays(d / f"pretrained_{int(fraction * 100)}.ckpt", state)
        log.write_csv(d / "metrics_pretrain.csv")
        write_manifest(d / "manifest_pretrain.txt", cfg, seed, time.time() - t0,
                       {"phase": "pretrain"})
        _log(args, f"seed {seed}: pretrained in {time.time() - t0:.1f}s")

    _map_seeds(one, seeds, _jobs(args))
    return 0


def cmd_finetune(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    root = _run_root(args, cfg, seeds, ["finetuned.ckpt"])

    def one(seed):
        t0 = time.time()
        d = _seed_dir(root, seed)
        dataset = build_dataset(cfg, seed)
        model, _ = _load_run_model(cfg, d, seed, names=("pretrained.ckpt",))
        log = MetricLog()
        finetune(cfg, model, dataset, seed, log=log)
        gain_rows = compute_fixed_task_gains(model, dataset, cfg, seed)
        save_model(d / "finetuned.ckpt", model)
        log.write_csv(d / "metrics_finetune.csv")
        dump_gains_csv(d / "gains.csv", gain_rows)
        model.controller.dump_contexts_csv(d / "contexts.csv")
        write_manifest(d / "manifest_finetune.txt", cfg, seed, time.time() - t0,
                       {"phase": "finetune", "method": cfg.method})
        _log(args, f"seed {seed}: fine-tuned ({cfg.method}) in {time.time() - t0:.1f}s")

    _map_seeds(one, seeds, _jobs(args))
    return 0


def cmd_eval(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    modes = args.modes.split(",") if args.modes else ["plain", "attention",
                                                     "comod_test", "comod_test_fixed"]
    for mode in modes:
        if mode not in FORWARD_MODES:
            raise ConfigError(f"unknown forward mode {mode!r}")
    root = _run_root(args, cfg, seeds, ["eval.csv"])

    def one(seed):
        t0 = time.time()
        d = _seed_dir(root, seed)
        dataset = build_dataset(cfg, seed)
        model, source = _load_run_model(cfg, d, seed)
        reports = {}
        for split in ("val", "test"):
            for mode in modes:
                report = evaluate(model, dataset, cfg, split, mode, seed)
                reports[(split, mode)] = report
                if split == "test":
                    write_reliability_csv(d / f"reliability_{mode}.csv",
                                          reliability_report(report))
        write_eval_csv(d / "eval.csv", reports)
        write_manifest(d / "manifest_eval.txt", cfg, seed, time.time() - t0,
                       {"phase": "eval", "checkpoint": source,
                        "modes": ",".join(modes)})
        _log(args, f"seed {seed}: evaluated {len(modes)} modes from {source}")

    _map_seeds(one, seeds, _jobs(args))
    return 0


def cmd_sweep(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    modes = tuple(args.modes.split(",")) if args.modes else ("attention",
                                                            "comod_test_fixed")
    for mode in modes:
        if mode not in FORWARD_MODES:
            raise ConfigError(f"unknown forward mode {mode!r}")
    root = _run_root(args, cfg, seeds, ["robustness.csv"])

    def one(seed):
        t0 = time.time()
        d = _seed_dir(root, seed)
        dataset = build_dataset(cfg, seed)
        model, source = _load_run_model(cfg, d, seed)
        rows = robustness_sweep(model, dataset, cfg, seed, modes=modes)
        write_robustness_csv(d / "robustness.csv", rows)
        write_manifest(d / "manifest_sweep.txt", cfg, seed, time.time() - t0,
                       {"phase": "sweep", "checkpoint": source})
        _log(args, f"seed {seed}: robustness sweep in {time.time() - t0:.1f}s")

    _map_seeds(one, seeds, _jobs(args))
    return 0


def cmd_analyze(args) -> int:
    if not args.run_dirs:
        raise ConfigError("analyze needs at least one run directory")
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        config_path = run_dir / "config.ini"
        if not config_path.exists():
            raise DataError(f"{run_dir}: no config.ini (not a run directory?)")
        cfg = load_config(config_path)
        seed_dirs = sorted(run_dir.glob("seed*"))
        if not seed_dirs:
            raise DataError(f"{run_dir}: no seed directories")
        rows_per_seed = {}
        for d in seed_dirs:
            seed = int(d.name[len("seed"):])
            if not (d / "pretrained.ckpt").exists():
                raise DataError(f"{d}: no pretrained checkpoint")
            arrays = checkpoint.load_arrays(d / "pretrained.ckpt")
            state = {k: v for k, v in arrays.items()
                     if not k.startswith("task_gains/")}
            dataset = build_dataset(cfg, seed)
            rows_per_seed[seed] = mode_matrix(cfg, dataset, state, seed)
            _log(args, f"{d}: mode matrix done")
        out_dir = run_dir / "analysis"
        if out_dir.exists() and not args.overwrite:
            out_dir = run_dir / f"analysis-{time.strftime('%Y%m%d-%H%M%S')}"
        out_dir.mkdir(exist_ok=True)
        write_mode_matrix_csv(out_dir / "mode_matrix.csv", rows_per_seed)
    return 0


def _pca_project_2d(act: np.ndarray) -> np.ndarray:
    x = np.asarray(act, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    return xc @ vecs[:, ::-1][:, :2]


def cmd_export_activations(args) -> int:
    cfg = _require_config(args)
    seeds = _seeds(cfg, args)
    root = _run_root(args, cfg, seeds, ["activations.bin"])
    cap = 512

    def one(seed):
        d = _seed_dir(root, seed)
        dataset = build_dataset(cfg, seed)
        model, source = _load_run_model(cfg, d, seed)
        attribute = hasattr(dataset, "planted_map")
        sub = dataset.subset("test")
        x = sub[0][:cap]
        labels = (sub[1][:, 0] if attribute else sub[2])[:cap]
        head = "attr" if attribute else "fine"
        task = 0 if attribute else 1
        gain_rows = compute_fixed_task_gains(model, dataset, cfg, seed)

        acts = {}
        for mode in ("attention", "comod_test"):
            acts[mode] = collect_decoder_activity(model, x, task, mode, cfg,
                                                  seed, head)
        arrays = {f"activity/{m}": a for m, a in acts.items()}
        arrays["labels"] = np.asarray(labels)
        checkpoint.save_arrays(d / "activations.bin", arrays)

        with open(d / "spectrum.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["analysis", "mode", "dim", "ratio", "cumulative"])
            for mode, act in acts.items():
                for analysis, report in (("pca", pca_spectrum(act)),
                                         ("lda", lda_spectrum(act, labels))):
                    cum = 0.0
                    for dim, ratio in enumerate(report.ratios, start=1):
                        cum += float(ratio)
                        w.writerow([analysis, mode, dim, repr(float(ratio)),
                                    repr(cum)])

        with open(d / "embedding.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", "x", "y", "label"])
            for mode, act in acts.items():
                xy = _pca_project_2d(act)
                for (px, py), lab in zip(xy, labels):
                    w.writerow([mode, repr(float(px)), repr(float(py)), int(lab)])

        # informativeness vs fixed per-task gain, on pre-gain activity
        plain_act = collect_decoder_activity(model, x, task, "plain", cfg,
                                             seed, head)
        with open(d / "gain_info.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "unit", "informativeness", "gain"])
            for t, _, norm in gain_rows:
                if attribute:
                    scores = informativeness_dprime(plain_act, sub[1][:cap, t])
                else:
                    scores = informativeness_grad(model.heads[head].w.value,
                                                  plain_act, labels)
                for unit, (s, g) in enumerate(zip(scores, norm)):
                    w.writerow([t, unit, repr(float(s)), repr(float(g))])

        with open(d / "sparsity.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "threshold", "count"])
            for t, raw, _ in gain_rows:
                top = float(np.abs(raw).max()) or 1.0
                thresholds = [top * i / 20 for i in range(1, 21)]
                for thr, count in zip(thresholds, gain_sparsity(raw, thresholds)):
                    w.writerow([t, repr(thr), count])
        _log(args, f"seed {seed}: exported activations from {source}")

    _map_seeds(one, seeds, _jobs(args))
    return 0


# --- argument parsing ---------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comodnet",
        description="Multi-task networks with stochastic gain comodulation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_out=True, modes_flag=False):
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration file")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="run a single seed override")
        if modes_flag:
            p.add_argument("--modes", help="comma-separated forward modes")
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing artifacts in place")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel seeds (capped by COMODNET_THREADS)")
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("pretrain", cmd_pretrain)
    add("finetune", cmd_finetune)
    add("eval", cmd_eval, modes_flag=True)
    add("sweep", cmd_sweep, modes_flag=True)
    add("export-activations", cmd_export_activations)
    p = sub.add_parser("analyze")
    p.add_argument("run_dirs", nargs="*", help="finished run directories")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main(None))
