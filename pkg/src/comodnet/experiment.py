"""Experiment orchestration: run configuration, pretraining, fine-tuning,
evaluation across forward modes, fixed per-task gain estimation, and the
corruption-robustness sweep.

Every number an experiment emits is a pure function of (config, seed); all
random streams are derived from the run seed with distinct stream tags.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (
    CORRUPTION_KINDS,
    AttributeDataset,
    CorruptionSpec,
    corrupt,
    gen_attribute_dataset,
    gen_hierarchy_dataset,
    load_cifar100_binary,
)
from .metrics import classification_stats, ece, multiclass_accuracy
from .model import (
    FORWARD_MODES,
    ArchitectureSpec,
    Model,
    build_model,
    model_forward,
    partition_parameters,
)
from .modulation import ModulatorConfig
from .nn import (
    Adam,
    loss_multi_attribute_bce,
    loss_softmax_ce,
    params_hash,
    softmax,
)

F32 = np.float32

# stream tags for deriving independent seeded generators from one run seed
_STREAM_MODEL = 1
_STREAM_PRETRAIN = 2
_STREAM_FINETUNE = 3
_STREAM_TRAIN_MOD = 4
_STREAM_EVAL = 5
_STREAM_GAINS = 6
_STREAM_CORRUPT = 7

_MODE_IDS = {m: i for i, m in enumerate(FORWARD_MODES)}

FINETUNE_METHODS = ("comod", "attention", "head_only")


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Training diverged (non-finite loss or gradient)."""


# --- run configuration ------------------------------------------------------

@dataclass
class RunConfig:
    # dataset
    dataset_kind: str = "attribute"
    n_tasks: int = 6
    n_samples: int = 3000
    image_size: int = 16
    patch_size: int = 4
    noise_rate: float = 0.0
    n_coarse: int = 4
    n_fine: int = 12
    channels: int = 3
    data_path: str = ""
    # architecture
    backbone_channels: tuple = (8, 12, 16)
    backbone_pools: tuple = (True, True, True)
    encoder_channels: int = 16
    processing_channels: int = 16
    decoder_units: int = 64
    wiring: str = "base"
    sigmoid_controller: bool = False
    controller_unit_init: bool = True
    controller_hidden: int = 0  # 0 selects the default sizing
    # modulator
    variance: float = 0.4
    draws: int = 10
    # pretrain
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-4
    pretrain_epochs: int = 4
    pretrain_controller: str = "joint"
    # finetune
    finetune_batch: int = 64
    finetune_lr: float = 0.02
    finetune_epochs: int = 1
    method: str = "comod"
    train_with_fluctuations: bool = True
    eval_every: int = 10
    fixed_task_gains: bool = False
    # run
    seeds: tuple = (0, 1, 2, 3, 4)

    def validate(self):
        if self.dataset_kind not in ("attribute", "hierarchy", "cifar100"):
            raise ConfigError(f"unknown dataset kind {self.dataset_kind!r}")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.pretrain_batch < 1 or self.finetune_batch < 1:
            raise ConfigError("batch sizes must be at least 1")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.method not in FINETUNE_METHODS:
            raise ConfigError(f"unknown fine-tuning method {self.method!r}")
        if self.pretrain_controller not in ("joint", "frozen"):
            raise ConfigError(
                f"pretrain controller must be joint or frozen, got {self.pretrain_controller!r}")
        if self.wiring not in ("base", "residual"):
            raise ConfigError(f"unknown wiring {self.wiring!r}")
        if len(self.backbone_channels) != len(self.backbone_pools):
            raise ConfigError("backbone channel and pool lists must align")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.variance <= 0 or self.draws < 2:
            raise ConfigError("modulator needs positive variance and at least 2 draws")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        return self


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_tuple(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _parse_bool_tuple(s):
    return tuple(_parse_bool(x) for x in s.split(",") if x.strip())


# (section, key) -> (field name, parser)
_SCHEMA = {
    "dataset": {
        "kind": ("dataset_kind", str),
        "n_tasks": ("n_tasks", int),
        "n_samples": ("n_samples", int),
        "image_size": ("image_size", int),
        "patch_size": ("patch_size", int),
        "noise_rate": ("noise_rate", float),
        "n_coarse": ("n_coarse", int),
        "n_fine": ("n_fine", int),
        "channels": ("channels", int),
        "path": ("data_path", str),
    },
    "architecture": {
        "backbone_channels": ("backbone_channels", _parse_int_tuple),
        "backbone_pools": ("backbone_pools", _parse_bool_tuple),
        "encoder_channels": ("encoder_channels", int),
        "processing_channels": ("processing_channels", int),
        "decoder_units": ("decoder_units", int),
        "wiring": ("wiring", str),
        "sigmoid_controller": ("sigmoid_controller", _parse_bool),
        "controller_unit_init": ("controller_unit_init", _parse_bool),
        "controller_hidden": ("controller_hidden", int),
    },
    "modulator": {
        "variance": ("variance", float),
        "draws": ("draws", int),
    },
    "pretrain": {
        "batch_size": ("pretrain_batch", int),
        "lr": ("pretrain_lr", float),
        "epochs": ("pretrain_epochs", int),
        "controller": ("pretrain_controller", str),
    },
    "finetune": {
        "batch_size": ("finetune_batch", int),
        "lr": ("finetune_lr", float),
        "epochs": ("finetune_epochs", int),
        "method": ("method", str),
        "train_with_fluctuations": ("train_with_fluctuations", _parse_bool),
        "eval_every": ("eval_every", int),
        "fixed_task_gains": ("fixed_task_gains", _parse_bool),
    },
    "run": {
        "seeds": ("seeds", _parse_int_tuple),
    },
}


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned key-value run configuration; unknown sections or
    keys are rejected so that typos cannot silently fall back to defaults."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            field_name, parse = _SCHEMA[section][key]
            try:
                values[field_name] = parse(raw)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"[{section}] {key}: {e}") from e
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _render_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form; hashing and config copies both use this."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (field_name, _) in keys.items():
            out.write(f"{key} = {_render_value(getattr(cfg, field_name))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:12]


# --- dataset / model construction -------------------------------------------

def build_dataset(cfg: RunConfig, seed: int):
    if cfg.dataset_kind == "attribute":
        return gen_attribute_dataset(cfg.n_tasks, cfg.n_samples,
                                     image_size=cfg.image_size,
                                     patch_size=cfg.patch_size,
                                     noise_rate=cfg.noise_rate, seed=seed)
    if cfg.dataset_kind == "hierarchy":
        return gen_hierarchy_dataset(cfg.n_coarse, cfg.n_fine, cfg.n_samples,
                                     image_size=cfg.image_size,
                                     channels=cfg.channels, seed=seed)
    if not cfg.data_path:
        raise ConfigError("cifar100 dataset needs [dataset] path")
    return load_cifar100_binary(cfg.data_path, seed=seed)


def build_architecture(cfg: RunConfig) -> ArchitectureSpec:
    if cfg.dataset_kind == "attribute":
        in_channels, image_size = 1, cfg.image_size
        n_tasks = cfg.n_tasks
        heads = {"attr": cfg.n_tasks}
    else:
        in_channels = 3 if cfg.dataset_kind == "cifar100" else cfg.channels
        image_size = 32 if cfg.dataset_kind == "cifar100" else cfg.image_size
        n_coarse = 20 if cfg.dataset_kind == "cifar100" else cfg.n_coarse
        n_fine = 100 if cfg.dataset_kind == "cifar100" else cfg.n_fine
        n_tasks = 2  # task 0: coarse classification, task 1: fine
        heads = {"coarse": n_coarse, "fine": n_fine}
    return ArchitectureSpec(
        in_channels=in_channels, image_size=image_size, n_tasks=n_tasks,
        backbone_channels=tuple(cfg.backbone_channels),
        backbone_pools=tuple(cfg.backbone_pools),
        encoder_channels=cfg.encoder_channels,
        processing_channels=cfg.processing_channels,
        decoder_units=cfg.decoder_units, heads=heads, wiring=cfg.wiring,
        controller_hidden=cfg.controller_hidden or None,
        sigmoid_controller=cfg.sigmoid_controller,
        controller_unit_init=cfg.controller_unit_init)


def build_run_model(cfg: RunConfig, seed: int) -> Model:
    return build_model(build_architecture(cfg), [seed, _STREAM_MODEL])


def _mod_config(cfg: RunConfig) -> ModulatorConfig:
    return ModulatorConfig(variance=cfg.variance, draws=cfg.draws)


def _is_attribute(dataset) -> bool:
    return isinstance(dataset, AttributeDataset)


# --- checkpoints -------------------------------------------------------------

def save_model(path, model: Model) -> None:
    arrays = dict(model.state_arrays())
    for task, gains in model.task_gains.items():
        arrays[f"task_gains/{task}"] = np.asarray(gains, dtype=F32)
    checkpoint.save_arrays(path, arrays)


def load_model_state(path, model: Model) -> None:
    arrays = checkpoint.load_arrays(path)
    gains = {}
    params = {}
    for name, arr in arrays.items():
        if name.startswith("task_gains/"):
            gains[int(name.split("/", 1)[1])] = arr.astype(F32)
        else:
            params[name] = arr
    model.load_state(params)
    model.task_gains = gains


# --- metric series ------------------------------------------------------------

class MetricLog:
    """Row-oriented metric series; one CSV row per logged value."""

    COLUMNS = ("phase", "epoch", "batch", "split", "metric", "value", "seed")

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, phase, epoch, batch, split, metric, value, seed):
        self.rows.append((phase, int(epoch), int(batch), split, metric,
                          float(value), int(seed)))

    def series(self, metric: str, phase: str | None = None):
        return [r for r in self.rows
                if r[4] == metric and (phase is None or r[0] == phase)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for phase, epoch, batch, split, metric, value, seed in self.rows:
                w.writerow([phase, epoch, batch, split, metric, repr(value), seed])


def write_manifest(path, cfg: RunConfig, seed: int, wall_time: float,
                   extra: dict | None = None) -> None:
    from . import __version__
    lines = [
        f"config_hash {config_hash(cfg)}",
        f"seed {seed}",
        f"version {__version__}",
        f"wall_time_s {wall_time:.3f}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- training -----------------------------------------------------------------

def _batches(n: int, size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays().items()}


def pretrain(cfg: RunConfig, model: Model, dataset, seed: int,
             log: MetricLog | None = None, snapshot_fractions=()):
    """Train all network parameters on the primary objective: the full
    attribute loss (attribute mode) or the coarse-class loss (hierarchy).

    The controller joins the optimization (through attention-mode forwards)
    unless configured frozen. On divergence the last epoch-end state is
    restored before raising. snapshot_fractions asks for copies of the state
    at those fractions of the epoch budget (for pretraining-length sweeps);
    the captured states come back as {fraction: arrays}."""
    attribute = _is_attribute(dataset)
    joint = cfg.pretrain_controller == "joint"
    partition_parameters(model, "pretrain", pretrain_controller=cfg.pretrain_controller)
    opt = Adam(model.all_params(), lr=cfg.pretrain_lr)
    rng = np.random.default_rng([seed, _STREAM_PRETRAIN])
    if attribute:
        x_all, y_all = dataset.subset("train")
        head = "attr"
    else:
        x_all, y_all, _ = dataset.subset("train")
        head = "coarse"
    snap_epochs = {max(1, math.ceil(f * cfg.pretrain_epochs)): f
                   for f in snapshot_fractions}
    snapshots: dict[float, dict] = {}
    last_good = _snapshot(model)
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for bi, idx in enumerate(_batches(len(x_all), cfg.pretrain_batch, rng)):
            xb, yb = x_all[idx], y_all[idx]
            if joint:
                task = bi % model.spec.n_tasks if attribute else 0
                mode = "attention"
            else:
                task, mode = 0, "plain"
            logits, info = model_forward(model, xb, task, mode, head)
            if attribute:
                loss, dlog = loss_multi_attribute_bce(logits, yb)
            else:
                loss, dlog = loss_softmax_ce(logits, yb)
            if not math.isfinite(loss):
                model.load_state(last_good)
                raise NumericalError(
                    f"pretraining diverged at epoch {epoch} batch {bi}")
            model.zero_grads()
            d_gain = model.backward_from_logits(dlog, head, info["dec_act"], None)
            if mode == "attention":
                model.controller.backward(d_gain)
            opt.step()
            losses.append(loss)
        last_good = _snapshot(model)
        if epoch + 1 in snap_epochs:
            snapshots[snap_epochs[epoch + 1]] = _snapshot(model)
        if log is not None:
            log.add("pretrain", epoch, -1, "train", "loss",
                    float(np.mean(losses)), seed)
            report = evaluate(model, dataset, cfg, "val", "plain", seed,
                              level="coarse", max_samples=512)
            metric = "macro_f1" if attribute else "accuracy"
            log.add("pretrain", epoch, -1, "val", metric, report[metric], seed)
    return snapshots


def _finetune_setup(cfg: RunConfig, model: Model, attribute: bool, method: str):
    """Trainable scope, loss head, and forward mode for a fine-tuning method."""
    if method == "head_only":
        head = "attr" if attribute else "fine"
        partition_parameters(model, "finetune", "head_only", new_head=head)
        return head, "plain"
    if attribute:
        partition_parameters(model, "finetune", "controller")
        head = "attr"
    else:
        partition_parameters(model, "finetune", "controller+head", new_head="fine")
        head = "fine"
    if method == "comod" and cfg.train_with_fluctuations:
        return head, "comod_train"
    return head, "attention"


_EVAL_MODE_FOR_METHOD = {"comod": "comod_test", "attention": "attention",
                         "head_only": "plain"}


def finetune(cfg: RunConfig, model: Model, dataset, seed: int,
             log: MetricLog | None = None, method: str | None = None) -> None:
    """Fine-tune with the network frozen.

    attribute mode trains the controller only, one binary objective per task;
    hierarchy mode trains the controller plus the new fine-class head
    (head_only trains just the head as the readout-transfer baseline). The
    frozen parameter set is hash-verified before and after."""
    method = method or cfg.method
    if method not in FINETUNE_METHODS:
        raise ConfigError(f"unknown fine-tuning method {method!r}")
    attribute = _is_attribute(dataset)
    head, mode = _finetune_setup(cfg, model, attribute, method)
    trainable = [p for p in model.all_params() if p.trainable]
    frozen = [p for p in model.all_params() if not p.trainable]
    frozen_before = params_hash(frozen)
    opt = Adam(trainable, lr=cfg.finetune_lr)
    rng = np.random.default_rng([seed, _STREAM_FINETUNE])
    rng_mod = np.random.default_rng([seed, _STREAM_TRAIN_MOD])
    mod = _mod_config(cfg)
    eval_mode = _EVAL_MODE_FOR_METHOD[method]
    if attribute:
        x_all, y_all = dataset.subset("train")
        tasks = range(model.spec.n_tasks)
    else:
        x_all, _, y_fine = dataset.subset("train")
        tasks = (1,)
    step = 0
    for epoch in range(cfg.finetune_epochs):
        # interleave tasks batch-wise so the shared controller layers see
        # every task throughout the epoch instead of sequentially
        for idx in _batches(len(x_all), cfg.finetune_batch, rng):
            for task in tasks:
                xb = x_all[idx]
                fwd_task = 0 if method == "head_only" else task
                logits, info = model_forward(model, xb, fwd_task, mode, head,
                                             mod_config=mod, rng=rng_mod)
                if attribute:
                    if method == "head_only":
                        loss, dlog = loss_multi_attribute_bce(logits, y_all[idx])
                    else:
                        col, dlog = logits[:, [task]], np.zeros_like(logits)
                        loss, g = loss_multi_attribute_bce(col, y_all[idx][:, [task]])
                        dlog[:, [task]] = g
                else:
                    loss, dlog = loss_softmax_ce(logits, y_fine[idx])
                if not math.isfinite(loss):
                    raise NumericalError(
                        f"fine-tuning diverged at epoch {epoch} step {step}")
                model.zero_grads()
                dec_gains = info["gains_norm"] if mode == "comod_train" else None
                d_gain = model.backward_from_logits(dlog, head, info["dec_act"],
                                                    dec_gains)
                if mode == "comod_train":
                    model.controller.backward(info["m_final"] * d_gain)
                elif mode == "attention":
                    model.controller.backward(d_gain)
                opt.step()
                step += 1
                if log is not None:
                    log.add("finetune", epoch, step, "train", "loss", loss, seed)
                    if epoch == 0 and step % cfg.eval_every == 0:
                        report = evaluate(model, dataset, cfg, "val", eval_mode,
                                          seed, max_samples=256)
                        metric = "macro_f1" if attribute else "accuracy"
                        log.add("finetune", epoch, step, "val", metric,
                                report[metric], seed)
    if params_hash(frozen) != frozen_before:
        raise RuntimeError("frozen parameters drifted during fine-tuning")


# --- gain estimation ----------------------------------------------------------

def compute_fixed_task_gains(model: Model, dataset, cfg: RunConfig, seed: int,
                             tasks=None, max_samples: int = 256):
    """Estimate decoder gains on the training split and store the per-task
    average on the model for the fixed-gain evaluation modes.

    Returns [(task, mean raw gains, mean normalized gains)] for export."""
    attribute = _is_attribute(dataset)
    if tasks is None:
        tasks = range(model.spec.n_tasks) if attribute else (1,)
    head = "attr" if attribute else "fine"
    sub = dataset.subset("train")
    x_all = sub[0][:max_samples]
    mod = _mod_config(cfg)
    rows = []
    for task in tasks:
        rng = np.random.default_rng([seed, _STREAM_GAINS, task])
        raws, norms = [], []
        for idx in _batches(len(x_all), 128):
            _, info = model_forward(model, x_all[idx], task, "comod_test", head,
                                    mod_config=mod, rng=rng)
            raws.append(info["gains_raw"])
            norms.append(info["gains_norm"])
        raw_mean = np.concatenate(raws).mean(axis=0)
        norm_mean = np.concatenate(norms).mean(axis=0).astype(F32)
        model.task_gains[task] = norm_mean
        rows.append((task, raw_mean, norm_mean))
    return rows


def ensure_task_gains(model: Model, dataset, cfg: RunConfig, seed: int,
                      refresh: bool = False) -> None:
    if refresh or not model.task_gains:
        compute_fixed_task_gains(model, dataset, cfg, seed)


# --- evaluation ---------------------------------------------------------------

def _eval_rng(seed: int, mode: str, task: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_EVAL, _MODE_IDS[mode], task])


def _forward_eval(model, x, task, mode, head, cfg, rng):
    logits_parts = []
    mod = _mod_config(cfg)
    for idx in _batches(len(x), 256):
        logits, _ = model_forward(model, x[idx], task, mode, head,
                                  mod_config=mod, rng=rng)
        logits_parts.append(logits)
    return np.concatenate(logits_parts)


def _evaluate_attribute_arrays(model, x, y, cfg, mode, seed):
    stats = []
    confidences = []
    correct = []
    for task in range(model.spec.n_tasks):
        rng = _eval_rng(seed, mode, task)
        logits = _forward_eval(model, x, task, mode, "attr", cfg, rng)
        col = logits[:, task].astype(np.float64)
        pred = (col > 0).astype(np.int64)
        stats.append(classification_stats(pred, y[:, task]))
        p = 1.0 / (1.0 + np.exp(-col))
        confidences.append(np.maximum(p, 1.0 - p))
        correct.append(pred == y[:, task])
    return {
        "per_task": stats,
        "macro_precision": float(np.mean([s.precision for s in stats])),
        "macro_recall": float(np.mean([s.recall for s in stats])),
        "macro_f1": float(np.mean([s.f1 for s in stats])),
        "macro_accuracy": float(np.mean([s.accuracy for s in stats])),
        "accuracy": float(np.mean([s.accuracy for s in stats])),
        "confidences": np.concatenate(confidences),
        "correct": np.concatenate(correct).astype(np.float64),
    }


def _evaluate_hierarchy_arrays(model, x, y_coarse, y_fine, cfg, mode, seed,
                               level="fine"):
    head, task, y = ("fine", 1, y_fine) if level == "fine" else ("coarse", 0, y_coarse)
    rng = _eval_rng(seed, mode, task)
    logits = _forward_eval(model, x, task, mode, head, cfg, rng)
    pred = logits.argmax(axis=1)
    probs = softmax(logits.astype(np.float64))
    return {
        "accuracy": multiclass_accuracy(pred, y),
        "confidences": probs.max(axis=1),
        "correct": (pred == y).astype(np.float64),
    }


def evaluate(model: Model, dataset, cfg: RunConfig, split: str, mode: str,
             seed: int, level: str = "fine", max_samples: int | None = None):
    """Evaluate one forward mode on one split.

    Returns a report dict with macro precision/recall/F1 per attribute task,
    or fine/coarse accuracy for hierarchy data, plus per-sample confidence
    and correctness streams for calibration analysis."""
    if mode in ("comod_test_fixed",) and not model.task_gains:
        ensure_task_gains(model, dataset, cfg, seed)
    sub = dataset.subset(split)
    if _is_attribute(dataset):
        x, y = sub
        if max_samples:
            x, y = x[:max_samples], y[:max_samples]
        return _evaluate_attribute_arrays(model, x, y, cfg, mode, seed)
    x, y_coarse, y_fine = sub
    if max_samples:
        x, y_coarse, y_fine = x[:max_samples], y_coarse[:max_samples], y_fine[:max_samples]
    # before fine-tuning the fine head is untrained; callers pick the level
    return _evaluate_hierarchy_arrays(model, x, y_coarse, y_fine, cfg, mode,
                                      seed, level=level)


def reliability_report(report: dict, n_bins: int = 15):
    return ece(report["confidences"], report["correct"], n_bins=n_bins)


# --- robustness sweep ---------------------------------------------------------

def robustness_sweep(model: Model, dataset, cfg: RunConfig, seed: int,
                     modes=("attention", "comod_test_fixed"),
                     kinds=CORRUPTION_KINDS, severities=range(6),
                     split: str = "test", level: str = "fine",
                     max_samples: int | None = None):
    """Accuracy per (corruption kind, severity, mode) on a held-out split.

    Severity 0 applies no corruption, so that column reproduces the clean
    evaluation exactly. Returns a list of row dicts including per-cell
    comodulation-minus-attention differences when both modes are present."""
    if any(m == "comod_test_fixed" for m in modes):
        ensure_task_gains(model, dataset, cfg, seed)
    attribute = _is_attribute(dataset)
    sub = dataset.subset(split)
    x_clean = sub[0] if max_samples is None else sub[0][:max_samples]
    labels = tuple(a if max_samples is None else a[:max_samples] for a in sub[1:])
    rows = []
    for ki, kind in enumerate(kinds):
        for severity in severities:
            rng_c = np.random.default_rng([seed, _STREAM_CORRUPT, ki, severity])
            x = corrupt(x_clean, CorruptionSpec(kind, severity), rng_c)
            acc = {}
            for mode in modes:
                if attribute:
                    report = _evaluate_attribute_arrays(model, x, labels[0],
                                                        cfg, mode, seed)
                else:
                    report = _evaluate_hierarchy_arrays(model, x, labels[0],
                                                        labels[1], cfg, mode,
                                                        seed, level=level)
                acc[mode] = report["accuracy"]
            comod_modes = [m for m in modes if m.startswith("comod")]
            diff = (acc[comod_modes[0]] - acc["attention"]
                    if comod_modes and "attention" in acc else float("nan"))
            for mode in modes:
                rows.append({"kind": kind, "severity": severity, "mode": mode,
                             "accuracy": acc[mode], "comod_minus_attention": diff})
    return rows


def write_robustness_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "severity", "mode", "accuracy", "comod_minus_attention"])
        for r in rows:
            w.writerow([r["kind"], r["severity"], r["mode"],
                        repr(float(r["accuracy"])),
                        repr(float(r["comod_minus_attention"]))])


# --- evaluation-mode matrix ---------------------------------------------------

# (row label, fine-tuning method, evaluation forward mode)
MODE_MATRIX_ROWS = (
    ("output_weights_only", "head_only", "plain"),
    ("attention", "attention", "attention"),
    ("comod_test_one_gain_per_task", "attention", "comod_test_fixed"),
    ("comod_test_time", "attention", "comod_test"),
    ("comodulation_one_gain_per_task", "comod", "comod_test_fixed"),
    ("comodulation", "comod", "comod_test"),
)


def mode_matrix(cfg: RunConfig, dataset, pretrained_state: dict, seed: int,
                split: str = "test", max_samples: int | None = None):
    """Fine-tune the three method variants from one shared pretrained state
    and evaluate every (method, forward mode) row of the matrix.

    Returns [(row label, accuracy)] in fixed row order."""
    results = []
    by_method = {}
    for method in FINETUNE_METHODS:
        model = build_run_model(cfg, seed)
        model.load_state(pretrained_state)
        finetune(cfg, model, dataset, seed, method=method)
        compute_fixed_task_gains(model, dataset, cfg, seed)
        by_method[method] = model
    for label, method, mode in MODE_MATRIX_ROWS:
        report = evaluate(by_method[method], dataset, cfg, split, mode, seed,
                          max_samples=max_samples)
        results.append((label, report["accuracy"]))
    return results


def write_mode_matrix_csv(path, rows_per_seed: dict) -> None:
    """rows_per_seed maps seed -> [(row label, accuracy)]."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "row", "accuracy"])
        for seed in sorted(rows_per_seed):
            for label, acc in rows_per_seed[seed]:
                w.writerow([seed, label, repr(float(acc))])


# --- analysis exports ---------------------------------------------------------

def write_eval_csv(path, reports: dict) -> None:
    """reports maps (split, mode) -> report dict from evaluate()."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "mode", "metric", "value"])
        for (split, mode), report in reports.items():
            for key in ("macro_precision", "macro_recall", "macro_f1",
                        "macro_accuracy", "accuracy"):
                if key in report:
                    w.writerow([split, mode, key, repr(float(report[key]))])
            diagram = reliability_report(report)
            w.writerow([split, mode, "ece", repr(float(diagram.ece))])


def write_reliability_csv(path, diagram) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "count", "mean_conf", "accuracy"])
        for b in range(len(diagram.counts)):
            w.writerow([repr(float(diagram.bin_edges[b])),
                        repr(float(diagram.bin_edges[b + 1])),
                        int(diagram.counts[b]),
                        repr(float(diagram.mean_confidence[b])),
                        repr(float(diagram.accuracy[b]))])


def collect_decoder_activity(model: Model, x: np.ndarray, task: int, mode: str,
                             cfg: RunConfig, seed: int, head: str):
    """Gain-modulated decoder activity as seen by the readout, batched."""
    mod = _mod_config(cfg)
    rng = _eval_rng(seed, mode, task)
    parts = []
    for idx in _batches(len(x), 256):
        _, info = model_forward(model, x[idx], task, mode, head,
                                mod_config=mod, rng=rng)
        act = info["dec_act"]
        gains = info.get("gains_norm")
        if gains is not None:
            act = act * np.asarray(gains, dtype=act.dtype)
        parts.append(act)
    return np.concatenate(parts)
