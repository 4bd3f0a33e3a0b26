"""Full network assembly: convolutional backbone, modulated encoder layer,
processing layer, gain-modulated decoder, and decision heads, in base and
residual wiring, with the forward modes used across the experiments:

  plain            unit encoder gain, unit decoder gains
  attention        context encoder gain, unit decoder gains
  comod_train      T modulated passes, per-input decoder gains estimated from
                   them, loss/logits from the final gain-weighted pass
  comod_test       T modulated passes used only to estimate gains, then one
                   unit-encoder-gain pass with the estimated decoder gains
  comod_test_fixed one unit-encoder-gain pass with stored per-task gains
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .controller import Controller
from .modulation import (
    ModulatorConfig,
    ModulatorTrace,
    estimate_decoder_gains_batch,
    sample_modulator,
)
from .nn import Conv2d, Dense, Flatten, MaxPool2d, Param, ReLU

F32 = np.float32

FORWARD_MODES = ("plain", "attention", "comod_train", "comod_test", "comod_test_fixed")


@dataclass
class ArchitectureSpec:
    in_channels: int
    image_size: int
    n_tasks: int
    backbone_channels: tuple[int, int, int] = (8, 12, 16)
    backbone_pools: tuple[bool, bool, bool] = (True, True, True)
    encoder_channels: int = 16
    processing_channels: int = 16
    decoder_units: int = 64
    heads: dict[str, int] = field(default_factory=dict)
    wiring: str = "base"
    controller_hidden: int | None = None
    sigmoid_controller: bool = False
    controller_unit_init: bool = True

    def __post_init__(self):
        if self.wiring not in ("base", "residual"):
            raise ValueError(f"unknown wiring {self.wiring!r}")
        if not self.heads:
            raise ValueError("at least one decision head is required")


class WiringError(ValueError):
    pass


class Model:
    """Built network; use model_forward / train_step helpers below."""

    def __init__(self, spec: ArchitectureSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(seed)
        c_prev = spec.in_channels
        size = spec.image_size
        self.backbone: list[nn.Layer] = []
        for i, (c, pool) in enumerate(zip(spec.backbone_channels, spec.backbone_pools)):
            self.backbone.append(Conv2d(c_prev, c, 3, rng, pad=1, name=f"backbone/conv{i}"))
            self.backbone.append(ReLU(name=f"backbone/relu{i}"))
            if pool:
                if size % 2:
                    raise WiringError(
                        f"backbone/pool{i}: spatial size {size} not divisible by 2")
                self.backbone.append(MaxPool2d(2, name=f"backbone/pool{i}"))
                size //= 2
            c_prev = c
        self.feature_channels = c_prev
        self.feature_size = size

        C = spec.encoder_channels
        self.encoder_conv = Conv2d(c_prev, C, 3, rng, pad=1, name="encoder/conv")
        self.encoder_relu = ReLU(name="encoder/relu")
        self.processing_conv = Conv2d(C, spec.processing_channels, 3, rng, pad=1,
                                      name="processing/conv")
        self.processing_relu = ReLU(name="processing/relu")
        if spec.wiring == "residual":
            # 1x1 projection skips around the modulated encoder and the
            # processing layer; unmodulated information can bypass the gains
            self.proj_enc = Conv2d(c_prev, C, 1, rng, bias=False, name="skip/enc")
            self.proj_proc = Conv2d(C, spec.processing_channels, 1, rng, bias=False,
                                    name="skip/proc")
        else:
            self.proj_enc = self.proj_proc = None
        self.flatten = Flatten(name="flatten")
        flat = spec.processing_channels * size * size
        self.decoder = Dense(flat, spec.decoder_units, rng, name="decoder/dense")
        self.decoder_relu = ReLU(name="decoder/relu")
        self.heads = {name: Dense(spec.decoder_units, n_out, rng, name=f"head/{name}")
                      for name, n_out in spec.heads.items()}
        self.controller = Controller(
            spec.n_tasks, C, rng, hidden=spec.controller_hidden,
            sigmoid_output=spec.sigmoid_controller,
            unit_gain_init=spec.controller_unit_init)
        self.task_gains: dict[int, np.ndarray] = {}  # fixed per-task decoder gains
        self._probe()

    def _probe(self):
        """Shape check: forward a zero input through the whole chain."""
        x = np.zeros((1, self.spec.in_channels, self.spec.image_size, self.spec.image_size),
                     dtype=F32)
        try:
            dec, _ = self.features(x)
            for head in self.heads.values():
                head.forward(dec)
        except nn.ShapeError as e:
            raise WiringError(f"inconsistent architecture: {e}") from e

    # --- parameter plumbing -------------------------------------------------

    def network_params(self) -> list[Param]:
        params: list[Param] = []
        for layer in self.backbone:
            params += layer.params()
        params += self.encoder_conv.params() + self.processing_conv.params()
        if self.proj_enc is not None:
            params += self.proj_enc.params() + self.proj_proc.params()
        params += self.decoder.params()
        for head in self.heads.values():
            params += head.params()
        return params

    def all_params(self) -> list[Param]:
        return self.network_params() + self.controller.params()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.all_params())

    def zero_grads(self):
        for p in self.all_params():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.all_params()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for p in self.all_params():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name}")
            if arrays[p.name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}: "
                                 f"{arrays[p.name].shape} vs {p.value.shape}")
            p.value[...] = arrays[p.name]

    # --- forward / backward -------------------------------------------------

    def encode(self, x: np.ndarray):
        """Backbone features and rectified encoder activity; both are
        independent of the modulator, so comod passes share one call."""
        f = x
        for layer in self.backbone:
            f = layer.forward(f)
        enc_act = self.encoder_relu.forward(self.encoder_conv.forward(f))
        return f, enc_act

    def downstream(self, f: np.ndarray, enc_act: np.ndarray,
                   enc_gain: np.ndarray | None,
                   record: dict | None = None, record_tag: str = ""):
        """Gain-multiply the encoder activity and run it to the decoder."""
        if enc_gain is not None:
            enc_mod = enc_act * enc_gain.astype(enc_act.dtype)[None, :, None, None]
        else:
            enc_mod = enc_act
        enc_out = enc_mod
        if self.proj_enc is not None:
            enc_out = enc_out + self.proj_enc.forward(f)
        proc = self.processing_relu.forward(self.processing_conv.forward(enc_out))
        if self.proj_proc is not None:
            proc = proc + self.proj_proc.forward(enc_out)
        dec_act = self.decoder_relu.forward(self.decoder.forward(self.flatten.forward(proc)))
        self._fwd_cache = (enc_act, enc_gain)
        if record is not None:
            record[f"layer/backbone{record_tag}"] = f.copy()
            record[f"layer/encoder{record_tag}"] = enc_mod.copy()
            record[f"layer/processing{record_tag}"] = proc.copy()
            record[f"layer/decoder{record_tag}"] = dec_act.copy()
        return dec_act

    def features(self, x: np.ndarray, enc_gain: np.ndarray | None = None,
                 record: dict | None = None, record_tag: str = ""):
        """Backbone -> modulated encoder -> processing -> decoder activity.

        enc_gain is a per-channel gain vector (already m * c_k) or None for
        unit gain. Returns (decoder activity (N, units), encoder activity).
        """
        f, enc_act = self.encode(x)
        dec_act = self.downstream(f, enc_act, enc_gain, record=record,
                                  record_tag=record_tag)
        return dec_act, enc_act

    def backward_from_logits(self, d_logits: np.ndarray, head_name: str,
                             dec_act: np.ndarray, dec_gains: np.ndarray | None):
        """Backprop through the most recent features() pass.

        Decoder gains are treated as constants. Returns the per-channel
        gradient of the loss w.r.t. the encoder gain vector, for the
        controller update.
        """
        d_gained = self.heads[head_name].backward(d_logits)
        if dec_gains is not None:
            d_dec = d_gained * dec_gains.astype(d_gained.dtype)
        else:
            d_dec = d_gained
        d_flat = self.decoder.backward(self.decoder_relu.backward(d_dec))
        d_proc = self.flatten.backward(d_flat)
        if self.proj_proc is not None:
            d_enc_out_skip = self.proj_proc.backward(d_proc)
        d_enc_out = self.processing_conv.backward(self.processing_relu.backward(d_proc))
        if self.proj_proc is not None:
            d_enc_out = d_enc_out + d_enc_out_skip
        enc_act, enc_gain = self._fwd_cache
        # d/d enc_mod is d_enc_out; split into activity and gain directions
        d_gain_per_channel = np.einsum("nchw,nchw->c", d_enc_out.astype(np.float64),
                                       enc_act.astype(np.float64))
        if enc_gain is not None:
            d_enc_act = d_enc_out * enc_gain.astype(d_enc_out.dtype)[None, :, None, None]
        else:
            d_enc_act = d_enc_out
        d_f = self.encoder_conv.backward(self.encoder_relu.backward(d_enc_act))
        if self.proj_enc is not None:
            d_f = d_f + self.proj_enc.backward(d_enc_out)
        for layer in reversed(self.backbone):
            d_f = layer.backward(d_f)
        return d_gain_per_channel


def build_model(spec: ArchitectureSpec, seed: int) -> Model:
    return Model(spec, seed)


def model_forward(model: Model, x: np.ndarray, task: int, mode: str, head: str,
                  mod_config: ModulatorConfig | None = None,
                  rng: np.random.Generator | None = None,
                  trace: ModulatorTrace | None = None,
                  record: dict | None = None):
    """Evaluate one forward mode. Returns (logits, info dict).

    info carries 'dec_act' (the activity the logits were read from, pre-gain),
    'gains_raw'/'gains_norm' for comod modes, and 'trace'.
    """
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    info: dict = {}
    if mode == "plain":
        dec_act, _ = model.features(x, None, record=record)
        info["dec_act"] = dec_act
        return model.heads[head].forward(dec_act), info

    ctx = model.controller.forward(task, dtype=x.dtype)
    if mode == "attention":
        dec_act, _ = model.features(x, ctx, record=record)
        info["dec_act"] = dec_act
        info["context"] = ctx
        return model.heads[head].forward(dec_act), info

    if mode == "comod_test_fixed":
        if task not in model.task_gains:
            raise ValueError(f"no stored per-task gains for task {task}")
        gains = model.task_gains[task]
        dec_act, _ = model.features(x, None, record=record)
        logits = model.heads[head].forward(dec_act * gains.astype(dec_act.dtype))
        info.update(dec_act=dec_act, gains_norm=gains)
        return logits, info

    if mod_config is None:
        raise ValueError(f"mode {mode} requires a modulator config")
    if trace is None:
        if rng is None:
            raise ValueError(f"mode {mode} requires an rng or an explicit trace")
        trace = sample_modulator(mod_config, rng)
    f, enc_act = model.encode(x)
    snapshots = []
    for t, m_t in enumerate(trace.values):
        tag = f"/pass{t}" if record is not None else ""
        snapshots.append(model.downstream(f, enc_act, F32(m_t) * ctx,
                                          record=record, record_tag=tag))
    raw, norm = estimate_decoder_gains_batch(np.stack(snapshots), trace)
    info.update(gains_raw=raw, gains_norm=norm, trace=trace, context=ctx)

    if mode == "comod_train":
        # final pass re-runs the last modulated pass so layer caches line up
        # for backward; gains are constants in the gradient
        m_final = F32(trace.values[-1])
        dec_act = model.downstream(f, enc_act, m_final * ctx)
        info.update(dec_act=dec_act, m_final=float(m_final))
        return model.heads[head].forward(dec_act * norm.astype(dec_act.dtype)), info

    # comod_test: unit encoder gain, estimated decoder gains
    dec_act = model.downstream(f, enc_act, None, record=record)
    info["dec_act"] = dec_act
    return model.heads[head].forward(dec_act * norm.astype(dec_act.dtype)), info


def partition_parameters(model: Model, phase: str, finetune_scope: str = "controller",
                         pretrain_controller: str = "joint",
                         new_head: str | None = None):
    """Set trainable flags; returns (trainable, frozen) parameter lists.

    phase 'pretrain': all network parameters train; the controller joins when
    pretrain_controller == 'joint'. phase 'finetune': scope 'controller'
    trains the controller only (attribute setup), 'controller+head' adds the
    new decision head (hierarchy setup), 'head_only' trains just the head.
    """
    if phase == "pretrain":
        trainable = list(model.network_params())
        if pretrain_controller == "joint":
            trainable += model.controller.params()
        elif pretrain_controller != "frozen":
            raise ValueError(f"unknown pretrain_controller {pretrain_controller!r}")
    elif phase == "finetune":
        if finetune_scope == "controller":
            trainable = list(model.controller.params())
        elif finetune_scope == "controller+head":
            if new_head is None:
                raise ValueError("controller+head scope needs the head name")
            trainable = list(model.controller.params()) + model.heads[new_head].params()
        elif finetune_scope == "head_only":
            if new_head is None:
                raise ValueError("head_only scope needs the head name")
            trainable = list(model.heads[new_head].params())
        else:
            raise ValueError(f"unknown finetune scope {finetune_scope!r}")
    else:
        raise ValueError(f"unknown phase {phase!r}")
    trainable_ids = {id(p) for p in trainable}
    frozen = [p for p in model.all_params() if id(p) not in trainable_ids]
    for p in trainable:
        p.trainable = True
    for p in frozen:
        p.trainable = False
    return trainable, frozen
