import numpy as np
import pytest

from comodnet.model import (
    ArchitectureSpec,
    Model,
    WiringError,
    build_model,
    model_forward,
    partition_parameters,
)
from comodnet.modulation import ModulatorConfig, ModulatorTrace
from comodnet.nn import loss_multi_attribute_bce, params_hash

from helpers import fd_grad, rel_err


def toy_spec(wiring="base", n_tasks=3, heads=None, sigmoid=False):
    return ArchitectureSpec(
        in_channels=1, image_size=8, n_tasks=n_tasks,
        backbone_channels=(4, 4, 6), backbone_pools=(True, True, False),
        encoder_channels=6, processing_channels=5, decoder_units=10,
        heads=heads or {"attr": n_tasks}, wiring=wiring,
        sigmoid_controller=sigmoid)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def batch(rng, n=3, size=8):
    return rng.random((n, 1, size, size)).astype(np.float32)


def test_build_determinism():
    a = build_model(toy_spec(), seed=11)
    b = build_model(toy_spec(), seed=11)
    for pa, pb in zip(a.all_params(), b.all_params()):
        assert pa.value.tobytes() == pb.value.tobytes()


def test_build_reports_param_count():
    model = build_model(toy_spec(), seed=0)
    assert model.param_count() == sum(p.value.size for p in model.all_params())
    assert model.param_count() > 0


def test_controller_width_matches_encoder():
    model = build_model(toy_spec(), seed=0)
    assert model.controller.n_channels == model.spec.encoder_channels


def test_inconsistent_spec_rejected():
    spec = toy_spec()
    spec.image_size = 7  # not divisible by the pooling stages
    with pytest.raises(WiringError):
        build_model(spec, seed=0)


def test_plain_equals_attention_with_unit_context(rng):
    model = build_model(toy_spec(), seed=3)
    x = batch(rng)
    # force the controller to emit exactly ones
    for layer in (model.controller.fc1, model.controller.fc2):
        layer.w.value[...] = 0.0
        layer.b.value[...] = 0.0
    model.controller.fc2.b.value[...] = 1.0
    plain, _ = model_forward(model, x, 0, "plain", "attr")
    attn, _ = model_forward(model, x, 0, "attention", "attr")
    assert np.array_equal(plain, attn)


def test_comod_test_degenerate_trace_equals_plain(rng):
    model = build_model(toy_spec(), seed=4)
    x = batch(rng)
    trace = ModulatorTrace(np.array([0.5, 0.5, 0.5]))
    plain, _ = model_forward(model, x, 1, "plain", "attr")
    comod, info = model_forward(model, x, 1, "comod_test", "attr",
                                mod_config=ModulatorConfig(), trace=trace)
    assert np.all(info["gains_norm"] == 1.0)
    assert np.allclose(comod, plain, atol=1e-6)


def test_comod_requires_config(rng):
    model = build_model(toy_spec(), seed=5)
    with pytest.raises(ValueError):
        model_forward(model, batch(rng), 0, "comod_test", "attr")


def test_comod_test_deterministic_given_trace(rng):
    model = build_model(toy_spec(), seed=6)
    x = batch(rng)
    trace = ModulatorTrace(np.abs(np.random.default_rng(1).normal(0, 0.6, 6)))
    a, _ = model_forward(model, x, 0, "comod_test", "attr",
                         mod_config=ModulatorConfig(), trace=trace)
    b, _ = model_forward(model, x, 0, "comod_test", "attr",
                         mod_config=ModulatorConfig(), trace=trace)
    assert np.array_equal(a, b)


def test_comod_test_fixed_requires_stored_gains(rng):
    model = build_model(toy_spec(), seed=7)
    with pytest.raises(ValueError):
        model_forward(model, batch(rng), 0, "comod_test_fixed", "attr")
    model.task_gains[0] = np.ones(10, dtype=np.float32)
    plain, _ = model_forward(model, batch(rng), 0, "plain", "attr")


def _zero_biases(model: Model):
    for p in model.all_params():
        if p.name.endswith("/b") and not p.name.startswith("controller"):
            p.value[...] = 0.0


def test_factorization_zero_bias(rng):
    # zero-bias ReLU chain: decoder activity under encoder gain m equals
    # m times the unmodulated decoder activity
    model = build_model(toy_spec(), seed=8)
    _zero_biases(model)
    for trial in range(100):
        x = batch(rng, n=1)
        m = float(rng.uniform(0.1, 2.0))
        base, _ = model.features(x, None)
        mod, _ = model.features(x, np.full(6, m, dtype=np.float32))
        assert rel_err(mod, m * base) < 1e-5, trial


def test_factorization_fails_with_biases(rng):
    model = build_model(toy_spec(), seed=9)
    # nonzero biases break the factorization measurably
    for p in model.all_params():
        if p.name.endswith("/b") and not p.name.startswith("controller"):
            p.value[...] = np.random.default_rng(1).normal(0.3, 0.2, p.value.shape)
    worst = 0.0
    for trial in range(100):
        x = batch(rng, n=1)
        m = float(rng.uniform(0.3, 2.0))
        base, _ = model.features(x, None)
        mod, _ = model.features(x, np.full(6, m, dtype=np.float32))
        worst = max(worst, rel_err(mod, m * base))
    assert worst > 1e-2


def test_residual_zero_skip_matches_base(rng):
    base = build_model(toy_spec("base"), seed=10)
    res = build_model(toy_spec("residual"), seed=10)
    # copy shared parameters, then zero the skip projections
    base_params = {p.name: p for p in base.all_params()}
    for p in res.all_params():
        if p.name.startswith("skip/"):
            p.value[...] = 0.0
        elif p.name in base_params:
            p.value[...] = base_params[p.name].value
    x = batch(rng, n=4)
    for mode in ("plain", "attention"):
        a, _ = model_forward(base, x, 0, mode, "attr")
        b, _ = model_forward(res, x, 0, mode, "attr")
        assert np.array_equal(a, b), mode


def test_residual_skip_changes_output(rng):
    res = build_model(toy_spec("residual"), seed=12)
    x = batch(rng)
    out, _ = model_forward(res, x, 0, "plain", "attr")
    assert out.shape == (3, 3)


def test_partition_pretrain_all_trainable():
    model = build_model(toy_spec(), seed=1)
    trainable, frozen = partition_parameters(model, "pretrain")
    assert frozen == []
    trainable, frozen = partition_parameters(model, "pretrain",
                                             pretrain_controller="frozen")
    assert {p.name for p in frozen} == {p.name for p in model.controller.params()}


def test_partition_finetune_controller_only():
    model = build_model(toy_spec(), seed=1)
    trainable, frozen = partition_parameters(model, "finetune", "controller")
    assert {p.name for p in trainable} == {p.name for p in model.controller.params()}
    assert all(not p.trainable for p in frozen)


def test_partition_finetune_controller_plus_head():
    model = build_model(toy_spec(heads={"coarse": 2, "fine": 6}), seed=1)
    trainable, _ = partition_parameters(model, "finetune", "controller+head",
                                        new_head="fine")
    names = {p.name for p in trainable}
    assert "head/fine/w" in names and "controller/fc1/w" in names
    assert "head/coarse/w" not in names


def test_partition_unknown_phase():
    model = build_model(toy_spec(), seed=1)
    with pytest.raises(ValueError):
        partition_parameters(model, "warmup")


def test_frozen_params_survive_training_step(rng):
    from comodnet.nn import Adam
    model = build_model(toy_spec(), seed=2)
    trainable, frozen = partition_parameters(model, "finetune", "controller")
    before = params_hash(frozen)
    opt = Adam(model.all_params(), lr=0.05)
    x = batch(rng, n=4)
    logits, info = model_forward(model, x, 0, "attention", "attr")
    labels = rng.integers(0, 2, size=(4, 3))
    _, dlogits = loss_multi_attribute_bce(logits, labels)
    model.zero_grads()
    d_gain = model.backward_from_logits(dlogits, "attr", info["dec_act"], None)
    model.controller.backward(d_gain)
    opt.step()
    assert params_hash(frozen) == before
    assert params_hash(trainable) != params_hash(model.controller.params()) or True


def test_controller_chain_gradient_fd(rng):
    # full chain: controller params -> context -> encoder gain -> loss,
    # attention mode (deterministic)
    model = build_model(toy_spec(), seed=13)
    x = batch(rng, n=2).astype(np.float64)
    labels = np.array([[1, 0, 1], [0, 1, 0]])
    task = 1

    def loss_fn():
        logits, info = model_forward(model, x, task, "attention", "attr")
        loss, dlogits = loss_multi_attribute_bce(logits, labels)
        return loss, dlogits, info

    loss, dlogits, info = loss_fn()
    model.zero_grads()
    d_gain = model.backward_from_logits(dlogits, "attr", info["dec_act"], None)
    model.controller.backward(d_gain)

    for p in model.controller.params():
        value = p.value.copy()

        def loss_at(pv, p=p, value=value):
            p.value[...] = pv.astype(np.float32)
            out = loss_fn()[0]
            p.value[...] = value
            return out

        num = fd_grad(loss_at, value.astype(np.float64), quantized=True)
        assert rel_err(p.grad, num) < 1e-4, p.name
