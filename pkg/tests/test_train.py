import math
import sys

import numpy as np
import pytest

from concrete_dropout.data import Dataset, standardise, synth_generate
from concrete_dropout.errors import ConfigurationError, TrainingError
from concrete_dropout.layers import build_mlp
from concrete_dropout.ndcore import RngStream
from concrete_dropout.objective import ObjectiveConfig
from concrete_dropout.train import AdamState, TrainConfig, adam_step, grad_check, sgd_step, train
from concrete_dropout.uncertainty import decompose, mc_predict

# scalar loop for f(x) = x^2 from x = 1, lr 0.1, default betas
ADAM_TRAJECTORY = [0.9000000005, 0.8004122286917927, 0.70158627294603]


def test_adam_matches_scalar_trajectory():
    params = {"x": np.array([1.0])}
    state = AdamState()
    for expected in ADAM_TRAJECTORY:
        adam_step(params, {"x": 2 * params["x"]}, state, lr=0.1)
        assert params["x"][0] == pytest.approx(expected, abs=1e-15)
    assert state.t == 3


def test_adam_first_step_is_normalised():
    # bias-corrected first step moves every coordinate by ~lr regardless of gradient scale
    params = {"w": np.zeros(4)}
    adam_step(params, {"w": np.array([1e-3, -5.0, 200.0, 1.0])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(np.abs(params["w"]), 0.01, rtol=1e-4)


def test_adam_ignores_unknown_gradients():
    params = {"a": np.ones(2)}
    adam_step(params, {"a": np.ones(2), "b": np.ones(3)}, AdamState())
    assert set(params) == {"a"}


def test_sgd_step():
    params = {"a": np.array([1.0, 2.0])}
    sgd_step(params, {"a": np.array([10.0, -10.0])}, 0.1)
    assert params["a"].tolist() == [0.0, 3.0]


def small_synth(n=256, seed=0):
    train_ds, = standardise(synth_generate(n, seed))
    return train_ds


def test_train_is_deterministic_and_trace_has_logged_steps():
    ds = small_synth()
    runs = []
    for _ in range(2):
        model = build_mlp(1, [8, 8], 1, RngStream(3), heteroscedastic=True)
        model, trace = train(model, ds, ObjectiveConfig(n=256), TrainConfig(epochs=5, batch_size=32, seed=4, log_every=7))
        runs.append((model, trace))
    (m1, t1), (m2, t2) = runs
    for a, b in zip(m1.parameters().values(), m2.parameters().values()):
        assert a.tobytes() == b.tobytes()
    assert t1.losses == t2.losses
    assert len(t1) == math.ceil(5 * 8 / 7)
    assert t1.steps[-1] == 35


def test_train_recovers_least_squares_line():
    ds = synth_generate(500, 5)
    model = build_mlp(1, [], 1, RngStream(6), concrete=False)
    cfg = TrainConfig(epochs=3000, batch_size=500, learning_rate=0.5, seed=7, optimiser="sgd")
    model, _ = train(model, ds, ObjectiveConfig(n=500, precision_mode="fixed"), cfg)
    design = np.hstack([ds.x, np.ones_like(ds.x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ds.y[:, 0], rcond=None)
    layer = model.layers[0]
    assert layer.weight[0, 0] == pytest.approx(slope, abs=1e-4)
    assert layer.bias[0] == pytest.approx(intercept, abs=1e-4)
    assert abs(slope - 2) < 0.2 and abs(intercept - 8) < 0.1


def test_dropout_net_follows_line():
    train_ds, = standardise(synth_generate(1000, 5))
    model = build_mlp(1, [32], 1, RngStream(6), heteroscedastic=True)
    cfg = TrainConfig(epochs=40, batch_size=64, learning_rate=3e-3, seed=7)
    model, _ = train(model, train_ds, ObjectiveConfig(n=1000), cfg)
    grid = np.linspace(-0.5, 0.5, 11).reshape(-1, 1)
    decomp = decompose(mc_predict(model, train_ds.x_norm.apply(grid), 100, RngStream(8)))
    pred = train_ds.y_norm.invert(decomp.mean)
    np.testing.assert_allclose(pred, 2 * grid + 8, atol=0.25)
    # noise std 1 in raw units; a short run only gets the scale roughly right
    assert abs(np.sqrt(decomp.aleatoric_var.mean()) * train_ds.y_norm.std[0] - 1.0) < 0.25


def test_mapem_training_tracks_noise_precision():
    train_ds, = standardise(synth_generate(2000, 9))
    model = build_mlp(1, [32], 1, RngStream(10), log_tau=0.0)
    obj = ObjectiveConfig(n=2000, precision_mode="homoscedastic_mapem")
    model, trace = train(model, train_ds, obj, TrainConfig(epochs=15, batch_size=64, learning_rate=3e-3, seed=11))
    noise_var = 1.0 / train_ds.y_norm.std[0] ** 2
    tau = math.exp(model.log_tau[0])
    # the M-step fits residuals of stochastic forward passes, so 1/tau is the
    # noise variance plus the spread the masks add on top
    assert noise_var < 1 / tau < 1.3 * noise_var
    # the optimiser never touches log_tau; it only moves at M-steps, i.e. at epoch boundaries
    assert len({lt for lt in trace.log_tau[:3]}) == 1


def test_train_rejects_inconsistent_config():
    ds = small_synth(32)
    model = build_mlp(1, [4], 1, RngStream(0))
    with pytest.raises(ConfigurationError):
        train(model, ds, ObjectiveConfig(n=33), TrainConfig())
    with pytest.raises(ConfigurationError):
        train(model, ds, ObjectiveConfig(n=32), TrainConfig(batch_size=64))
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimiser="rmsprop")


def test_divergence_reports_step():
    x = np.linspace(-1, 1, 16).reshape(-1, 1) * 1e200
    ds = Dataset(x, np.ones((16, 1)) * 1e200)
    model = build_mlp(1, [4], 1, RngStream(0), log_tau=0.0)
    with pytest.raises(TrainingError) as info:
        with np.errstate(all="ignore"):
            train(model, ds, ObjectiveConfig(n=16, precision_mode="fixed"), TrainConfig(epochs=3, batch_size=4, learning_rate=1.0))
    assert info.value.step == 0


def test_converged_p_uses_trace_tail():
    ds = small_synth(64)
    model = build_mlp(1, [4], 1, RngStream(1), heteroscedastic=True)
    _, trace = train(model, ds, ObjectiveConfig(n=64), TrainConfig(epochs=20, batch_size=16, seed=0, log_every=1))
    k = math.ceil(0.05 * len(trace))
    np.testing.assert_allclose(trace.converged_p(), np.mean(trace.p_values[-k:], axis=0), rtol=1e-15)


def test_trace_csv(tmp_path):
    ds = small_synth(64)
    model = build_mlp(1, [4], 1, RngStream(1), log_tau=0.0)
    _, trace = train(model, ds, ObjectiveConfig(n=64, precision_mode="homoscedastic_mapem"), TrainConfig(epochs=2, batch_size=16))
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,loss,p_layer_0,p_layer_1,log_tau"
    assert len(lines) == 1 + len(trace)


def jitter_biases(model, rng):
    """Keep ReLU pre-activations away from the kink for finite differences."""
    for layer in model.layers:
        inner = getattr(layer, "inner", layer)
        inner.bias[:] = rng.gaussian(inner.bias.shape, 0.0, 0.1)


@pytest.mark.parametrize(
    "variant",
    [
        dict(concrete=False),
        dict(log_tau=-0.4),
        dict(heteroscedastic=True),
    ],
    ids=["dense", "concrete", "heteroscedastic"],
)
def test_grad_check_variants(variant):
    model = build_mlp(2, [8, 8], 1, RngStream(50), **variant)
    jitter_biases(model, RngStream(53))
    mode = "heteroscedastic_head" if variant.get("heteroscedastic") else "homoscedastic_mapem"
    if variant.get("concrete") is False:
        mode = "fixed"
    x, y = RngStream(51).gaussian((4, 2)), RngStream(52).gaussian((4, 1))
    report = grad_check(model, x, y, ObjectiveConfig(n=40, precision_mode=mode))
    assert report.passed, report.failures()
    groups = {e.group for e in report.entries}
    if variant.get("heteroscedastic"):
        assert "heteroscedastic_head" in groups
    if "log_tau" in variant:
        assert "log_tau" in groups


def test_grad_check_classification():
    model = build_mlp(3, [6], 4, RngStream(60), kind="classification")
    x = RngStream(61).gaussian((5, 3))
    y = np.array([0, 3, 1, 2, 0])
    report = grad_check(model, x, y, ObjectiveConfig(n=50, loss_kind="cross_entropy", precision_mode="fixed"))
    assert report.passed, report.failures()


def test_grad_check_detects_wrong_gradient(monkeypatch):
    train_mod = sys.modules["concrete_dropout.train"]

    real = train_mod.elbo_loss_and_grad

    def broken(*args, **kwargs):
        loss, regs, grads = real(*args, **kwargs)
        grads["layer0.bias"] = grads["layer0.bias"] * 1.01
        return loss, regs, grads

    monkeypatch.setattr(train_mod, "elbo_loss_and_grad", broken)
    model = build_mlp(2, [4], 1, RngStream(70), heteroscedastic=True)
    report = grad_check(model, RngStream(71).gaussian((4, 2)), RngStream(72).gaussian((4, 1)), ObjectiveConfig(n=10))
    assert not report.passed
    assert [e.group for e in report.failures()] == ["layer0.bias"]
