"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long-running criteria (synthetic grid, MNIST) train real models and take
tens of minutes in total on one CPU core.
"""

import math

import numpy as np
import pytest

from concrete_dropout.experiments import (
    ExperimentSpec,
    MANIFEST,
    gradcheck_variants,
    run,
    train_synth_cell,
)
from concrete_dropout.layers import ConcreteDropoutLayer, DenseLayer, build_mlp, concrete_drop_prob
from concrete_dropout.ndcore import RngStream
from concrete_dropout.objective import (
    ObjectiveConfig,
    bernoulli_entropy,
    gaussian_nll,
    layer_kl_gradient,
    layer_kl_regulariser,
    mapem_tau_fixed_point,
)
from concrete_dropout.train import AdamState, adam_step
from concrete_dropout.uncertainty import calibration_curve, decompose, mc_predict

MNIST_DIR = "data/mnist"


@pytest.fixture
def report(capsys, request):
    """Print one PASS/FAIL line for the criterion, then assert it."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return emit


def test_criterion_01_gradient_suite(report):
    spec = ExperimentSpec(task="gradcheck", widths=[8], depth=2, batch=4).resolved()
    reports = gradcheck_variants(spec)
    groups = {e.group for r in reports.values() for e in r.entries}
    needed = {"layer0.weight", "layer1.bias", "layer2.p_logit", "log_tau", "heteroscedastic_head"}
    worst = max(r.max_rel_error for r in reports.values())
    ok = worst < 1e-4 and needed <= groups
    report(1, ok, f"max relative error {worst:.2e} over {sorted(reports)} (< 1e-4), groups covered: {needed <= groups}")


def test_criterion_02_unit_values(report):
    layer = ConcreteDropoutLayer(DenseLayer(np.zeros((1, 4)), np.zeros(1), "identity"), 0.0, dropout_reg=1.0)
    layer.weight_reg = 0.0
    values = {
        # name: (implementation, symbolic closed form, quoted figure, tolerance, quoted decimals)
        "H(0.5)": (bernoulli_entropy(0.5), math.log(2), math.log(2), 1e-12, None),
        "KL(M=0,p=.5,K=4)": (layer_kl_regulariser(layer), -4 * math.log(2), -2.772589, 1e-9, 6),
        "NLL(y=f,log_var=0)": (gaussian_nll(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1))), 0.5 * math.log(2 * math.pi), 0.918939, 1e-9, 6),
        "tau*(N=2)": (mapem_tau_fixed_point([1.0, 1.0], (0.1, 0.01)), (0.1 - 1 + 1) / (0.01 + 1), 0.098912, 1e-6, 6),
    }
    lines, ok = [], True
    for name, (got, exact, quoted, tol, decimals) in values.items():
        good = abs(got - exact) <= tol
        if decimals is not None:
            good = good and abs(got - quoted) <= 0.5 * 10.0**-decimals
        ok &= good
        lines.append(f"{name}={got:.9f} (quoted {quoted}){'' if good else ' MISMATCH'}")
    report(2, ok, "; ".join(lines))


def test_criterion_03_relaxation_limit(report):
    n = 100_000
    lines, ok = [], True
    for p in (0.1, 0.3, 0.5, 0.9):
        z = concrete_drop_prob(p, RngStream(31, int(p * 10)).uniform(n), 1e-6)
        freq = float(np.mean(z > 0.5))
        bound = 3 * math.sqrt(p * (1 - p) / n)
        ok &= abs(freq - p) <= bound
        lines.append(f"p={p}: {freq:.4f} (+-{bound:.4f})")
    report(3, ok, ", ".join(lines))


def test_criterion_04_entropy_pull(report):
    finals = []
    for p0 in (0.05, 0.95):
        model = build_mlp(1, [64, 64, 64], 2, RngStream(4), p_init=p0)
        layers = model.dropout_layers()
        for layer in layers:
            layer.weight_reg, layer.dropout_reg = 0.0, 1.0
        params = {f"l{i}": layer.p_logit for i, layer in enumerate(layers)}
        state = AdamState()
        for _ in range(1000):
            grads = {f"l{i}": layer_kl_gradient(layer)["p_logit"] for i, layer in enumerate(layers)}
            adam_step(params, grads, state, lr=0.01)
        finals.append((p0, [layer.p for layer in layers]))
    ok = all(abs(p - 0.5) <= 0.02 for _, ps in finals for p in ps)
    detail = "; ".join(f"init {p0}: " + ", ".join(f"{p:.4f}" for p in ps) for p0, ps in finals)
    report(4, ok, f"p after 1000 Adam steps -> {detail} (target 0.5 +- 0.02)")


@pytest.fixture(scope="module")
def synth_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = ExperimentSpec(task="synth", n_grid=[10, 100, 1000, 10000], seeds=[0, 1, 2], out_dir=str(out))
    return run(spec)


def test_criterion_05_synthetic_trends(report, synth_grid):
    cells = synth_grid["rows"]
    means = {r["n"]: r for r in synth_grid["aggregate"] if r["seed"] == "mean"}
    diverged = [c for c in cells if c["status"] != "ok"]
    p_cols = [k for k in means[10] if k.startswith("p_layer_")]
    p_small = float(np.mean([means[10][c] for c in p_cols]))
    p_large = float(np.mean([means[10000][c] for c in p_cols]))
    a = 0.85 <= means[10000]["aleatoric_std"] <= 1.15
    b = means[10000]["epistemic_std"] < means[10]["epistemic_std"]
    c = p_large < p_small
    d = all(cell["additivity_gap"] <= 1e-12 for cell in cells if cell["status"] == "ok")
    ok = a and b and c and d and not diverged and len(means) == 4
    detail = (
        f"(a) aleatoric@1e4={means[10000]['aleatoric_std']:.3f} in [0.85,1.15]: {a}; "
        f"(b) epistemic {means[10]['epistemic_std']:.3f}@10 > {means[10000]['epistemic_std']:.3f}@1e4: {b}; "
        f"(c) mean p {p_small:.3f}@10 > {p_large:.3f}@1e4: {c}; (d) additivity: {d}; diverged cells: {len(diverged)}"
    )
    report(5, ok, detail)


def test_criterion_06_initialisation_robustness(report):
    worst, lines = 0.0, []
    for seed in (0, 1, 2):
        ps = {}
        for p0 in (0.05, 0.5):
            spec = ExperimentSpec(task="synth", p_init=p0).resolved()
            _, trace, _, _ = train_synth_cell(spec, 1000, seed)
            ps[p0] = np.array(trace.converged_p())
        gap = float(np.max(np.abs(ps[0.05] - ps[0.5])))
        worst = max(worst, gap)
        lines.append(f"seed {seed}: {np.round(ps[0.05], 3).tolist()} vs {np.round(ps[0.5], 3).tolist()}")
    report(6, worst <= 0.05, f"max per-layer gap {worst:.3f} (<= 0.05) at N=1000; " + "; ".join(lines))


def _needs_mnist():
    from pathlib import Path

    if not (Path(MNIST_DIR) / "train-images-idx3-ubyte.gz").exists() and not (Path(MNIST_DIR) / "train-images-idx3-ubyte").exists():
        pytest.fail(f"MNIST IDX files missing under {MNIST_DIR}")


def test_criterion_07_width_trend(report, tmp_path):
    _needs_mnist()
    spec = ExperimentSpec(
        task="mnist", widths=[32, 128, 512], seeds=[0, 1], n_grid=[10000], epochs=50, test_size=1000,
        data=MNIST_DIR, out_dir=str(tmp_path),
    )
    result = run(spec)
    means = {r["width"]: r for r in result["aggregate"] if r["seed"] == "mean"}
    deepest = "p_layer_2"
    series = [means[w][deepest] for w in (32, 128, 512)]
    per_seed = {(r["width"], r["seed"]): r.get(deepest) for r in result["rows"]}
    ok = all(a <= b for a, b in zip(series, series[1:])) and len(means) == 3
    report(
        7, ok,
        f"deepest hidden p (mean of 2 seeds) at widths 32/128/512: {[round(v, 4) for v in series]} non-decreasing; "
        f"per seed: {{{', '.join(f'{k}: {v:.4f}' for k, v in per_seed.items())}}}",
    )


def test_criterion_08_mnist_accuracy(report, tmp_path):
    _needs_mnist()
    spec = ExperimentSpec(
        task="mnist", widths=[128], depth=3, seeds=[0], n_grid=[10000], mc_samples=200, data=MNIST_DIR,
        out_dir=str(tmp_path),
    )
    row = run(spec)["rows"][0]
    ok = row["status"] == "ok" and row["accuracy"] >= 0.95
    report(8, ok, f"3x128 MLP, 1e4 training images, S=200: test accuracy {row.get('accuracy', float('nan')):.4f} (>= 0.95)")


def test_criterion_09_calibration(report):
    spec = ExperimentSpec(task="calibrate").resolved()
    model, _, _, test_ds = train_synth_cell(spec, 10000, 0)
    decomp = decompose(mc_predict(model, test_ds.x, spec.mc_samples, RngStream(0, 2)))
    drawn = decomp.mean + RngStream(0, 3).gaussian(decomp.mean.shape) * np.sqrt(decomp.predictive_var)
    self_rmse = calibration_curve(decomp, decomp.mean, drawn).rmse
    model_rmse = calibration_curve(decomp, decomp.mean, test_ds.y).rmse
    ok = self_rmse < 0.02 and model_rmse <= 0.1
    report(9, ok, f"self-consistent RMSE {self_rmse:.4f} (< 0.02), trained N=1e4 model RMSE {model_rmse:.4f} (<= 0.1), B={len(test_ds)}")


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_criterion_10_determinism(report, tmp_path):
    small = {
        "gradcheck": dict(),
        "synth": dict(n_grid=[10, 200], seeds=[0, 1], steps=200, mc_samples=10, test_size=100, widths=[16]),
        "calibrate": dict(n_grid=[200], steps=200, mc_samples=10, test_size=200, widths=[16]),
        "mnist": dict(n_grid=[300], widths=[16], epochs=1, mc_samples=3, test_size=200, data=MNIST_DIR),
    }
    csv_path = tmp_path / "linear.csv"
    from concrete_dropout.data import save_csv, synth_generate

    save_csv(synth_generate(300, 1), csv_path)
    small["regress"] = dict(data=str(csv_path), splits=2, epochs=5, mc_samples=10)
    mismatched = []
    for task, kwargs in small.items():
        first, second = tmp_path / f"{task}_a", tmp_path / f"{task}_b"
        run(ExperimentSpec(task=task, out_dir=str(first), **kwargs))
        rerun = ExperimentSpec.from_manifest(first / MANIFEST)
        rerun.out_dir = str(second)
        run(rerun)
        if _dir_bytes(first) != _dir_bytes(second):
            mismatched.append(task)
    report(10, not mismatched, f"manifest reruns byte-identical for {sorted(small)}; mismatches: {mismatched or 'none'}")
