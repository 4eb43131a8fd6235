"""Experiment runners behind the command line: gradient checks, the synthetic grid,
CSV regression, MNIST subsets and calibration.

Every runner writes CSV tables plus ``manifest.json`` into the output directory.
Nothing written depends on wall-clock time, so rerunning a manifest reproduces
every file byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .data import Dataset, load_csv, load_mnist, split, standardise, synth_generate
from .errors import ArgumentError, ConfigurationError, FormatError, TrainingError
from .layers import build_mlp
from .ndcore import RngStream
from .objective import ObjectiveConfig
from .plots import line_plot_svg
from .train import GradCheckReport, TrainConfig, grad_check, train
from .uncertainty import (
    DEFAULT_LEVELS,
    calibration_curve,
    classification_predict,
    decompose,
    decomposition_to_csv,
    mc_predict,
)

log = logging.getLogger(__name__)

TASKS = ("gradcheck", "synth", "regress", "mnist", "calibrate")
DATA_ENV = "CONCRETE_DROPOUT_DATA"
MANIFEST = "manifest.json"

# task defaults; anything left as None in an ExperimentSpec is filled from here
TASK_DEFAULTS = {
    "gradcheck": dict(widths=[8], depth=2, batch=4, n_grid=[30], seeds=[0]),
    "synth": dict(
        widths=[64], depth=3, n_grid=[10, 100, 1000, 10000], seeds=[0, 1, 2], steps=20000, batch=128,
        lr=1e-3, precision_mode="heteroscedastic_head", test_size=1000,
    ),
    "regress": dict(
        widths=[50], depth=2, seeds=[0], epochs=400, batch=32, lr=1e-3,
        precision_mode="homoscedastic_mapem", splits=20,
    ),
    "mnist": dict(widths=[128], depth=3, n_grid=[10000], seeds=[0], epochs=20, batch=128, lr=1e-3, test_size=10000),
    "calibrate": dict(
        widths=[64], depth=3, n_grid=[10000], seeds=[0], steps=20000, batch=128, lr=1e-3,
        precision_mode="heteroscedastic_head", test_size=10000,
    ),
}


@dataclass
class ExperimentSpec:
    task: str
    seeds: list | None = None
    n_grid: list | None = None
    widths: list | None = None
    depth: int | None = None
    epochs: int | None = None
    steps: int | None = None
    batch: int | None = None
    lr: float | None = None
    mc_samples: int = 200
    lengthscale: float = 1e-2
    temperature: float = 0.1
    precision_mode: str | None = None
    p_init: float | None = None
    test_size: int | None = None
    splits: int | None = None
    target: str | None = None
    data: str | None = None
    plots: bool = False
    out_dir: str = field(default="results", metadata={"manifest": False})

    def resolved(self) -> "ExperimentSpec":
        """Copy with every task default filled in and inputs validated."""
        if self.task not in TASKS:
            raise ArgumentError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        filled = {k: v for k, v in TASK_DEFAULTS[self.task].items() if getattr(self, k) is None}
        spec = replace(self, **filled)
        if spec.precision_mode is None:
            spec.precision_mode = "heteroscedastic_head"
        if spec.epochs is None and spec.steps is None:
            spec.epochs = 100
        if spec.task == "mnist" and spec.data is None:
            spec.data = os.environ.get(DATA_ENV, "data/mnist")
        if spec.task == "regress" and spec.data is None:
            raise ArgumentError("regress needs --data pointing at a CSV file")
        if spec.data is not None:
            spec.data = str(Path(spec.data).resolve())
        for name in ("seeds", "widths"):
            if not getattr(spec, name):
                raise ArgumentError(f"{name} must be a non-empty list")
        if spec.depth < 1 or any(w < 1 for w in spec.widths):
            raise ArgumentError("depth and widths must be positive")
        if spec.mc_samples < 2:
            raise ArgumentError("mc_samples must be at least 2")
        return spec

    def to_manifest(self) -> dict:
        blob = {f.name: getattr(self, f.name) for f in fields(self) if f.metadata.get("manifest", True)}
        return {"format": "concrete-dropout-manifest", "version": __version__, "spec": blob}

    @classmethod
    def from_manifest(cls, path) -> "ExperimentSpec":
        try:
            blob = json.loads(Path(path).read_text())
            if blob.get("format") != "concrete-dropout-manifest":
                raise FormatError(f"{path}: not a manifest file")
            return cls(**blob["spec"])
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise FormatError(f"{path}: unreadable manifest ({exc})") from exc


def write_manifest(spec: ExperimentSpec, out: Path) -> None:
    (out / MANIFEST).write_text(json.dumps(spec.to_manifest(), indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])


def _train_config(spec: ExperimentSpec, n: int, seed: int) -> TrainConfig:
    batch = min(spec.batch, n)
    if spec.steps is not None:
        epochs = math.ceil(spec.steps / math.ceil(n / batch))
    else:
        epochs = spec.epochs
    return TrainConfig(
        epochs=epochs, batch_size=batch, learning_rate=spec.lr, seed=seed, max_steps=spec.steps, log_every=10
    )


def _p_columns(n_layers: int) -> list[str]:
    return [f"p_layer_{i}" for i in range(n_layers)]


def _aggregate(rows: list[dict], keys: list[str], values: list[str]) -> list[dict]:
    """Mean and standard error of ``values`` over rows sharing ``keys`` (diverged rows skipped)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("status") == "ok":
            groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, members in groups.items():
        for stat in ("mean", "stderr"):
            agg = dict(zip(keys, key))
            agg["seed"] = stat
            agg["status"] = f"{len(members)} ok"
            for v in values:
                col = np.array([m[v] for m in members], dtype=np.float64)
                if stat == "mean":
                    agg[v] = float(col.mean())
                else:
                    agg[v] = float(col.std() / math.sqrt(len(col))) if len(col) > 1 else 0.0
            out.append(agg)
    return out


# ---------------------------------------------------------------- gradcheck


def jitter_biases(model, rng: RngStream, std: float = 0.1) -> None:
    """Random biases keep ReLU pre-activations clear of the kink during finite differences."""
    for layer in model.layers:
        inner = getattr(layer, "inner", layer)
        inner.bias[:] = rng.gaussian(inner.bias.shape, 0.0, std)


def gradcheck_variants(spec: ExperimentSpec) -> dict[str, GradCheckReport]:
    width, depth = spec.widths[0], spec.depth
    seed = spec.seeds[0]
    rng = RngStream(seed, 0x6C)
    x = rng.fork().gaussian((spec.batch, 2))
    y = rng.fork().gaussian((spec.batch, 1))
    n = spec.n_grid[0]
    hidden = [width] * depth
    variants = {
        "dense": (
            build_mlp(2, hidden, 1, rng.fork(), concrete=False),
            ObjectiveConfig(n=n, lengthscale=spec.lengthscale, precision_mode="fixed"),
        ),
        "concrete": (
            build_mlp(2, hidden, 1, rng.fork(), log_tau=0.3, temperature=spec.temperature),
            ObjectiveConfig(n=n, lengthscale=spec.lengthscale, precision_mode="homoscedastic_mapem"),
        ),
        "heteroscedastic": (
            build_mlp(2, hidden, 1, rng.fork(), heteroscedastic=True, temperature=spec.temperature),
            ObjectiveConfig(n=n, lengthscale=spec.lengthscale, precision_mode="heteroscedastic_head"),
        ),
    }
    bias_rng = rng.fork()
    for model, _ in variants.values():
        jitter_biases(model, bias_rng)
    return {name: grad_check(model, x, y, obj, seed=seed) for name, (model, obj) in variants.items()}


def run_gradcheck(spec: ExperimentSpec, out: Path) -> dict:
    reports = gradcheck_variants(spec)
    rows = []
    for variant, report in reports.items():
        for e in report.entries:
            rows.append(
                dict(variant=variant, group=e.group, size=e.size, max_rel_error=e.max_rel_error,
                     max_abs_error=e.max_abs_error, passed=int(e.max_rel_error < report.rtol))
            )
    write_rows(out / "gradcheck.csv", ["variant", "group", "size", "max_rel_error", "max_abs_error", "passed"], rows)
    worst = max(r.max_rel_error for r in reports.values())
    return {"passed": all(r.passed for r in reports.values()), "max_rel_error": worst}


# ---------------------------------------------------------------- synthetic grid


def train_synth_cell(spec: ExperimentSpec, n: int, seed: int):
    """Train one (N, seed) cell; returns the model, its trace and the standardised train/test sets."""
    train_ds, test_ds = standardise(synth_generate(n, seed), synth_generate(spec.test_size, 10_000 + seed))
    hetero = spec.precision_mode == "heteroscedastic_head"
    model = build_mlp(
        1, [spec.widths[0]] * spec.depth, 1, RngStream(seed, 1), heteroscedastic=hetero,
        log_tau=None if hetero else 0.0, temperature=spec.temperature, p_init=spec.p_init,
    )
    obj = ObjectiveConfig(n=n, lengthscale=spec.lengthscale, precision_mode=spec.precision_mode)
    model, trace = train(model, train_ds, obj, _train_config(spec, n, seed))
    return model, trace, train_ds, test_ds


def synth_cell(spec: ExperimentSpec, n: int, seed: int, out: Path) -> dict:
    row = dict(n=n, seed=seed)
    try:
        model, trace, train_ds, test_ds = train_synth_cell(spec, n, seed)
    except TrainingError as exc:
        log.warning("cell N=%d seed=%d diverged at step %s", n, seed, exc.step)
        row["status"] = f"diverged@{exc.step}"
        return row
    decomp = decompose(mc_predict(model, test_ds.x, spec.mc_samples, RngStream(seed, 2)))
    ys = float(train_ds.y_norm.std[0])
    # additivity in normalised units, before any rescaling
    gap = float(np.max(np.abs(decomp.predictive_var - (decomp.epistemic_var + decomp.aleatoric_var))))
    x_raw = train_ds.x_norm.invert(test_ds.x)
    y_raw = train_ds.y_norm.invert(test_ds.y)
    mean_raw = train_ds.y_norm.invert(decomp.mean)
    raw = replace(
        decomp,
        mean=mean_raw,
        epistemic_var=decomp.epistemic_var * ys**2,
        aleatoric_var=decomp.aleatoric_var * ys**2,
        predictive_var=decomp.predictive_var * ys**2,
    )
    order = np.argsort(x_raw[:, 0], kind="stable")
    decomposition_to_csv(
        out / f"synth_decomposition_n{n}_seed{seed}.csv",
        x_raw[order],
        replace(raw, **{k: getattr(raw, k)[order] for k in ("mean", "epistemic_var", "aleatoric_var", "predictive_var")}),
    )
    trace.to_csv(out / f"synth_trace_n{n}_seed{seed}.csv")
    curve = calibration_curve(raw, mean_raw, y_raw)
    row.update(
        status="ok",
        epistemic_std=float(raw.epistemic_std.mean()),
        aleatoric_std=float(raw.aleatoric_std.mean()),
        predictive_std=float(raw.predictive_std.mean()),
        rmse=float(np.sqrt(np.mean((mean_raw - y_raw) ** 2))),
        calibration_rmse=curve.rmse,
        additivity_gap=gap,
    )
    row.update(zip(_p_columns(len(trace.converged_p())), trace.converged_p()))
    return row


def run_synth(spec: ExperimentSpec, out: Path) -> dict:
    rows = [synth_cell(spec, n, seed, out) for n in spec.n_grid for seed in spec.seeds]
    p_cols = _p_columns(spec.depth + 1)
    values = ["epistemic_std", "aleatoric_std", "predictive_std", "rmse", "calibration_rmse", "additivity_gap", *p_cols]
    agg = _aggregate(rows, ["n"], values)
    write_rows(out / "synth_summary.csv", ["n", "seed", "status", *values], rows + agg)
    if spec.plots:
        means = [r for r in agg if r["seed"] == "mean"]
        ns = [r["n"] for r in means]
        line_plot_svg(
            out / "synth_uncertainty.svg",
            {k: (ns, [r[k] for r in means]) for k in ("epistemic_std", "aleatoric_std", "predictive_std")},
            "N", "std", logx=True,
        )
        line_plot_svg(out / "synth_p.svg", {c: (ns, [r[c] for r in means]) for c in p_cols}, "N", "p", logx=True)
    return {"rows": rows, "aggregate": agg}


# ---------------------------------------------------------------- CSV regression


def _mixture_nll(y, means, variances) -> float:
    """Mean negative log density of ``y`` under the equal-weight Gaussian mixture over MC samples."""
    log_p = -0.5 * np.log(2 * math.pi * variances) - 0.5 * (y[None] - means) ** 2 / variances
    return float(-np.mean(logsumexp(log_p, axis=0) - math.log(means.shape[0])))


def run_regress(spec: ExperimentSpec, out: Path) -> dict:
    target = spec.target if spec.target is not None else -1
    if isinstance(target, str) and target.lstrip("-").isdigit():
        target = int(target)
    full = load_csv(spec.data, target)
    hetero = spec.precision_mode == "heteroscedastic_head"
    rows = []
    for seed in spec.seeds:
        for k in range(spec.splits):
            split_seed = seed * 100_003 + k
            tr, _, te = split(full, (0.9, 0.0, 0.1), split_seed)
            tr, te = standardise(tr, te)
            model = build_mlp(
                tr.x.shape[1], [spec.widths[0]] * spec.depth, tr.y.shape[1], RngStream(split_seed, 1),
                heteroscedastic=hetero, log_tau=None if hetero else 0.0, temperature=spec.temperature,
                p_init=spec.p_init,
            )
            obj = ObjectiveConfig(n=len(tr), lengthscale=spec.lengthscale, precision_mode=spec.precision_mode)
            row = dict(seed=seed, split=k)
            try:
                model, trace = train(model, tr, obj, _train_config(spec, len(tr), split_seed))
            except TrainingError as exc:
                row["status"] = f"diverged@{exc.step}"
                rows.append(row)
                continue
            samples = mc_predict(model, te.x, spec.mc_samples, RngStream(split_seed, 2))
            ys = tr.y_norm.std
            means = samples.means * ys + tr.y_norm.mean
            variances = samples.variances * ys**2
            y_raw = tr.y_norm.invert(te.y)
            rmse = float(np.sqrt(np.mean((means.mean(axis=0) - y_raw) ** 2)))
            row.update(status="ok", rmse=rmse, nll=_mixture_nll(y_raw, means, variances))
            row["tau"] = None if model.log_tau is None else math.exp(float(model.log_tau[0])) / float(ys[0]) ** 2
            row.update(zip(_p_columns(len(trace.converged_p())), trace.converged_p()))
            rows.append(row)
    values = ["rmse", "nll", "tau", *_p_columns(spec.depth + 1)]
    if hetero:
        values.remove("tau")
    agg = _aggregate(rows, [], values)
    write_rows(out / "regress_summary.csv", ["seed", "split", "status", *values], rows + agg)
    return {"rows": rows, "aggregate": agg}


# ---------------------------------------------------------------- MNIST


def _mnist_subset(ds: Dataset, n: int, seed: int) -> Dataset:
    if n > len(ds):
        raise ArgumentError(f"requested {n} images but only {len(ds)} are available")
    idx = np.sort(RngStream(seed, 0x1D3).permutation(len(ds))[:n])
    return ds.subset(idx, ds.tag)


def mnist_cell(spec: ExperimentSpec, train_full: Dataset, test: Dataset, n: int, width: int, seed: int) -> dict:
    tr = _mnist_subset(train_full, n, seed)
    model = build_mlp(
        tr.x.shape[1], [width] * spec.depth, 10, RngStream(seed, 1), kind="classification",
        temperature=spec.temperature, p_init=spec.p_init,
    )
    obj = ObjectiveConfig(n=n, lengthscale=spec.lengthscale, loss_kind="cross_entropy", precision_mode="fixed")
    row = dict(n=n, width=width, seed=seed)
    try:
        model, trace = train(model, tr, obj, _train_config(spec, n, seed))
    except TrainingError as exc:
        row["status"] = f"diverged@{exc.step}"
        return row
    probs = classification_predict(model, test.x, spec.mc_samples, RngStream(seed, 2))
    row.update(status="ok", accuracy=float(np.mean(np.argmax(probs, axis=1) == test.y)))
    row.update(zip(_p_columns(len(trace.converged_p())), trace.converged_p()))
    return row


def run_mnist(spec: ExperimentSpec, out: Path) -> dict:
    train_full = load_mnist(spec.data, "train")
    test = load_mnist(spec.data, "test")
    if spec.test_size < len(test):
        test = _mnist_subset(test, spec.test_size, 0)
    rows = [
        mnist_cell(spec, train_full, test, n, width, seed)
        for n in spec.n_grid
        for width in spec.widths
        for seed in spec.seeds
    ]
    p_cols = _p_columns(spec.depth + 1)
    agg = _aggregate(rows, ["n", "width"], ["accuracy", *p_cols])
    write_rows(out / "mnist_summary.csv", ["n", "width", "seed", "status", "accuracy", *p_cols], rows + agg)
    if spec.plots:
        means = [r for r in agg if r["seed"] == "mean"]
        if len(spec.widths) > 1:
            ws = [r["width"] for r in means]
            line_plot_svg(out / "mnist_p_width.svg", {c: (ws, [r[c] for r in means]) for c in p_cols}, "width", "p", logx=True)
        if len(spec.n_grid) > 1:
            ns = [r["n"] for r in means]
            line_plot_svg(out / "mnist_p_data.svg", {c: (ns, [r[c] for r in means]) for c in p_cols}, "N", "p", logx=True)
    return {"rows": rows, "aggregate": agg}


# ---------------------------------------------------------------- calibration


def self_consistent_targets(decomp, rng: RngStream):
    """Targets drawn from the predictive Gaussians themselves."""
    return decomp.mean + rng.gaussian(decomp.mean.shape) * np.sqrt(decomp.predictive_var)


def run_calibrate(spec: ExperimentSpec, out: Path) -> dict:
    rows = []
    for n in spec.n_grid:
        for seed in spec.seeds:
            model, _, _, test_ds = train_synth_cell(spec, n, seed)
            decomp = decompose(mc_predict(model, test_ds.x, spec.mc_samples, RngStream(seed, 2)))
            model_curve = calibration_curve(decomp, decomp.mean, test_ds.y)
            self_curve = calibration_curve(decomp, decomp.mean, self_consistent_targets(decomp, RngStream(seed, 3)))
            model_curve.to_csv(out / f"calibration_model_n{n}_seed{seed}.csv")
            self_curve.to_csv(out / f"calibration_self_n{n}_seed{seed}.csv")
            rows.append(dict(n=n, seed=seed, status="ok", model_rmse=model_curve.rmse, self_rmse=self_curve.rmse))
    write_rows(out / "calibration_summary.csv", ["n", "seed", "status", "model_rmse", "self_rmse"], rows)
    return {"rows": rows, "levels": list(DEFAULT_LEVELS)}


RUNNERS = {
    "gradcheck": run_gradcheck,
    "synth": run_synth,
    "regress": run_regress,
    "mnist": run_mnist,
    "calibrate": run_calibrate,
}


def run(spec: ExperimentSpec) -> dict:
    """Resolve defaults, write the manifest and dispatch to the task runner."""
    spec = spec.resolved()
    out = Path(spec.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
    write_manifest(spec, out)
    log.info("running %s into %s", spec.task, out)
    return RUNNERS[spec.task](spec, out)

