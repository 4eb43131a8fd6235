"""Optimisers, the minibatch training loop and a finite-difference gradient checker."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NonFiniteError, TrainingError
from .layers import MLP
from .ndcore import RngStream, Tensor
from .objective import (
    ObjectiveConfig,
    elbo_loss,
    elbo_loss_and_grad,
    mapem_tau_converge,
    mapem_tau_step,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    optimiser: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 10
    max_steps: int | None = None
    # MAP-EM schedule for the homoscedastic precision
    mstep_iters: int = 10
    mstep_lr: float = 0.5
    final_mstep_samples: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.log_every < 1:
            raise ConfigurationError("batch_size and log_every must be >= 1, epochs >= 0")
        if self.optimiser not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimiser {self.optimiser!r}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if name not in params:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor], lr: float) -> None:
    for name, g in grads.items():
        if name in params:
            params[name] -= lr * g


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    p_values: list = field(default_factory=list)
    log_tau: list = field(default_factory=list)
    wall_clock: float = 0.0

    def record(self, step: int, loss: float, ps: list[float], log_tau: float | None):
        self.steps.append(step)
        self.losses.append(loss)
        self.p_values.append(list(ps))
        self.log_tau.append(log_tau)

    def __len__(self) -> int:
        return len(self.steps)

    def converged_p(self, fraction: float = 0.05) -> list[float]:
        """Per-layer mean of the last ``fraction`` of the logged p values."""
        if not self.p_values:
            return []
        k = max(1, int(math.ceil(fraction * len(self.p_values))))
        tail = np.asarray(self.p_values[-k:], dtype=np.float64)
        if tail.shape[1] == 0:
            return []
        return tail.mean(axis=0).tolist()

    def to_csv(self, path) -> None:
        n_layers = len(self.p_values[0]) if self.p_values else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", *[f"p_layer_{i}" for i in range(n_layers)], "log_tau"])
            for step, loss, ps, lt in zip(self.steps, self.losses, self.p_values, self.log_tau):
                w.writerow([step, repr(loss), *map(repr, ps), "" if lt is None else repr(lt)])


def _mstep_residuals(model: MLP, x, y, obj: ObjectiveConfig, rng: RngStream, samples: int):
    """Root-mean-square residual per target over ``samples`` mask draws."""
    y = y.reshape(len(y), -1)
    sq = np.zeros_like(y, dtype=np.float64)
    for _ in range(samples):
        mean, _ = model.split_output(model.forward(x, rng))
        sq += (y - mean) ** 2
    return np.sqrt(sq / samples)


def train(model: MLP, dataset, obj: ObjectiveConfig, cfg: TrainConfig) -> tuple[MLP, TrainTrace]:
    """Fit every variational parameter of ``model`` on ``dataset`` by minibatch descent.

    Weights, biases and drop-probability logits share one optimiser. In
    ``homoscedastic_mapem`` mode the global log-precision is instead updated
    by a partial M-step after every epoch and a full M-step at the end.
    Deterministic given ``cfg.seed``.
    """
    x, y = dataset.x, dataset.y
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError("empty dataset")
    if obj.n != n:
        raise ConfigurationError(f"objective N={obj.n} but the dataset has {n} rows")
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    obj.configure(model)
    mapem = obj.precision_mode == "homoscedastic_mapem" and model.log_tau is not None

    root = RngStream(cfg.seed, 0)
    shuffle_rng, mask_rng, em_rng = root.fork(), root.fork(), root.fork()
    params = {k: v for k, v in model.parameters().items() if k != "log_tau"}
    state = AdamState()
    trace = TrainTrace()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    started = time.perf_counter()
    step = 0
    while step < total:
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = perm[start : start + cfg.batch_size]
            try:
                loss, _, grads = elbo_loss_and_grad(model, x[idx], y[idx], obj, mask_rng)
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged: {exc}", step) from exc
            if not math.isfinite(loss):
                raise TrainingError("training diverged: loss is not finite", step)
            if step % cfg.log_every == 0:
                lt = None if model.log_tau is None else float(model.log_tau[0])
                trace.record(step, loss, model.p_values(), lt)
            grads.pop("log_tau", None)
            if cfg.optimiser == "adam":
                adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            else:
                sgd_step(params, grads, cfg.learning_rate)
            step += 1
        if mapem and step < total:
            r = _mstep_residuals(model, x, y, obj, em_rng, 1)
            model.log_tau[0] = mapem_tau_step(
                r, obj.tau_prior, float(model.log_tau[0]), cfg.mstep_iters, cfg.mstep_lr
            )
    if mapem:
        r = _mstep_residuals(model, x, y, obj, em_rng, cfg.final_mstep_samples)
        model.log_tau[0] = mapem_tau_converge(r, obj.tau_prior, float(model.log_tau[0]))
    trace.wall_clock = time.perf_counter() - started
    log.debug("trained %d steps in %.1fs", step, trace.wall_clock)
    return model, trace


@dataclass
class GradCheckEntry:
    group: str
    size: int
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    rtol: float

    @property
    def max_rel_error(self) -> float:
        return max(e.max_rel_error for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rtol

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_error >= self.rtol]

    def to_csv(self, path, variant: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "group", "size", "max_rel_error", "max_abs_error", "passed"])
            for e in self.entries:
                w.writerow(
                    [variant, e.group, e.size, f"{e.max_rel_error:.6e}", f"{e.max_abs_error:.6e}",
                     int(e.max_rel_error < self.rtol)]
                )


def grad_check(
    model: MLP,
    x: Tensor,
    y,
    obj: ObjectiveConfig,
    h: float = 1e-5,
    rtol: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of the objective with central finite differences.

    The noise of one forward pass is recorded and replayed for every
    perturbed evaluation. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    obj.configure(model)
    elbo_loss(model, x, y, obj, RngStream(seed, 1))
    noise = model.recorded_noise()
    _, _, analytic = elbo_loss_and_grad(model, x, y, obj, None, noise=noise)
    params = model.parameters()
    entries = []
    head_errors = []
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, _ = elbo_loss(model, x, y, obj, None, noise=noise)
            flat[i] = old - h
            down, _ = elbo_loss(model, x, y, obj, None, noise=noise)
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        a = analytic[name]
        abs_err = np.abs(a - numeric)
        rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        entries.append(GradCheckEntry(name, arr.size, float(rel.max()), float(abs_err.max())))
        last = f"layer{len(model.layers) - 1}."
        if model.heteroscedastic and name.startswith(last) and name[len(last):] in ("weight", "bias"):
            head_errors.append((rel[model.out_dim:], abs_err[model.out_dim:]))
    if head_errors:
        entries.append(
            GradCheckEntry(
                "heteroscedastic_head",
                sum(r.size for r, _ in head_errors),
                max(float(r.max()) for r, _ in head_errors),
                max(float(e.max()) for _, e in head_errors),
            )
        )
    return GradCheckReport(entries, rtol)
