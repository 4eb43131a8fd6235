"""Monte-Carlo prediction, epistemic/aleatoric decomposition and regression calibration curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax
from scipy.stats import norm

from .errors import ArgumentError, DegenerateIntervalError, DimensionError
from .layers import MLP
from .ndcore import RngStream, Tensor, population_variance

DEFAULT_LEVELS = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class PredictiveSamples:
    """``means`` and ``variances`` of shape [S x B x D_out], one slice per mask sample."""

    means: Tensor
    variances: Tensor

    def __post_init__(self):
        if self.means.shape != self.variances.shape or self.means.ndim != 3:
            raise DimensionError(
                f"means {list(self.means.shape)} and variances {list(self.variances.shape)} must be equal 3-d"
            )
        if np.any(self.variances < 0):
            raise ArgumentError("negative predicted variance")

    @property
    def s(self) -> int:
        return self.means.shape[0]


@dataclass
class UncertaintyDecomposition:
    mean: Tensor
    epistemic_var: Tensor
    aleatoric_var: Tensor
    predictive_var: Tensor

    @property
    def epistemic_std(self) -> Tensor:
        return np.sqrt(self.epistemic_var)

    @property
    def aleatoric_std(self) -> Tensor:
        return np.sqrt(self.aleatoric_var)

    @property
    def predictive_std(self) -> Tensor:
        return np.sqrt(self.predictive_var)


def _noise_variance(model: MLP, out: Tensor, noise_var):
    mean, log_var = model.split_output(out)
    if log_var is not None:
        return mean, np.exp(log_var)
    if noise_var is None:
        noise_var = 0.0 if model.log_tau is None else math.exp(-float(model.log_tau[0]))
    return mean, np.full_like(mean, float(noise_var))


def mc_predict(model: MLP, x: Tensor, s: int, rng: RngStream, noise_var: float | None = None) -> PredictiveSamples:
    """``s`` stochastic forward passes, each on its own forked random stream.

    Aleatoric variance comes from the heteroscedastic head, else from
    ``noise_var``, else from the model's ``log_tau`` (zero if it has none).
    """
    if s < 1:
        raise ArgumentError(f"need at least one MC sample, got {s}")
    means, variances = [], []
    for _ in range(s):
        mean, var = _noise_variance(model, model.forward(x, rng.fork()), noise_var)
        means.append(mean)
        variances.append(var)
    return PredictiveSamples(np.stack(means), np.stack(variances))


def decompose(samples: PredictiveSamples) -> UncertaintyDecomposition:
    """Epistemic = population variance of the sampled means; aleatoric = mean sampled variance."""
    if samples.s < 2:
        raise ArgumentError(f"decomposition needs at least 2 MC samples, got {samples.s}")
    epistemic = population_variance(samples.means, axis=0)
    aleatoric = samples.variances.mean(axis=0)
    return UncertaintyDecomposition(samples.means.mean(axis=0), epistemic, aleatoric, epistemic + aleatoric)


def classification_predict(model: MLP, x: Tensor, s: int, rng: RngStream, batch: int = 2000) -> Tensor:
    """Softmax probabilities averaged over ``s`` mask samples, evaluated in row chunks."""
    if s < 1:
        raise ArgumentError(f"need at least one MC sample, got {s}")
    forks = [rng.fork() for _ in range(s)]
    probs = np.zeros((x.shape[0], model.layers[-1].output_dim))
    for sub in forks:
        for start in range(0, x.shape[0], batch):
            chunk = slice(start, start + batch)
            probs[chunk] += softmax(model.forward(x[chunk], sub), axis=1)
    return probs / s


@dataclass
class CalibrationCurve:
    """Coverage of centred Gaussian predictive intervals at each nominal level.

    ``counts[k]`` is the number of points whose smallest covering interval
    is the one at ``levels[k]``; ``outside`` counts points not covered by
    any, so ``sum(counts) + outside`` is the number of evaluated points.
    """

    levels: list[float]
    empirical: list[float]
    counts: list[int]
    outside: int

    @property
    def rmse(self) -> float:
        gaps = np.asarray(self.empirical) - np.asarray(self.levels)
        return float(np.sqrt(np.mean(gaps * gaps)))

    @property
    def bins(self) -> list[tuple[float, float, int]]:
        return list(zip(self.levels, self.empirical, self.counts))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "empirical", "count"])
            for level, emp, count in self.bins:
                w.writerow([repr(float(level)), repr(float(emp)), count])


def calibration_curve(
    decomp: UncertaintyDecomposition, means: Tensor, targets: Tensor, levels=DEFAULT_LEVELS
) -> CalibrationCurve:
    """Fraction of targets inside the central interval of predictive mass q, for each level q."""
    levels = sorted(float(q) for q in levels)
    if any(not 0.0 < q <= 1.0 for q in levels):
        raise ArgumentError("levels must lie in (0, 1]")
    mu = np.asarray(means, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    sd = np.sqrt(np.asarray(decomp.predictive_var, dtype=np.float64).ravel())
    if not (mu.size == t.size == sd.size):
        raise DimensionError(f"means {mu.size}, targets {t.size}, variances {sd.size} differ in size")
    if np.any(sd <= 0):
        raise DegenerateIntervalError(f"zero predictive variance at {int(np.sum(sd <= 0))} point(s)")
    score = np.abs(t - mu) / sd
    half_widths = [math.inf if q >= 1.0 else float(norm.ppf(0.5 + 0.5 * q)) for q in levels]
    covered = [int(np.count_nonzero(score <= w)) for w in half_widths]
    counts = [c - prev for c, prev in zip(covered, [0, *covered[:-1]])]
    empirical = [c / t.size for c in covered]
    return CalibrationCurve(levels, empirical, counts, t.size - covered[-1])


def decomposition_to_csv(path, x: Tensor, decomp: UncertaintyDecomposition) -> None:
    """One row per point: x (first input column), mean and the three standard deviations."""
    x = np.asarray(x).reshape(len(x), -1)
    cols = [
        decomp.mean.reshape(len(x), -1)[:, 0],
        decomp.epistemic_std.reshape(len(x), -1)[:, 0],
        decomp.aleatoric_std.reshape(len(x), -1)[:, 0],
        decomp.predictive_std.reshape(len(x), -1)[:, 0],
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "mean", "epistemic_std", "aleatoric_std", "predictive_std"])
        for i in range(len(x)):
            w.writerow([repr(float(x[i, 0]))] + [repr(float(c[i])) for c in cols])
