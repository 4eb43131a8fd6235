"""Likelihoods, the per-layer KL regulariser, the MC variational objective and MAP-EM for tau.

The objective evaluated here is

    loss = mean_i NLL(y_i | f(x_i)) + (1 / N) * sum_l KL_l

with one noise realisation per call. ``KL_l`` is the layer regulariser

    weight_reg * ||M||^2 / (1 - p) + dropout_reg * K * (p log p + (1 - p) log(1 - p))

whose coefficients do not depend on N or tau. :meth:`ObjectiveConfig.coefficients`
returns the equivalent "Keras-style" coefficients ``l^2 / (tau N)`` and
``2 / (tau N)`` for users who fold everything into one squared-error loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ConfigurationError, DataError, DegeneratePosteriorError, DimensionError
from .layers import EPS, MLP, ConcreteDropoutLayer
from .ndcore import RngStream, Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
PRECISION_MODES = ("homoscedastic_mapem", "heteroscedastic_head", "fixed")
LOSS_KINDS = ("euclidean", "cross_entropy")


@dataclass
class ObjectiveConfig:
    """Dataset size, prior length-scale and likelihood settings.

    ``tau`` is the fixed precision used in ``"fixed"`` mode and the
    reference precision for :meth:`coefficients`.
    """

    n: int
    lengthscale: float = 1e-2
    precision_mode: str = "heteroscedastic_head"
    tau_prior: tuple[float, float] = (0.1, 0.01)
    loss_kind: str = "euclidean"
    tau: float = 1.0

    def __post_init__(self):
        if self.n is None or int(self.n) <= 0:
            raise ConfigurationError(f"dataset size N must be positive, got {self.n}")
        self.n = int(self.n)
        if not self.lengthscale > 0:
            raise ConfigurationError(f"length-scale must be positive, got {self.lengthscale}")
        if self.precision_mode not in PRECISION_MODES:
            raise ConfigurationError(f"unknown precision mode {self.precision_mode!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        self.tau_prior = tuple(float(v) for v in self.tau_prior)

    def effective_lengthscale(self, k_in: int) -> float:
        return self.lengthscale * math.sqrt(k_in)

    def coefficients(self, k_in: int, tau: float | None = None) -> tuple[float, float]:
        """(weight_reg, dropout_reg) as ``l_eff^2 / (tau N)`` and ``2 / (tau N)``.

        For cross-entropy the factor 2 is dropped and tau is 1.
        """
        tau = self.tau if tau is None else tau
        l_eff = self.effective_lengthscale(k_in)
        if self.loss_kind == "cross_entropy":
            return l_eff**2 / self.n, 1.0 / self.n
        return l_eff**2 / (tau * self.n), 2.0 / (tau * self.n)

    def kl_coefficients(self, k_in: int) -> tuple[float, float]:
        """Coefficients of the per-layer KL term itself (independent of N and tau).

        These are :meth:`coefficients` rescaled so the dropout coefficient is 1;
        the rescaling is the factor that turns a squared-error loss back into
        a Gaussian negative log-likelihood.
        """
        weight_reg, dropout_reg = self.coefficients(k_in)
        return weight_reg / dropout_reg, 1.0

    def configure(self, model: MLP) -> MLP:
        for layer in model.dropout_layers():
            layer.weight_reg, layer.dropout_reg = self.kl_coefficients(layer.input_dim)
        return model


def bernoulli_entropy(p):
    """Entropy in nats of Bernoulli(p); p is clamped to [EPS, 1 - EPS]."""
    p = np.clip(p, EPS, 1.0 - EPS)
    h = -p * np.log(p) - (1.0 - p) * np.log(1.0 - p)
    return float(h) if np.ndim(h) == 0 else h


def layer_kl_regulariser(layer: ConcreteDropoutLayer) -> float:
    p = layer.p
    sq = float(np.sum(layer.weight * layer.weight))
    return layer.weight_reg * sq / (1.0 - p) - layer.dropout_reg * layer.input_dim * bernoulli_entropy(p)


def layer_kl_gradient(layer: ConcreteDropoutLayer) -> dict[str, Tensor]:
    """Gradient of :func:`layer_kl_regulariser` w.r.t. the weight matrix and ``p_logit``."""
    p = layer.p
    sq = float(np.sum(layer.weight * layer.weight))
    pc = min(max(p, EPS), 1.0 - EPS)
    d_p = layer.weight_reg * sq / (1.0 - p) ** 2
    if EPS < p < 1.0 - EPS:
        d_p += layer.dropout_reg * layer.input_dim * (math.log(pc) - math.log1p(-pc))
    return {
        "weight": 2.0 * layer.weight_reg * layer.weight / (1.0 - p),
        "p_logit": np.array([d_p * p * (1.0 - p)]),
    }


def _check_same_shape(y: Tensor, f: Tensor):
    if np.shape(y) != np.shape(f):
        raise DimensionError(f"targets {list(np.shape(y))} and predictions {list(np.shape(f))} differ")


def _as_rows(a: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(len(a), -1) if a.ndim != 2 else a


def _log_var_like(log_var, y: Tensor) -> Tensor:
    log_var = np.asarray(log_var, dtype=np.float64)
    if log_var.ndim == 1 and log_var.size == y.shape[0]:
        log_var = log_var.reshape(y.shape[0], -1)
    return np.broadcast_to(log_var, y.shape)


def gaussian_nll(y: Tensor, f: Tensor, log_var) -> float:
    """Mean over points of the Gaussian negative log-likelihood (summed over output dims)."""
    y, f = _as_rows(y), _as_rows(f)
    _check_same_shape(y, f)
    log_var = _log_var_like(log_var, y)
    r = y - f
    per_point = 0.5 * np.exp(-log_var) * r * r + 0.5 * log_var + HALF_LOG_2PI
    return float(np.sum(per_point) / y.shape[0])


def gaussian_nll_grad(y: Tensor, f: Tensor, log_var) -> tuple[Tensor, Tensor]:
    """Gradients of :func:`gaussian_nll` w.r.t. ``f`` and (elementwise) ``log_var``."""
    y, f = _as_rows(y), _as_rows(f)
    log_var = _log_var_like(log_var, y)
    m = y.shape[0]
    prec = np.exp(-log_var)
    r = y - f
    return -prec * r / m, (0.5 - 0.5 * prec * r * r) / m


def _check_labels(labels, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels_int = labels.astype(np.int64)
        if not np.array_equal(labels_int, labels):
            raise DataError("labels must be integers")
        labels = labels_int.ravel()
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at row {bad[0]} outside [0, {c})")
    return labels


def cross_entropy_nll(logits: Tensor, labels) -> float:
    """Mean negative log softmax probability of the true class."""
    labels = _check_labels(labels, logits.shape[1])
    logp = log_softmax(logits, axis=1)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    g = softmax(logits, axis=1)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def _likelihood(model: MLP, out: Tensor, y, config: ObjectiveConfig, need_grad: bool):
    """Negative log-likelihood of one batch and its gradients (output, log_tau)."""
    if config.loss_kind == "cross_entropy":
        nll = cross_entropy_nll(out, y)
        return nll, (cross_entropy_grad(out, y) if need_grad else None), None
    mean, log_var = model.split_output(out)
    y = _as_rows(y)
    if config.precision_mode == "heteroscedastic_head":
        if log_var is None:
            raise ConfigurationError("heteroscedastic mode needs a model with a log-variance head")
        nll = gaussian_nll(y, mean, log_var)
        if not need_grad:
            return nll, None, None
        g_mean, g_lv = gaussian_nll_grad(y, mean, log_var)
        return nll, np.concatenate([g_mean, g_lv], axis=1), None
    if model.log_tau is None:
        log_var = -math.log(config.tau)
    else:
        log_var = -float(model.log_tau[0])
    nll = gaussian_nll(y, mean, log_var)
    if not need_grad:
        return nll, None, None
    g_mean, g_lv = gaussian_nll_grad(y, mean, log_var)
    g_log_tau = None
    if model.log_tau is not None:
        g_log_tau = np.array([-float(np.sum(g_lv))])
    return nll, g_mean, g_log_tau


def _elbo(model, x, y, config, rng, noise, need_grad):
    if x.shape[0] < 1:
        raise DataError("empty batch")
    out = model.forward(x, rng, noise=noise)
    nll, g_out, g_log_tau = _likelihood(model, out, y, config, need_grad)
    regs = [layer_kl_regulariser(layer) for layer in model.dropout_layers()]
    loss = nll + sum(regs) / config.n
    if not need_grad:
        return loss, regs, None
    grads = model.backward(g_out)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConcreteDropoutLayer):
            for name, g in layer_kl_gradient(layer).items():
                grads[f"layer{i}.{name}"] = grads[f"layer{i}.{name}"] + g / config.n
    if model.log_tau is not None:
        grads["log_tau"] = np.zeros(1) if g_log_tau is None else g_log_tau
    return loss, regs, grads


def elbo_loss(
    model: MLP, x: Tensor, y, config: ObjectiveConfig, rng: RngStream | None, noise=None
) -> tuple[float, list[float]]:
    """Single-sample estimate of the variational objective and the per-layer KL terms."""
    loss, regs, _ = _elbo(model, x, y, config, rng, noise, False)
    return loss, regs


def elbo_loss_and_grad(model: MLP, x: Tensor, y, config: ObjectiveConfig, rng, noise=None):
    """Like :func:`elbo_loss`, also returning gradients keyed like ``model.parameters()``."""
    return _elbo(model, x, y, config, rng, noise, True)


def _posterior_terms(residuals, prior, n=None) -> tuple[float, float]:
    a, b = prior
    r = np.asarray(residuals, dtype=np.float64).ravel()
    n = r.size if n is None else n
    shape_term = a - 1.0 + n / 2.0
    rate_term = b + 0.5 * float(np.dot(r, r))
    if shape_term <= 0:
        raise DegeneratePosteriorError(f"a - 1 + N/2 = {shape_term:g} <= 0; tau posterior has no mode")
    if rate_term <= 0:
        raise DegeneratePosteriorError("zero residuals with a zero prior rate; tau is unbounded")
    return shape_term, rate_term


def mapem_objective(log_tau: float, residuals, prior=(0.1, 0.01)) -> float:
    """(N/2) log tau - (tau/2) sum r^2 + (a - 1) log tau - b tau."""
    a, b = prior
    r = np.asarray(residuals, dtype=np.float64).ravel()
    tau = math.exp(log_tau)
    return (r.size / 2.0 + a - 1.0) * log_tau - 0.5 * tau * float(np.dot(r, r)) - b * tau


def mapem_tau_fixed_point(residuals, prior=(0.1, 0.01)) -> float:
    """Closed-form maximiser tau* = (a - 1 + N/2) / (b + sum r^2 / 2)."""
    shape_term, rate_term = _posterior_terms(residuals, prior)
    return shape_term / rate_term


def mapem_tau_step(
    residuals,
    prior=(0.1, 0.01),
    log_tau: float = -2.0,
    n_steps: int = 10,
    lr: float = 0.5,
    max_move: float = 1.0,
) -> float:
    """Partial M-step: ``n_steps`` of gradient ascent on the MAP objective in log tau.

    The gradient is divided by ``a - 1 + N/2`` so the step size does not
    depend on N, and each move is capped at ``max_move`` in log space.
    """
    shape_term, rate_term = _posterior_terms(residuals, prior)
    for _ in range(n_steps):
        grad = shape_term - math.exp(log_tau) * rate_term
        log_tau += max(-max_move, min(max_move, lr * grad / shape_term))
    return log_tau


def mapem_tau_converge(
    residuals, prior=(0.1, 0.01), log_tau: float = -2.0, tol: float = 1e-14, max_steps: int = 100_000
) -> float:
    """Full M-step: gradient ascent until the log-tau move drops below ``tol``."""
    shape_term, rate_term = _posterior_terms(residuals, prior)
    for _ in range(max_steps):
        move = max(-1.0, min(1.0, 0.5 * (1.0 - math.exp(log_tau) * rate_term / shape_term)))
        log_tau += move
        if abs(move) < tol:
            break
    return log_tau
