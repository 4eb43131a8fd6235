"""Dense layers, the Concrete dropout wrapper and a sequential MLP container.

Every layer keeps what its forward pass needs for the backward pass and
returns exact reverse-mode gradients of the sampled (single noise
realisation) output. Dropout is applied to a layer's *input*; the retained
units are rescaled by ``1 / (1 - p)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, DimensionError, FormatError, StateError
from .ndcore import RngStream, Tensor, as_tensor, check_finite, matmul

EPS = 1e-7
DEFAULT_TEMPERATURE = 0.1
DEFAULT_P_LOGIT_RANGE = (-2.0, 0.0)
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "concrete-dropout-checkpoint"
CHECKPOINT_VERSION = 1


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _drop_logit(p, u, eps: float = EPS):
    return np.log(p + eps) - np.log(1.0 - p + eps) + np.log(u + eps) - np.log(1.0 - u + eps)


def concrete_drop_prob(p, u, t: float, eps: float = EPS):
    """Relaxed Bernoulli drop indicator for drop probability ``p`` and uniform noise ``u``.

    Works elementwise on scalars or arrays. As ``t -> 0`` this becomes the
    hard rule "drop iff ``u > 1 - p``".
    """
    if not t > 0:
        raise ArgumentError(f"temperature must be positive, got {t}")
    z = expit(_drop_logit(p, u, eps) / t)
    if np.ndim(z) == 0:
        return float(z)
    return z


@dataclass
class MaskRealisation:
    u: Tensor
    z_drop: Tensor


class DenseLayer:
    """Affine map ``x @ weight.T + bias`` followed by an activation."""

    def __init__(self, weight: Tensor, bias: Tensor, activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {activation!r}")
        self.weight = as_tensor(weight)
        self.bias = as_tensor(bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {list(self.weight.shape)} and bias {list(self.bias.shape)} disagree"
            )
        self.activation = activation
        self._x = None
        self._pre = None

    @classmethod
    def init(cls, k_in: int, k_out: int, rng: RngStream, activation: str = "relu") -> "DenseLayer":
        weight = rng.gaussian((k_out, k_in), 0.0, 1.0 / math.sqrt(k_in))
        return cls(weight, np.zeros(k_out), activation)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor, rng: RngStream | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"layer expects input [B x {self.input_dim}], got {list(x.shape)}"
            )
        pre = matmul(x, self.weight.T) + self.bias
        self._x, self._pre = x, pre
        if self.activation == "relu":
            return np.maximum(pre, 0.0)
        return pre

    def backward(self, grad_out: Tensor) -> tuple[dict[str, Tensor], Tensor]:
        if self._x is None:
            raise StateError("backward called before forward")
        g = grad_out
        if self.activation == "relu":
            g = g * (self._pre > 0)
        grads = {"weight": g.T @ self._x, "bias": g.sum(axis=0)}
        return grads, g @ self.weight


class ConcreteDropoutLayer:
    """A :class:`DenseLayer` whose input is dropped with a learnable probability.

    ``p = sigmoid(p_logit)`` so p stays inside (0, 1) for any finite logit.
    ``weight_reg`` and ``dropout_reg`` are the coefficients used by the KL
    regulariser; they are filled in from an objective configuration.
    """

    def __init__(
        self,
        inner: DenseLayer,
        p_logit: float,
        temperature: float = DEFAULT_TEMPERATURE,
        weight_reg: float = 0.0,
        dropout_reg: float = 0.0,
    ):
        if not temperature > 0:
            raise ArgumentError(f"temperature must be positive, got {temperature}")
        if weight_reg < 0 or dropout_reg < 0:
            raise ArgumentError("regulariser coefficients must be non-negative")
        self.inner = inner
        self.p_logit = np.array([float(p_logit)])
        self.temperature = float(temperature)
        self.weight_reg = float(weight_reg)
        self.dropout_reg = float(dropout_reg)
        self.mask: MaskRealisation | None = None
        self._x = None
        self._x_drop = None

    @classmethod
    def init(
        cls,
        k_in: int,
        k_out: int,
        rng: RngStream,
        activation: str = "relu",
        temperature: float = DEFAULT_TEMPERATURE,
        p_logit_range: tuple[float, float] = DEFAULT_P_LOGIT_RANGE,
    ) -> "ConcreteDropoutLayer":
        inner = DenseLayer.init(k_in, k_out, rng, activation)
        lo, hi = p_logit_range
        p_logit = float(rng.uniform_range(1, lo, hi)[0])
        return cls(inner, p_logit, temperature)

    @property
    def p(self) -> float:
        return float(expit(self.p_logit[0]))

    @property
    def input_dim(self) -> int:
        return self.inner.input_dim

    @property
    def output_dim(self) -> int:
        return self.inner.output_dim

    @property
    def weight(self) -> Tensor:
        return self.inner.weight

    def parameters(self) -> dict[str, Tensor]:
        return {**self.inner.parameters(), "p_logit": self.p_logit}

    def forward(self, x: Tensor, rng: RngStream | None = None, u: Tensor | None = None) -> Tensor:
        """Drop the input, then apply the inner layer.

        Pass ``u`` to replay a recorded noise draw instead of sampling.
        """
        x_drop, mask = apply_concrete_dropout(x, self, rng, u=u)
        self._x, self._x_drop, self.mask = x, x_drop, mask
        return self.inner.forward(x_drop)

    def backward(self, grad_out: Tensor) -> tuple[dict[str, Tensor], Tensor]:
        if self.mask is None:
            raise StateError("backward called before forward")
        grads, g_drop = self.inner.backward(grad_out)
        p = self.p
        z, u = self.mask.z_drop, self.mask.u
        t = self.temperature
        keep = 1.0 / (1.0 - p)
        dz_dp = z * (1.0 - z) / t * (1.0 / (p + EPS) + 1.0 / (1.0 - p + EPS))
        dxdrop_dp = self._x * (keep * keep * (1.0 - z) - keep * dz_dp)
        grad_p = float(np.sum(g_drop * dxdrop_dp))
        grads["p_logit"] = np.array([grad_p * p * (1.0 - p)])
        return grads, g_drop * (1.0 - z) * keep


def apply_concrete_dropout(
    x: Tensor, layer: ConcreteDropoutLayer, rng: RngStream | None, u: Tensor | None = None
) -> tuple[Tensor, MaskRealisation]:
    """Relaxed dropout of ``x`` with the layer's ``p`` and temperature.

    Returns ``x * (1 - z_drop) / (1 - p)`` together with the noise and drop
    indicators that produced it.
    """
    if x.ndim != 2 or x.shape[1] != layer.input_dim:
        raise DimensionError(f"dropout expects input [B x {layer.input_dim}], got {list(x.shape)}")
    if u is None:
        if rng is None:
            raise ArgumentError("a random stream or recorded noise is required")
        u = rng.uniform(x.shape)
    elif u.shape != x.shape:
        raise DimensionError(f"recorded noise {list(u.shape)} does not match input {list(x.shape)}")
    p = layer.p
    z = concrete_drop_prob(p, u, layer.temperature)
    out = x * (1.0 - z) / (1.0 - p)
    return out, MaskRealisation(u=u, z_drop=z)


class MLP:
    """A stack of dense or Concrete-dropout layers with an optional precision parameter.

    ``kind`` is ``"regression"`` or ``"classification"``. Heteroscedastic
    regression doubles the last layer's width: the first ``out_dim``
    columns are means and the rest are log-variances. A homoscedastic
    regressor carries a global ``log_tau`` instead.
    """

    def __init__(
        self,
        layers: list,
        kind: str = "regression",
        heteroscedastic: bool = False,
        log_tau: float | None = None,
    ):
        if kind not in ("regression", "classification"):
            raise ArgumentError(f"unknown model kind {kind!r}")
        if heteroscedastic and kind != "regression":
            raise ArgumentError("a heteroscedastic head only applies to regression")
        for a, b in zip(layers, layers[1:]):
            if a.output_dim != b.input_dim:
                raise DimensionError(f"layer widths do not chain: {a.output_dim} -> {b.input_dim}")
        self.layers = list(layers)
        self.kind = kind
        self.heteroscedastic = heteroscedastic
        self.log_tau = None if log_tau is None else np.array([float(log_tau)])

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def out_dim(self) -> int:
        k = self.layers[-1].output_dim
        return k // 2 if self.heteroscedastic else k

    def dropout_layers(self) -> list[ConcreteDropoutLayer]:
        return [layer for layer in self.layers if isinstance(layer, ConcreteDropoutLayer)]

    def p_values(self) -> list[float]:
        return [layer.p for layer in self.dropout_layers()]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                params[f"layer{i}.{name}"] = arr
        if self.log_tau is not None:
            params["log_tau"] = self.log_tau
        return params

    def forward(self, x: Tensor, rng: RngStream | None = None, noise: list | None = None) -> Tensor:
        """Raw network output; ``noise`` replays one recorded ``u`` per dropout layer."""
        h = x
        k = 0
        for layer in self.layers:
            if isinstance(layer, ConcreteDropoutLayer):
                u = None if noise is None else noise[k]
                h = layer.forward(h, rng, u=u)
                k += 1
            else:
                h = layer.forward(h)
        return check_finite(h, "network output")

    def recorded_noise(self) -> list[Tensor]:
        return [layer.mask.u for layer in self.dropout_layers()]

    def split_output(self, out: Tensor) -> tuple[Tensor, Tensor | None]:
        """(means, log-variances); log-variances is None without a heteroscedastic head."""
        if self.heteroscedastic:
            d = self.out_dim
            return out[:, :d], out[:, d:]
        return out, None

    def backward(self, grad_out: Tensor) -> dict[str, Tensor]:
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer_grads, g = self.layers[i].backward(g)
            for name, arr in layer_grads.items():
                grads[f"layer{i}.{name}"] = arr
        return grads


def build_mlp(
    in_dim: int,
    widths: list[int],
    out_dim: int,
    rng: RngStream,
    *,
    kind: str = "regression",
    concrete: bool = True,
    heteroscedastic: bool = False,
    log_tau: float | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    p_init: float | None = None,
    p_logit_range: tuple[float, float] = DEFAULT_P_LOGIT_RANGE,
) -> MLP:
    """ReLU MLP with every layer (output layer included) wrapped in Concrete dropout.

    ``p_init`` fixes the initial drop probability of every layer; otherwise
    each logit is drawn uniformly from ``p_logit_range``.
    """
    dims = [in_dim, *widths, 2 * out_dim if heteroscedastic else out_dim]
    layers = []
    for i, (k_in, k_out) in enumerate(zip(dims, dims[1:])):
        act = "identity" if i == len(dims) - 2 else "relu"
        if concrete:
            lrange = p_logit_range if p_init is None else (logit(p_init), logit(p_init))
            layers.append(ConcreteDropoutLayer.init(k_in, k_out, rng, act, temperature, lrange))
        else:
            layers.append(DenseLayer.init(k_in, k_out, rng, act))
    return MLP(layers, kind=kind, heteroscedastic=heteroscedastic, log_tau=log_tau)


def model_to_dict(model: MLP) -> dict:
    layers = []
    for layer in model.layers:
        dense = layer.inner if isinstance(layer, ConcreteDropoutLayer) else layer
        entry = {
            "type": "concrete" if isinstance(layer, ConcreteDropoutLayer) else "dense",
            "activation": dense.activation,
            "shape": list(dense.weight.shape),
            "weight": dense.weight.ravel().tolist(),
            "bias": dense.bias.tolist(),
        }
        if isinstance(layer, ConcreteDropoutLayer):
            entry.update(
                p_logit=float(layer.p_logit[0]),
                temperature=layer.temperature,
                weight_reg=layer.weight_reg,
                dropout_reg=layer.dropout_reg,
            )
        layers.append(entry)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "heteroscedastic": model.heteroscedastic,
        "log_tau": None if model.log_tau is None else float(model.log_tau[0]),
        "layers": layers,
    }


def model_from_dict(blob: dict) -> MLP:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a concrete-dropout checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {blob.get('version')}")
    layers = []
    for entry in blob["layers"]:
        dense = DenseLayer(
            np.array(entry["weight"], dtype=np.float64).reshape(entry["shape"]),
            np.array(entry["bias"], dtype=np.float64),
            entry["activation"],
        )
        if entry["type"] == "concrete":
            layers.append(
                ConcreteDropoutLayer(
                    dense,
                    entry["p_logit"],
                    entry["temperature"],
                    entry["weight_reg"],
                    entry["dropout_reg"],
                )
            )
        else:
            layers.append(dense)
    return MLP(layers, blob["kind"], blob["heteroscedastic"], blob["log_tau"])


def save_checkpoint(model: MLP, path) -> None:
    """Write a versioned JSON checkpoint; floats use shortest round-trip repr, so reloads are bit-exact."""
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_checkpoint(path) -> MLP:
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model_from_dict(blob)
