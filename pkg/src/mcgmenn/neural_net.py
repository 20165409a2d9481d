"""Minimal dense feed-forward network engine.

Implements the cluster-invariant part of the model: a plain MLP with ReLU
hidden layers, inverted dropout, an exact hand-written backward pass, and an
Adam optimizer. Output layers are always linear; the link function maps raw
logits to the response scale.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, NumericalError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Architecture presets shared by the benchmark harness: hidden widths plus
# the dropout rate applied after every hidden layer.
ARCHITECTURES: dict[str, tuple[tuple[int, ...], float]] = {
    "sim_reference": ((100, 50, 25, 12), 0.25),
}


class Link(str, enum.Enum):
    """Map from raw logits to the response scale."""

    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter tensor."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


@dataclass
class MlpModel:
    """Dense network: ``layers[i]`` is a ``(weight, bias)`` pair.

    Weight matrices are ``(fan_in, fan_out)``; layer ``i + 1`` consumes the
    output of layer ``i``. Hidden layers use ReLU; the last layer is linear.
    ``dropout_rate`` applies (inverted) dropout after every hidden activation
    in training mode only.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    dropout_rate: float = 0.0
    hidden_activation: str = "relu"
    adam: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.hidden_activation != "relu":
            raise ShapeError(f"unsupported activation {self.hidden_activation!r}")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} input dim {w.shape[0]} != layer {i - 1} "
                    f"output dim {self.layers[i - 1][0].shape[1]}"
                )
        if self.adam is None:
            self.adam = AdamState(
                m=[np.zeros_like(p) for p in self._params()],
                v=[np.zeros_like(p) for p in self._params()],
            )
        for acc, p in zip(self.adam.m + self.adam.v, self._params() * 2):
            if acc.shape != p.shape:
                raise ShapeError("Adam moment shapes do not match parameters")

    def _params(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            dropout_rate=self.dropout_rate,
            hidden_activation=self.hidden_activation,
            adam=AdamState(
                m=[a.copy() for a in self.adam.m],
                v=[a.copy() for a in self.adam.v],
                t=self.adam.t,
            ),
        )


@dataclass
class ForwardCache:
    """Per-layer activations captured by :func:`forward` for backprop.

    ``version`` snapshots the Adam step counter; a backward call against a
    model that has since been updated is rejected as a stale cache.
    """

    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    masks: list[np.ndarray | None]
    model_id: int
    version: int


def init_mlp(
    input_dim: int,
    hidden_layers: tuple[int, ...],
    output_dim: int,
    dropout_rate: float,
    rng: np.random.Generator,
) -> MlpModel:
    """He-uniform initialized MLP with zero biases."""
    dims = (input_dim, *hidden_layers, output_dim)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return MlpModel(layers=layers, dropout_rate=dropout_rate)


def forward(
    model: MlpModel,
    X: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network, returning raw logits and the activation cache.

    Inference mode (``training=False``) is deterministic. In training mode
    dropout masks are drawn from ``rng`` and scaled by ``1 / (1 - p)`` so the
    expected activation is unchanged.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {X.shape} incompatible with first layer ({model.input_dim} columns expected)")
    p = model.dropout_rate
    if training and p > 0.0 and rng is None:
        raise ContractError("training-mode forward with dropout requires an rng")

    a = X
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        z = a @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            mask = None
            if training and p > 0.0:
                mask = (rng.random(h.shape) >= p) / (1.0 - p)
                h = h * mask
            pre.append(z)
            post.append(h)
            masks.append(mask)
            a = h
        else:
            pre.append(z)
            post.append(z)
            masks.append(None)
            a = z
    cache = ForwardCache(
        inputs=X, pre=pre, post=post, masks=masks, model_id=id(model), version=model.adam.t
    )
    return a, cache


def backward(
    model: MlpModel, cache: ForwardCache, d_logits: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradients of a scalar loss w.r.t. every weight and bias.

    ``d_logits`` is the gradient of the loss w.r.t. the raw logits. The model
    is not mutated; gradients are returned in layer order.
    """
    if cache.model_id != id(model) or cache.version != model.adam.t:
        raise ContractError("cache is stale or was produced by a different model")
    d_logits = np.asarray(d_logits, dtype=float)
    n = cache.inputs.shape[0]
    if d_logits.shape != (n, model.output_dim):
        raise ShapeError(f"d_logits shape {d_logits.shape} != ({n}, {model.output_dim})")

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    delta = d_logits
    for i in range(len(model.layers) - 1, -1, -1):
        a_prev = cache.post[i - 1] if i > 0 else cache.inputs
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            da = delta @ model.layers[i][0].T
            if cache.masks[i - 1] is not None:
                da = da * cache.masks[i - 1]
            delta = da * (cache.pre[i - 1] > 0.0)
    return grads


def adam_step(
    model: MlpModel, grads: list[tuple[np.ndarray, np.ndarray]], lr: float
) -> MlpModel:
    """One Adam update in place (beta1=0.9, beta2=0.999, eps=1e-8)."""
    if lr <= 0.0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    flat: list[np.ndarray] = []
    for i, (dw, db) in enumerate(grads):
        w, b = model.layers[i]
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeError(f"gradient shapes for layer {i} do not match parameters")
        flat.extend((dw, db))
    for g in flat:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; aborting epoch")

    st = model.adam
    st.t += 1
    bc1 = 1.0 - ADAM_BETA1**st.t
    bc2 = 1.0 - ADAM_BETA2**st.t
    params = model._params()
    for p, m, v, g in zip(params, st.m, st.v, flat):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return model


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with log-sum-exp stabilization."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_link(logits: np.ndarray, link: Link | str) -> np.ndarray:
    """Map raw logits to the response scale (probabilities or means)."""
    link = Link(link)
    if link is Link.SOFTMAX:
        return softmax(logits)
    if link is Link.SIGMOID:
        return sigmoid(logits)
    return logits


def _validate_targets(logits: np.ndarray, Y: np.ndarray, link: Link) -> None:
    if logits.shape[0] != Y.shape[0]:
        raise ShapeError(f"logits rows {logits.shape[0]} != target rows {Y.shape[0]}")
    if link is Link.SOFTMAX:
        if Y.shape != logits.shape:
            raise ShapeError(f"one-hot targets {Y.shape} must match logits {logits.shape}")
        if not np.allclose(Y.sum(axis=1), 1.0):
            raise DataError("softmax targets must be one-hot rows summing to 1")
    elif link is Link.SIGMOID:
        if Y.shape != logits.shape:
            raise ShapeError(f"binary targets {Y.shape} must match logits {logits.shape}")
        if not np.all((Y == 0.0) | (Y == 1.0)):
            raise DataError("sigmoid targets must be 0/1")
    elif Y.shape != logits.shape:
        raise ShapeError(f"targets {Y.shape} must match logits {logits.shape}")


def loss_and_grad(
    logits: np.ndarray, Y: np.ndarray, link: Link | str
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over rows plus its gradient w.r.t. logits.

    softmax: cross-entropy via log-sum-exp; gradient ``(p - y) / n``.
    sigmoid: Bernoulli NLL via softplus; identity: unit-variance Gaussian NLL.
    """
    link = Link(link)
    logits = np.asarray(logits, dtype=float)
    Y = np.asarray(Y, dtype=float)
    _validate_targets(logits, Y, link)
    n = logits.shape[0]
    if link is Link.SOFTMAX:
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        nll = float(np.mean(lse - (logits * Y).sum(axis=1)))
        grad = (softmax(logits) - Y) / n
    elif link is Link.SIGMOID:
        nll = float(np.mean(np.logaddexp(0.0, logits) - Y * logits))
        grad = (sigmoid(logits) - Y) / n
    else:
        resid = logits - Y
        nll = float(np.mean(0.5 * np.sum(np.square(resid), axis=1) + 0.5 * logits.shape[1] * math.log(2.0 * math.pi)))
        grad = resid / n
    return nll, grad


def model_to_dict(model: MlpModel) -> dict:
    """Checkpoint form: ``{layers: [{w, b}], activation, dropout, output_dim}``."""
    return {
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in model.layers],
        "activation": model.hidden_activation,
        "dropout": model.dropout_rate,
        "output_dim": model.output_dim,
    }


def model_from_dict(doc: dict) -> MlpModel:
    """Inverse of :func:`model_to_dict`; the Adam state starts fresh."""
    layers = [(np.asarray(d["w"], dtype=float), np.asarray(d["b"], dtype=float)) for d in doc["layers"]]
    model = MlpModel(
        layers=layers,
        dropout_rate=float(doc["dropout"]),
        hidden_activation=doc["activation"],
    )
    if model.output_dim != int(doc["output_dim"]):
        raise DataError("checkpoint output_dim does not match layer shapes")
    return model
