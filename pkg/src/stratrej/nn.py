"""Small dense ReLU networks with hand-written backpropagation.

Everything is float64 numpy. Functions accept a single input vector of
shape ``(d,)`` or a batch of shape ``(n, d)`` and return outputs with the
matching leading shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "id")


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the model."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced a non-finite value."""


@dataclass(frozen=True)
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "relu"

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"layer weight {w.shape} incompatible with bias {b.shape}")
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class Mlp:
    """Dense network mapping ``R^d`` to ``k`` logits.

    Parameters are read-only arrays so a trained model can be shared between
    threads; training produces new ``Mlp`` instances via :func:`sgd_step`.
    """

    layers: tuple[Layer, ...]
    k: int = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[0] != nxt.w.shape[1]:
                raise ShapeError(
                    f"layer dimensions do not chain: {prev.w.shape} -> {nxt.w.shape}"
                )
        for layer in layers:
            if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
                raise NumericError("model parameters must be finite")
        k = layers[-1].w.shape[0]
        if k < 2:
            raise ShapeError("need at least two classes")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "k", int(k))
        object.__setattr__(self, "d", int(layers[0].w.shape[1]))

    @property
    def widths(self) -> list[int]:
        return [self.d] + [layer.w.shape[0] for layer in self.layers]

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.w, layer.b) for layer in self.layers]

    def with_params(self, params) -> "Mlp":
        return Mlp(tuple(Layer(w, b, layer.act) for (w, b), layer in zip(params, self.layers)))


@dataclass(frozen=True)
class LossSpec:
    """Scalar objective of the logits whose gradients we want.

    ``kind="cross_entropy"`` uses ``target``; ``kind="custom"`` uses ``fn``,
    which maps a logits batch ``(n, k)`` to ``(values (n,), dvalues/dlogits (n, k))``.
    """

    kind: str = "cross_entropy"
    target: int | np.ndarray | None = None
    fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    @classmethod
    def cross_entropy(cls, target) -> "LossSpec":
        return cls("cross_entropy", target=target)

    @classmethod
    def custom(cls, fn) -> "LossSpec":
        return cls("custom", fn=fn)

    def evaluate(self, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "cross_entropy":
            k = logits.shape[1]
            target = np.broadcast_to(np.asarray(self.target), (logits.shape[0],))
            if np.any(target < 0) or np.any(target >= k):
                raise ValueError(f"target class out of range [0, {k})")
            return cross_entropy(logits, target)
        if self.kind == "custom" and self.fn is not None:
            return self.fn(logits)
        raise ValueError(f"invalid loss spec {self.kind!r}")


def init_mlp(widths: Sequence[int], seed: int = 0) -> Mlp:
    """He-uniform initialised network with ReLU hidden layers, zero biases."""
    if len(widths) < 2:
        raise ShapeError("widths must include input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        act = "id" if i == len(widths) - 2 else "relu"
        layers.append(Layer(w, np.zeros(n_out), act))
    return Mlp(tuple(layers))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. the logits."""
    rows = np.arange(logits.shape[0])
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return -logp[rows, target], grad


def argmax(values: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(values, axis=-1)


def _as_batch(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.d:
        raise ShapeError(f"expected input of dimension {model.d}, got shape {x.shape}")
    return batch, single


def _forward_cache(model: Mlp, batch: np.ndarray):
    acts = [batch]
    pre = []
    h = batch
    for layer in model.layers:
        z = h @ layer.w.T + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.act == "relu" else z
        acts.append(h)
    return acts, pre


def _backward(model: Mlp, acts, pre, dlogits: np.ndarray, want_params: bool = True):
    grads = []
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.act == "relu":
            # subgradient of relu at 0 is taken as 0
            delta = delta * (pre[i] > 0.0)
        if want_params:
            grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        delta = delta @ layer.w
    grads.reverse()
    return grads, delta


def logits(model: Mlp, x) -> np.ndarray:
    batch, single = _as_batch(model, x)
    out = _forward_cache(model, batch)[0][-1]
    return out[0] if single else out


def forward(model: Mlp, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, probs)`` for one input or a batch."""
    z = logits(model, x)
    return z, softmax(z)


def predict(model: Mlp, x) -> np.ndarray:
    return argmax(logits(model, x))


def value_and_grad_input(model: Mlp, x, spec: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Loss values and their gradients w.r.t. the inputs, row by row."""
    batch, single = _as_batch(model, x)
    acts, pre = _forward_cache(model, batch)
    values, dlogits = spec.evaluate(acts[-1])
    _, dx = _backward(model, acts, pre, dlogits, want_params=False)
    # a single reduction: any inf/nan entry makes the sum non-finite
    if not np.isfinite(dx.sum()):
        raise NumericError("non-finite input gradient")
    if single:
        return values[0], dx[0]
    return values, dx


def grad_input(model: Mlp, x, spec: LossSpec) -> np.ndarray:
    return value_and_grad_input(model, x, spec)[1]


def value_and_grad_params(model: Mlp, x, spec: LossSpec):
    """Mean loss over a batch and its gradient w.r.t. every layer's (w, b)."""
    batch, _ = _as_batch(model, x)
    n = batch.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts, pre = _forward_cache(model, batch)
    values, dlogits = spec.evaluate(acts[-1])
    grads, _ = _backward(model, acts, pre, dlogits / n)
    for gw, gb in grads:
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite parameter gradient")
    return float(values.mean()), grads


def grad_params(model: Mlp, x, y=None, spec: LossSpec | None = None):
    """Mean cross-entropy gradient over the batch ``(x, y)`` unless ``spec`` is given."""
    if spec is None:
        spec = LossSpec.cross_entropy(np.asarray(y))
    return value_and_grad_params(model, x, spec)[1]


def backprop_logits(model: Mlp, x, dlogits: np.ndarray):
    """Parameter gradients (summed over rows) for an arbitrary logits cotangent."""
    batch, _ = _as_batch(model, x)
    acts, pre = _forward_cache(model, batch)
    grads, _ = _backward(model, acts, pre, dlogits)
    return grads


def add_grads(a, b, scale: float = 1.0):
    return [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a, b)]


def sgd_step(model: Mlp, grads, lr: float, momentum: float = 0.0, velocity=None):
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``params <- params - lr * v``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.params()]
    new_velocity = []
    new_params = []
    for (w, b), (gw, gb), (vw, vb) in zip(model.params(), grads, velocity):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shape does not match model")
        vw = momentum * vw + gw
        vb = momentum * vb + gb
        new_velocity.append((vw, vb))
        new_params.append((w - lr * vw, b - lr * vb))
    return model.with_params(new_params), new_velocity


def to_dict(model: Mlp) -> dict:
    return {
        "layers": [
            {"w": layer.w.tolist(), "b": layer.b.tolist(), "act": layer.act}
            for layer in model.layers
        ],
        "k": model.k,
        "d": model.d,
    }


def from_dict(doc: dict) -> Mlp:
    try:
        layers = tuple(
            Layer(np.array(entry["w"], dtype=np.float64), np.array(entry["b"], dtype=np.float64), entry["act"])
            for entry in doc["layers"]
        )
    except (KeyError, TypeError) as exc:
        raise ShapeError(f"malformed model document: {exc}") from exc
    model = Mlp(layers)
    if model.k != doc.get("k", model.k) or model.d != doc.get("d", model.d):
        raise ShapeError("declared k/d do not match layer shapes")
    return model


def dumps(model: Mlp) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(to_dict(model), indent=1)


def loads(text: str) -> Mlp:
    return from_dict(json.loads(text))


def save(model: Mlp, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(model))
        fh.write("\n")


def load(path) -> Mlp:
    with open(path) as fh:
        return loads(fh.read())
