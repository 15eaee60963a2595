"""Dense ReLU classifiers on a flat parameter vector, with exact gradients.

Layer k stores a weight matrix of shape (in_dim, out_dim) followed by a bias of
length out_dim; logits are ``x @ W + b`` chained through the layers. The loss
is mean softmax cross-entropy over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .numcore import RngStream

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise UsageError("architecture needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise UsageError(f"layer {k}: dimensions must be positive")
            if layer.activation not in ACTIVATIONS:
                raise UsageError(f"layer {k}: unknown activation {layer.activation!r}")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise UsageError(f"layer {k} out_dim {a.out_dim} != layer {k + 1} in_dim {b.in_dim}")
        if self.layers[-1].activation != "identity":
            raise UsageError("final layer must have identity activation (logits)")
        if self.layers[-1].out_dim != self.num_classes:
            raise UsageError("final layer width must equal num_classes")

    @classmethod
    def mlp(cls, dims) -> "ArchSpec":
        """``mlp([8, 32, 32, 3])``: ReLU hidden layers, identity output."""
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise UsageError("an MLP needs at least input and output widths")
        n = len(dims) - 1
        layers = tuple(
            Layer(dims[k], dims[k + 1], "identity" if k == n - 1 else "relu") for k in range(n)
        )
        return cls(layers, dims[-1])

    @classmethod
    def parse(cls, text: str) -> "ArchSpec":
        try:
            return cls.mlp(int(tok) for tok in text.replace(",", "-").split("-"))
        except ValueError as exc:
            if isinstance(exc, UsageError):
                raise
            raise UsageError(f"malformed architecture {text!r}; expected e.g. 8-32-32-3") from None

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"kind": "dense", "in_dim": l.in_dim, "out_dim": l.out_dim, "activation": l.activation}
                for l in self.layers
            ],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = []
        for entry in d["layers"]:
            if entry.get("kind", "dense") != "dense":
                raise UsageError(f"unsupported layer kind {entry.get('kind')!r}")
            layers.append(Layer(int(entry["in_dim"]), int(entry["out_dim"]), entry["activation"]))
        return cls(tuple(layers), int(d["num_classes"]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Architecture plus a read-only flat float64 parameter vector."""

    arch: ArchSpec
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64).ravel()
        if flat.size != self.arch.n_params:
            raise UsageError(f"expected {self.arch.n_params} parameters, got {flat.size}")
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError("parameters contain NaN or Inf")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (W, b) views into ``flat``."""
        out, pos = [], 0
        for layer in self.arch.layers:
            w = self.flat[pos:pos + layer.in_dim * layer.out_dim].reshape(layer.in_dim, layer.out_dim)
            pos += layer.in_dim * layer.out_dim
            b = self.flat[pos:pos + layer.out_dim]
            pos += layer.out_dim
            out.append((w, b))
        return out

    def replace(self, flat) -> "ModelParams":
        return ModelParams(self.arch, flat)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison."""
        return self.arch == other.arch and self.flat.tobytes() == other.flat.tobytes()


def flatten(arch: ArchSpec, blocks) -> np.ndarray:
    """Inverse of :meth:`ModelParams.unflatten`."""
    parts = []
    for (w, b) in blocks:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    flat = np.concatenate(parts)
    if flat.size != arch.n_params:
        raise UsageError("blocks do not match the architecture")
    return flat


def init_params(arch: ArchSpec, stream: RngStream) -> ModelParams:
    """He-uniform weights drawn from ``stream``, zero biases."""
    blocks = []
    for layer in arch.layers:
        bound = math.sqrt(6.0 / layer.in_dim)
        u = stream.uniforms(layer.in_dim * layer.out_dim)
        blocks.append(((2.0 * u - 1.0) * bound, np.zeros(layer.out_dim)))
    return ModelParams(arch, flatten(arch, blocks))


def _check_inputs(params: ModelParams, x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise UsageError(f"input shape {x.shape} does not match arch input dim {params.arch.input_dim}")
    if y is None:
        return x, None, single
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (x.shape[0],):
        raise UsageError(f"labels shape {y.shape} does not match batch size {x.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise UsageError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= params.arch.num_classes):
        raise UsageError(f"labels must lie in [0, {params.arch.num_classes})")
    return x, y, single


def _forward(blocks, arch: ArchSpec, x):
    """Returns the list of layer inputs and the logits."""
    inputs = []
    h = x
    for (w, b), layer in zip(blocks, arch.layers):
        inputs.append(h)
        z = h @ w + b
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return inputs, h


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _per_sample(logits, y):
    logp = _log_softmax(logits)
    return -logp[np.arange(len(y)), y], logp


def logits(params: ModelParams, x) -> np.ndarray:
    x, _, single = _check_inputs(params, x, None)
    _, out = _forward(params.unflatten(), params.arch, x)
    return out[0] if single else out


def predict(params: ModelParams, x) -> np.ndarray:
    return np.argmax(logits(params, x), axis=-1)


def per_sample_loss(params: ModelParams, x, y) -> np.ndarray:
    x, y, _ = _check_inputs(params, x, y)
    _, out = _forward(params.unflatten(), params.arch, x)
    return _per_sample(out, y)[0]


def forward_loss(params: ModelParams, x, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the per-sample logits."""
    x, y, single = _check_inputs(params, x, y)
    _, out = _forward(params.unflatten(), params.arch, x)
    losses, _ = _per_sample(out, y)
    return float(losses.mean()), (out[0] if single else out)


def _backward(params: ModelParams, x, y, want_params: bool, want_input: bool, scale: float):
    blocks = params.unflatten()
    arch = params.arch
    inputs, out = _forward(blocks, arch, x)
    losses, logp = _per_sample(out, y)
    # d(per-sample loss)/d(logits), times `scale`
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    delta *= scale
    grads = [None] * len(blocks)
    for k in range(len(blocks) - 1, -1, -1):
        w, _ = blocks[k]
        if want_params:
            grads[k] = (inputs[k].T @ delta, delta.sum(axis=0))
        if k == 0 and not want_input:
            break
        delta = delta @ w.T
        if k > 0 and arch.layers[k - 1].activation == "relu":
            delta = delta * (inputs[k] > 0.0)
    flat_grad = flatten(arch, grads) if want_params else None
    return losses, flat_grad, (delta if want_input else None)


def param_grad(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of the mean batch loss with respect to ``params.flat``."""
    x, y, _ = _check_inputs(params, x, y)
    return _backward(params, x, y, True, False, 1.0 / x.shape[0])[1]


def loss_and_param_grad(params: ModelParams, x, y) -> tuple[float, np.ndarray]:
    x, y, _ = _check_inputs(params, x, y)
    losses, g, _ = _backward(params, x, y, True, False, 1.0 / x.shape[0])
    return float(losses.mean()), g


def input_grad(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of each sample's own loss with respect to its input row."""
    x, y, single = _check_inputs(params, x, y)
    g = _backward(params, x, y, False, True, 1.0)[2]
    return g[0] if single else g
