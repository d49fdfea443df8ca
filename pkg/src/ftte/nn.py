"""Self-contained dense-network engine with hand-derived gradients.

The model family is deliberately tiny: fully connected layers with ReLU
hidden activations and a softmax cross-entropy head. Everything is a pure
function of its inputs plus an explicit seed, so experiment traces are
deterministic and each gradient can be checked against finite differences.

Numeric conventions:

* Parameters, activations handed back to callers, and dataset tensors are
  float32 (4 bytes/value for payload and memory accounting).
* Softmax/loss/gradient internals accumulate in float64; gradients are
  returned as float32 tensors. Float32 accumulation is too noisy for the
  finite-difference tolerance this engine is held to.
* Softmax subtracts the per-row max before exponentiating; argmax ties
  break toward the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng

UNIT_WEIGHTS = "weights"
UNIT_BIAS = "bias"


class ShapeMismatchError(ValueError):
    """Tensors disagree with the shapes the model expects."""


class EmptyDatasetError(ValueError):
    """An operation that needs data received none."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: ``layer_dims = [d_in, hidden..., num_classes]``."""

    layer_dims: tuple[int, ...]
    init_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dimension")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"all layer dimensions must be >= 1, got {self.layer_dims}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def layer_names(self) -> list[str]:
        return [f"dense{i}" for i in range(self.num_layers)]

    def unit_counts(self) -> dict[tuple[str, str], int]:
        """Value count per (layer, unit) in layer order, weights before bias."""
        counts: dict[tuple[str, str], int] = {}
        for i, name in enumerate(self.layer_names()):
            counts[(name, UNIT_WEIGHTS)] = self.layer_dims[i] * self.layer_dims[i + 1]
            counts[(name, UNIT_BIAS)] = self.layer_dims[i + 1]
        return counts

    def num_params(self) -> int:
        return sum(self.unit_counts().values())


@dataclass
class LayerParams:
    name: str
    weights: np.ndarray  # float32 [fan_in, fan_out]
    bias: np.ndarray  # float32 [fan_out]

    def copy(self) -> "LayerParams":
        return LayerParams(self.name, self.weights.copy(), self.bias.copy())


@dataclass
class ParamSet:
    """Ordered, named layer parameters; the unit of aggregation."""

    layers: list[LayerParams]

    def copy(self) -> "ParamSet":
        return ParamSet([layer.copy() for layer in self.layers])

    def layer(self, name: str) -> LayerParams:
        for lp in self.layers:
            if lp.name == name:
                return lp
        raise KeyError(f"no layer named {name!r}")

    def unit(self, name: str, unit: str) -> np.ndarray:
        lp = self.layer(name)
        if unit == UNIT_WEIGHTS:
            return lp.weights
        if unit == UNIT_BIAS:
            return lp.bias
        raise KeyError(f"unknown unit {unit!r}")

    def iter_units(self):
        for lp in self.layers:
            yield lp.name, UNIT_WEIGHTS, lp.weights
            yield lp.name, UNIT_BIAS, lp.bias

    def num_values(self) -> int:
        return sum(arr.size for _, _, arr in self.iter_units())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, _, arr in self.iter_units()])

    def spec_dims(self) -> tuple[int, ...]:
        dims = [self.layers[0].weights.shape[0]]
        dims.extend(lp.weights.shape[1] for lp in self.layers)
        return tuple(dims)


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bitwise equality of two parameter sets."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.name != lb.name:
            return False
        if not (np.array_equal(la.weights, lb.weights) and np.array_equal(la.bias, lb.bias)):
            return False
    return True


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # float32 [b, d_in]
    labels: np.ndarray  # int64 [b]

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ShapeMismatchError(f"batch inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ShapeMismatchError(
                f"labels shape {self.labels.shape} does not match inputs {self.inputs.shape}"
            )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardCache:
    """Activations needed by backward: inputs to each layer plus pre-activations."""

    activations: list[np.ndarray]  # float64, A_0 .. A_{L-1}  (input to each layer)
    pre_activations: list[np.ndarray]  # float64, Z_1 .. Z_L


def _ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in {name}")


def init_params(spec: ModelSpec) -> ParamSet:
    """Glorot-uniform weights, zero biases, fully determined by ``init_seed``.

    Weights for layer ``l`` are drawn uniformly from
    ``(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`` in layer
    order from a single Philox stream keyed with the init seed; biases
    consume no draws.
    """
    rng = make_rng(spec.init_seed)
    layers: list[LayerParams] = []
    for i, name in enumerate(spec.layer_names()):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        bias = np.zeros(fan_out, dtype=np.float32)
        layers.append(LayerParams(name, weights, bias))
    return ParamSet(layers)


def forward(params: ParamSet, batch: Batch) -> tuple[np.ndarray, ForwardCache]:
    """Run the network, returning float32 logits ``[b, num_classes]`` and a cache."""
    d_in = params.layers[0].weights.shape[0]
    if batch.inputs.shape[1] != d_in:
        raise ShapeMismatchError(
            f"batch input dim {batch.inputs.shape[1]} does not match model input dim {d_in}"
        )
    a = batch.inputs.astype(np.float64)
    activations = [a]
    pre_activations: list[np.ndarray] = []
    last = len(params.layers) - 1
    for i, lp in enumerate(params.layers):
        z = a @ lp.weights.astype(np.float64) + lp.bias.astype(np.float64)
        pre_activations.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            activations.append(a)
    logits = pre_activations[-1].astype(np.float32)
    _ensure_finite("logits", logits)
    return logits, ForwardCache(activations, pre_activations)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(params: ParamSet, batch: Batch) -> tuple[float, ParamSet]:
    """Mean softmax cross-entropy and its exact gradients.

    The gradient ParamSet is aligned layer-for-layer with ``params``.
    ReLU uses the zero subgradient at exactly zero pre-activation.
    """
    if np.any(batch.labels < 0) or np.any(batch.labels >= params.layers[-1].bias.shape[0]):
        raise ValueError("batch labels out of range for the output layer")
    _, cache = forward(params, batch)
    z_out = cache.pre_activations[-1]
    b = batch.size
    log_probs = _log_softmax(z_out)
    loss = float(-log_probs[np.arange(b), batch.labels].mean())

    probs = np.exp(log_probs)
    grad_z = probs
    grad_z[np.arange(b), batch.labels] -= 1.0
    grad_z /= b

    grad_layers: list[LayerParams] = []
    for i in range(len(params.layers) - 1, -1, -1):
        lp = params.layers[i]
        a_in = cache.activations[i]
        grad_w = (a_in.T @ grad_z).astype(np.float32)
        grad_b = grad_z.sum(axis=0).astype(np.float32)
        grad_layers.append(LayerParams(lp.name, grad_w, grad_b))
        if i > 0:
            grad_a = grad_z @ lp.weights.astype(np.float64).T
            grad_z = grad_a * (cache.pre_activations[i - 1] > 0.0)
    grads = ParamSet(grad_layers[::-1])
    for _, _, arr in grads.iter_units():
        _ensure_finite("gradients", arr)
    return loss, grads


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, mask=None) -> ParamSet:
    """One SGD step ``p <- p - lr * g`` on mask-selected units.

    ``mask`` is any object with ``is_selected(layer_name, unit)``; ``None``
    updates everything. Unselected units are returned bit-identical.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if len(grads.layers) != len(params.layers):
        raise ShapeMismatchError("gradient/parameter layer counts differ")
    new_layers: list[LayerParams] = []
    lr32 = np.float32(lr)
    for lp, gp in zip(params.layers, grads.layers):
        if lp.weights.shape != gp.weights.shape or lp.bias.shape != gp.bias.shape:
            raise ShapeMismatchError(f"gradient shape mismatch on layer {lp.name}")
        weights = lp.weights
        bias = lp.bias
        if mask is None or mask.is_selected(lp.name, UNIT_WEIGHTS):
            weights = weights - lr32 * gp.weights
        else:
            weights = weights.copy()
        if mask is None or mask.is_selected(lp.name, UNIT_BIAS):
            bias = bias - lr32 * gp.bias
        else:
            bias = bias.copy()
        new_layers.append(LayerParams(lp.name, weights, bias))
    return ParamSet(new_layers)


def evaluate(params: ParamSet, dataset) -> tuple[float, float]:
    """Accuracy and mean loss over an iterable of batches.

    Accuracy uses the argmax decision with ties broken toward the lowest
    class index; the loss is the sample-weighted mean cross-entropy.
    """
    total = 0
    correct = 0
    loss_sum = 0.0
    for batch in dataset:
        logits, _ = forward(params, batch)
        predictions = np.argmax(logits, axis=1)
        correct += int((predictions == batch.labels).sum())
        log_probs = _log_softmax(logits.astype(np.float64))
        loss_sum += float(-log_probs[np.arange(batch.size), batch.labels].sum())
        total += batch.size
    if total == 0:
        raise EmptyDatasetError("evaluate needs at least one sample")
    return correct / total, loss_sum / total
