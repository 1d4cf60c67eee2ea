"""Dense MLP with range-restricted forward/backward passes.

Layers are addressed 1-based (layer ``k`` maps ``layer_dims[k-1]`` to
``layer_dims[k]``) so that a client's share of the model can be named as a
contiguous range ``(from_layer, to_layer)``. Hidden layers use ReLU; the last
layer emits raw logits and softmax is folded into the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up with the model."""


class ContractError(ValueError):
    """Raised when arguments violate an operation's contract."""


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


@dataclass
class ModelParams:
    layers: List[DenseLayer]
    layer_dims: List[int]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ContractError("a model needs at least 2 layers to be splittable")
        if len(self.layer_dims) != len(self.layers) + 1:
            raise ContractError("layer_dims must have one more entry than layers")
        for k, layer in enumerate(self.layers):
            expect = (self.layer_dims[k + 1], self.layer_dims[k])
            if layer.weight.shape != expect or layer.bias.shape != (expect[0],):
                raise ShapeError(
                    f"layer {k + 1}: weight {layer.weight.shape}, bias {layer.bias.shape}; expected {expect}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer(self, k: int) -> DenseLayer:
        """Return layer ``k`` (1-based)."""
        return self.layers[k - 1]

    def copy(self) -> "ModelParams":
        return ModelParams([l.copy() for l in self.layers], list(self.layer_dims))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in self.layers)

    def same_structure(self, other: "ModelParams") -> bool:
        return list(self.layer_dims) == list(other.layer_dims)


@dataclass
class ActivationCache:
    from_layer: int
    to_layer: int
    input: np.ndarray
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.from_layer <= self.to_layer:
            raise ContractError(f"bad cache range ({self.from_layer}, {self.to_layer})")


@dataclass
class LayerGrad:
    weight_grad: np.ndarray
    bias_grad: np.ndarray


@dataclass
class GradientSlice:
    """Per-layer gradients for layers ``from_layer..to_layer``.

    ``grads`` hold the raw gradients; ``scale`` is the aggregation weight that
    multiplies them when the slice is applied.
    """

    from_layer: int
    to_layer: int
    grads: List[LayerGrad]
    scale: float = 1.0

    def __post_init__(self):
        if len(self.grads) != self.to_layer - self.from_layer + 1:
            raise ContractError("grads must cover exactly from_layer..to_layer")
        if not 0.0 <= self.scale <= 1.0:
            raise ContractError(f"scale must lie in [0, 1], got {self.scale}")

    @property
    def layers(self) -> range:
        return range(self.from_layer, self.to_layer + 1)

    def grad(self, k: int) -> LayerGrad:
        return self.grads[k - self.from_layer]

    def weighted(self, scale: float) -> "GradientSlice":
        """Same gradients tagged with aggregation weight ``scale``."""
        return GradientSlice(self.from_layer, self.to_layer, self.grads, float(scale))


def init_mlp(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Fan-in scaled uniform init, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 3:
        raise ContractError(f"need at least 3 layer dims (W >= 2), got {dims}")
    if any(d < 1 for d in dims):
        raise ContractError(f"all layer dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out)))
    return ModelParams(layers, dims)


def zeros_like_model(model: ModelParams) -> ModelParams:
    return ModelParams(
        [DenseLayer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers],
        list(model.layer_dims),
    )


def _check_range(model: ModelParams, from_layer: int, to_layer: int) -> None:
    if not 1 <= from_layer <= to_layer <= model.num_layers:
        raise ContractError(
            f"layer range ({from_layer}, {to_layer}) outside 1..{model.num_layers}"
        )


def forward_range(
    model: ModelParams, from_layer: int, to_layer: int, x: np.ndarray
) -> Tuple[np.ndarray, ActivationCache]:
    _check_range(model, from_layer, to_layer)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[from_layer - 1]:
        raise ShapeError(
            f"input of shape {x.shape} does not feed layer {from_layer} "
            f"(expects width {model.layer_dims[from_layer - 1]})"
        )
    cache = ActivationCache(from_layer, to_layer, x)
    a = x
    W = model.num_layers
    for k in range(from_layer, to_layer + 1):
        layer = model.layer(k)
        z = a @ layer.weight.T + layer.bias
        a = z if k == W else np.maximum(z, 0.0)
        cache.pre.append(z)
        cache.post.append(a)
    return a, cache


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_range(model, 1, model.num_layers, x)[0]


def loss_and_output_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logit rows but labels of shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def backward_range(
    model: ModelParams, cache: ActivationCache, upstream_grad: np.ndarray
) -> Tuple[GradientSlice, np.ndarray]:
    """Backpropagate ``upstream_grad`` (d loss / d output of ``cache.to_layer``).

    Returns the parameter gradients for the cached range and the gradient with
    respect to the range's input activation, which is what a split partner
    receives.
    """
    _check_range(model, cache.from_layer, cache.to_layer)
    if len(cache.pre) != cache.to_layer - cache.from_layer + 1:
        raise ContractError("cache does not cover its declared range")
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if delta.shape != cache.post[-1].shape:
        raise ShapeError(
            f"upstream grad {delta.shape} does not match layer {cache.to_layer} output {cache.post[-1].shape}"
        )
    W = model.num_layers
    grads: List[LayerGrad] = []
    for k in range(cache.to_layer, cache.from_layer - 1, -1):
        idx = k - cache.from_layer
        if k != W:
            # ReLU subgradient at exactly 0 is taken as 0
            delta = delta * (cache.pre[idx] > 0.0)
        a_prev = cache.post[idx - 1] if idx > 0 else cache.input
        layer = model.layer(k)
        grads.append(LayerGrad(delta.T @ a_prev, delta.sum(axis=0)))
        delta = delta @ layer.weight
    grads.reverse()
    return GradientSlice(cache.from_layer, cache.to_layer, grads), delta


def full_gradient(model: ModelParams, x: np.ndarray, labels: np.ndarray) -> Tuple[float, GradientSlice]:
    logits, cache = forward_range(model, 1, model.num_layers, x)
    loss, g = loss_and_output_grad(logits, labels)
    grads, _ = backward_range(model, cache, g)
    return loss, grads


def apply_cached_update(
    model: ModelParams,
    own_slice: Optional[GradientSlice],
    partner_slice: Optional[GradientSlice],
    lr: float,
    overlap_layers: Iterable[int] = (),
) -> ModelParams:
    """One cached-gradient step on a client's local model.

    A layer touched by a single slice moves by ``lr * scale * g``. A layer in
    ``overlap_layers`` must be touched by both slices and moves by
    ``2 * lr * (scale_own * g_own + scale_partner * g_partner)``.
    Returns a new model; the input is left untouched.
    """
    slices = [s for s in (own_slice, partner_slice) if s is not None]
    overlap = set(int(k) for k in overlap_layers)
    for s in slices:
        _check_range(model, s.from_layer, s.to_layer)
    for k in overlap:
        if len(slices) < 2 or not all(k in s.layers for s in slices):
            raise ContractError(f"overlap layer {k} is not covered by both slices")

    out = model.copy()
    for k in range(1, model.num_layers + 1):
        touching = [s for s in slices if k in s.layers]
        if not touching:
            continue
        if len(touching) == 2 and k not in overlap:
            raise ContractError(f"layer {k} touched by both slices but not declared overlapping")
        step_w = sum(s.scale * s.grad(k).weight_grad for s in touching)
        step_b = sum(s.scale * s.grad(k).bias_grad for s in touching)
        factor = 2.0 * lr if k in overlap else lr
        layer = out.layer(k)
        if step_w.shape != layer.weight.shape or step_b.shape != layer.bias.shape:
            raise ShapeError(f"gradient for layer {k} has the wrong shape")
        layer.weight -= factor * step_w
        layer.bias -= factor * step_b
    return out


def sgd_step(model: ModelParams, grads: GradientSlice, lr: float) -> ModelParams:
    return apply_cached_update(model, grads, None, lr)


def accuracy_and_loss(model: ModelParams, x: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    logits = forward(model, x)
    loss, _ = loss_and_output_grad(logits, labels)
    acc = float((logits.argmax(axis=1) == labels).mean())
    return acc, loss
