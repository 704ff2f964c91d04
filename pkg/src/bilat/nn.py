"""Minimal feed-forward networks with exact reverse-mode gradients.

Everything runs in float64 on numpy. Layers are immutable records; forward and
backward passes are pure functions, so a model can be shared read-only across
threads. Losses use mean reduction over the batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "AffineSpec", "ConvSpec", "ReluSpec", "FlattenSpec", "ArchSpec",
    "Affine", "Conv", "Relu", "Flatten", "Model", "LossKind", "SgdState",
    "arch_preset", "build_model", "forward_logits", "log_softmax", "loss",
    "input_gradient", "per_example_input_gradients", "param_gradients",
    "loss_and_gradients", "sgd_step",
    "one_hot", "check_label_distribution", "predict",
]


# ---------------------------------------------------------------------------
# Architecture specs

@dataclass(frozen=True)
class AffineSpec:
    out_features: int
    in_features: int | None = None  # inferred when omitted


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    in_channels: int | None = None


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class FlattenSpec:
    pass


LayerSpec = AffineSpec | ConvSpec | ReluSpec | FlattenSpec


@dataclass(frozen=True)
class ArchSpec:
    """Input shape (C, H, W) or (features,) plus an ordered layer list."""
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]


def arch_preset(name: str, input_shape: tuple[int, ...], n_classes: int) -> ArchSpec:
    """Built-in desk-scale architectures: "small-conv" and "mlp"."""
    if name == "small-conv":
        if len(input_shape) != 3:
            raise ValueError("small-conv needs a (C, H, W) input shape")
        layers: tuple[LayerSpec, ...] = (
            ConvSpec(16, 3, 1, 1), ReluSpec(),
            ConvSpec(32, 3, 2, 1), ReluSpec(),
            FlattenSpec(),
            AffineSpec(64), ReluSpec(),
            AffineSpec(n_classes),
        )
        return ArchSpec(tuple(input_shape), layers)
    if name == "tiny-conv":
        # Smaller twin of small-conv for fast desk experiments.
        if len(input_shape) != 3:
            raise ValueError("tiny-conv needs a (C, H, W) input shape")
        layers = (
            ConvSpec(8, 3, 1, 1), ReluSpec(),
            ConvSpec(16, 3, 2, 1), ReluSpec(),
            FlattenSpec(),
            AffineSpec(64), ReluSpec(),
            AffineSpec(n_classes),
        )
        return ArchSpec(tuple(input_shape), layers)
    if name == "mlp":
        layers = (
            FlattenSpec(),
            AffineSpec(256), ReluSpec(),
            AffineSpec(256), ReluSpec(),
            AffineSpec(n_classes),
        )
        return ArchSpec(tuple(input_shape), layers)
    raise ValueError(f"unknown architecture preset {name!r}")


# ---------------------------------------------------------------------------
# Parameterized layers and the model record

@dataclass(frozen=True)
class Affine:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass(frozen=True)
class Conv:
    kernel: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray    # (out_ch,)
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Affine | Conv | Relu | Flatten

# One dict per layer, mirroring that layer's parameter arrays ("weight"/"bias"
# for affine, "kernel"/"bias" for conv, empty for relu/flatten).
Gradients = tuple[dict[str, np.ndarray], ...]


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer_params(layer).items():
                if not np.all(np.isfinite(p)):
                    raise ValueError(f"layer {i} parameter {name!r} has non-finite entries")


def layer_params(layer: Layer) -> dict[str, np.ndarray]:
    if isinstance(layer, Affine):
        return {"weight": layer.weight, "bias": layer.bias}
    if isinstance(layer, Conv):
        return {"kernel": layer.kernel, "bias": layer.bias}
    return {}


def _with_params(layer: Layer, new: dict[str, np.ndarray]) -> Layer:
    if isinstance(layer, (Affine, Conv)):
        return replace(layer, **new)
    return layer


def n_parameters(model: Model) -> int:
    return sum(p.size for layer in model.layers for p in layer_params(layer).values())


# ---------------------------------------------------------------------------
# Construction

def _feature_count(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape)) if shape else 1


def build_model(arch: ArchSpec, seed: int) -> Model:
    """He-initialized model; deterministic for a fixed seed.

    Raises ValueError naming the offending pair when declared layer sizes do
    not chain (e.g. "dimension mismatch 3 vs 5").
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in arch.input_shape)
    layers: list[Layer] = []
    for i, spec in enumerate(arch.layers):
        if isinstance(spec, AffineSpec):
            fan_in = _feature_count(shape)
            if spec.in_features is not None and spec.in_features != fan_in:
                raise ValueError(
                    f"dimension mismatch {fan_in} vs {spec.in_features} "
                    f"(layer {i} affine input)")
            w = rng.standard_normal((spec.out_features, fan_in)) * np.sqrt(2.0 / fan_in)
            layers.append(Affine(w, np.zeros(spec.out_features)))
            shape = (spec.out_features,)
        elif isinstance(spec, ConvSpec):
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
            c, h, w_ = shape
            if spec.in_channels is not None and spec.in_channels != c:
                raise ValueError(
                    f"dimension mismatch {c} vs {spec.in_channels} "
                    f"(layer {i} conv channels)")
            k, s, p = spec.kernel_size, spec.stride, spec.padding
            oh = (h + 2 * p - k) // s + 1
            ow = (w_ + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"layer {i}: conv output collapses to {oh}x{ow}")
            fan_in = c * k * k
            kernel = rng.standard_normal((spec.out_channels, c, k, k)) * np.sqrt(2.0 / fan_in)
            layers.append(Conv(kernel, np.zeros(spec.out_channels), s, p))
            shape = (spec.out_channels, oh, ow)
        elif isinstance(spec, ReluSpec):
            layers.append(Relu())
        elif isinstance(spec, FlattenSpec):
            layers.append(Flatten())
            shape = (_feature_count(shape),)
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
    if not layers or not isinstance(layers[-1], Affine):
        raise ValueError("model must end with an affine layer producing class logits")
    return Model(tuple(layers), tuple(int(s) for s in arch.input_shape),
                 layers[-1].weight.shape[0])


# ---------------------------------------------------------------------------
# Forward / backward

def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[1:] != model.input_shape:
        raise ValueError(
            f"shape mismatch: input {x.shape} does not match model input "
            f"(B, {', '.join(map(str, model.input_shape))})")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def _affine_forward(layer: Affine, x: np.ndarray):
    orig_shape = x.shape
    x2 = x.reshape(orig_shape[0], -1)
    if x2.shape[1] != layer.weight.shape[1]:
        raise ValueError(
            f"shape mismatch: affine expects {layer.weight.shape[1]} features, "
            f"got {x2.shape[1]}")
    out = x2 @ layer.weight.T + layer.bias
    return out, (x2, orig_shape)


def _affine_backward(layer: Affine, cache, g, want_params):
    x2, orig_shape = cache
    grads = {"weight": g.T @ x2, "bias": g.sum(axis=0)} if want_params else {}
    return (g @ layer.weight).reshape(orig_shape), grads


def _conv_cols(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols


def _conv_forward(layer: Conv, x: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"shape mismatch: conv expects (B, C, H, W), got {x.shape}")
    oc, ic, k, _ = layer.kernel.shape
    b, c, h, w = x.shape
    if c != ic:
        raise ValueError(f"shape mismatch: conv expects {ic} channels, got {c}")
    s, p = layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    cols = _conv_cols(xp, k, s, oh, ow)
    out = np.tensordot(cols, layer.kernel, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]
    return out, (cols, x.shape)


def _conv_backward(layer: Conv, cache, g, want_params):
    cols, x_shape = cache
    b, c, h, w = x_shape
    oc, ic, k, _ = layer.kernel.shape
    s, p = layer.stride, layer.padding
    oh, ow = g.shape[2], g.shape[3]
    grads = {}
    if want_params:
        grads["bias"] = g.sum(axis=(0, 2, 3))
        grads["kernel"] = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
    # (B, oc, oh, ow) x (oc, ic, k, k) -> (B, oh, ow, ic, k, k)
    dcols = np.tensordot(g.transpose(0, 2, 3, 1), layer.kernel, axes=([3], [0]))
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, grads


def _forward_cached(model: Model, x: np.ndarray):
    a = x
    caches = []
    for layer in model.layers:
        if isinstance(layer, Affine):
            a, cache = _affine_forward(layer, a)
        elif isinstance(layer, Conv):
            a, cache = _conv_forward(layer, a)
        elif isinstance(layer, Relu):
            cache = a > 0
            a = np.maximum(a, 0.0)
        else:  # Flatten
            cache = a.shape
            a = a.reshape(a.shape[0], -1)
        caches.append(cache)
    return a, caches


def _backward(model: Model, caches, g: np.ndarray, want_params: bool):
    grads: list[dict[str, np.ndarray]] = [dict() for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[i], caches[i]
        if isinstance(layer, Affine):
            g, grads[i] = _affine_backward(layer, cache, g, want_params)
        elif isinstance(layer, Conv):
            g, grads[i] = _conv_backward(layer, cache, g, want_params)
        elif isinstance(layer, Relu):
            g = g * cache
        else:
            g = g.reshape(cache)
    return g, tuple(grads)


def forward_logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits (B, n_classes); pure function of (model, x)."""
    x = _check_input(model, x)
    logits, _ = _forward_cached(model, x)
    return logits


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_logits(model, x), axis=1)


# ---------------------------------------------------------------------------
# Losses

class LossKind(enum.Enum):
    CROSS_ENTROPY_SOFT = "cross_entropy_soft"
    MARGIN_CW = "margin_cw"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax requires finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("class indices must be a 1-d array")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_label_distribution(y: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("label distributions must have shape (B, n)")
    if n_classes is not None and y.shape[1] != n_classes:
        raise ValueError(f"label has {y.shape[1]} classes, model expects {n_classes}")
    if np.any(y < 0.0):
        raise ValueError("label distribution has negative entries")
    if np.max(np.abs(y.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("label distribution rows must sum to 1 within 1e-9")
    return y


def _resolve_label(label, n_classes: int, batch: int, kind: LossKind):
    """Return (distribution or None, indices or None) according to the loss kind."""
    label = np.asarray(label)
    if kind is LossKind.MARGIN_CW:
        if label.ndim != 1 or not np.issubdtype(label.dtype, np.integer):
            raise TypeError("margin_cw requires hard class indices, not a distribution")
        if label.shape[0] != batch:
            raise ValueError("label batch size mismatch")
        if np.any(label < 0) or np.any(label >= n_classes):
            raise ValueError(f"class index out of range [0, {n_classes})")
        return None, label.astype(np.int64)
    if label.ndim == 1:
        if label.shape[0] != batch:
            raise ValueError("label batch size mismatch")
        return one_hot(label, n_classes), None
    dist = check_label_distribution(label, n_classes)
    if dist.shape[0] != batch:
        raise ValueError("label batch size mismatch")
    return dist, None


def _per_example_loss(logits: np.ndarray, dist, idx, kind: LossKind) -> np.ndarray:
    if kind is LossKind.CROSS_ENTROPY_SOFT:
        return -(dist * log_softmax(logits)).sum(axis=1)
    rows = np.arange(logits.shape[0])
    masked = logits.copy()
    masked[rows, idx] = -np.inf
    return masked.max(axis=1) - logits[rows, idx]


def _loss_grad_logits(logits: np.ndarray, dist, idx, kind: LossKind, scale: float) -> np.ndarray:
    if kind is LossKind.CROSS_ENTROPY_SOFT:
        p = np.exp(log_softmax(logits))
        return (p - dist) * scale
    rows = np.arange(logits.shape[0])
    masked = logits.copy()
    masked[rows, idx] = -np.inf
    top = np.argmax(masked, axis=1)  # first maximizer on ties
    g = np.zeros_like(logits)
    g[rows, top] += scale
    g[rows, idx] -= scale
    return g


def loss(model: Model, x: np.ndarray, label, kind: LossKind = LossKind.CROSS_ENTROPY_SOFT) -> np.ndarray:
    """Per-example loss vector (B,)."""
    x = _check_input(model, x)
    logits, _ = _forward_cached(model, x)
    dist, idx = _resolve_label(label, model.n_classes, x.shape[0], kind)
    return _per_example_loss(logits, dist, idx, kind)


def loss_and_gradients(model: Model, x: np.ndarray, label,
                       kind: LossKind = LossKind.CROSS_ENTROPY_SOFT,
                       *, want_input: bool = False, want_params: bool = False):
    """Mean loss over the batch plus requested gradients of that mean.

    Returns (mean_loss, input_grad or None, param_grads or None).
    """
    x = _check_input(model, x)
    logits, caches = _forward_cached(model, x)
    dist, idx = _resolve_label(label, model.n_classes, x.shape[0], kind)
    per_ex = _per_example_loss(logits, dist, idx, kind)
    if not (want_input or want_params):
        return float(per_ex.mean()), None, None
    g0 = _loss_grad_logits(logits, dist, idx, kind, 1.0 / x.shape[0])
    dx, grads = _backward(model, caches, g0, want_params)
    return float(per_ex.mean()), (dx if want_input else None), (grads if want_params else None)


def input_gradient(model: Model, x: np.ndarray, label,
                   kind: LossKind = LossKind.CROSS_ENTROPY_SOFT) -> np.ndarray:
    """Gradient of the mean per-example loss with respect to x."""
    _, dx, _ = loss_and_gradients(model, x, label, kind, want_input=True)
    return dx


def param_gradients(model: Model, x: np.ndarray, label,
                    kind: LossKind = LossKind.CROSS_ENTROPY_SOFT) -> Gradients:
    """Gradient of the mean per-example loss for every parameter array."""
    _, _, grads = loss_and_gradients(model, x, label, kind, want_params=True)
    return grads


def per_example_input_gradients(model: Model, x: np.ndarray, label,
                                kind: LossKind = LossKind.CROSS_ENTROPY_SOFT) -> np.ndarray:
    """Gradient of each example's own loss w.r.t. that example (no 1/batch)."""
    x = _check_input(model, x)
    logits, caches = _forward_cached(model, x)
    dist, idx = _resolve_label(label, model.n_classes, x.shape[0], kind)
    g0 = _loss_grad_logits(logits, dist, idx, kind, 1.0)
    dx, _ = _backward(model, caches, g0, want_params=False)
    return dx


# ---------------------------------------------------------------------------
# Optimizer

@dataclass(frozen=True)
class SgdState:
    buffers: tuple[dict[str, np.ndarray], ...]


def sgd_step(model: Model, grads: Gradients, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, state: SgdState | None = None) -> tuple[Model, SgdState]:
    """Momentum-SGD update: buf = mu*buf + (g + wd*p); p -= lr*buf."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(grads) != len(model.layers):
        raise ValueError("gradient structure does not mirror the model layers")
    buffers = state.buffers if state is not None else tuple({} for _ in model.layers)
    new_layers: list[Layer] = []
    new_buffers: list[dict[str, np.ndarray]] = []
    for layer, g, buf in zip(model.layers, grads, buffers):
        params = layer_params(layer)
        if set(g) != set(params):
            raise ValueError(f"gradient keys {sorted(g)} do not match layer params {sorted(params)}")
        updated, nbuf = {}, {}
        for name, p in params.items():
            if g[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {g[name].shape} vs {p.shape}")
            d = g[name] + weight_decay * p
            b = momentum * buf[name] + d if name in buf else d
            nbuf[name] = b
            updated[name] = p - lr * b
        new_layers.append(_with_params(layer, updated))
        new_buffers.append(nbuf)
    return (Model(tuple(new_layers), model.input_shape, model.n_classes),
            SgdState(tuple(new_buffers)))
