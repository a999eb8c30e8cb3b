"""Minimal float64 neural-network engine with hand-derived backprop.

Provides the two model families used by the simulator (a small conv net
and a two-layer MLP), cross-entropy with an optional prototype-pull
regularizer, classical heavy-ball SGD, and a central finite-difference
gradient used as the test oracle. There is no autodiff: every layer
implements its own backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, LabelError, NumericError

_LAYER_KINDS = ("dense", "conv")

# Per-parameter gradients mirror ModelParams: one (d_weight, d_bias) per layer.
GradList = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class LayerParams:
    """One parameterized layer plus the activations glued onto it."""

    name: str
    kind: str  # "dense" | "conv"
    weight: np.ndarray
    bias: np.ndarray
    relu: bool = False
    pool: bool = False  # 2x2 max-pool after the activation (conv only)

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind == "dense" and self.weight.ndim != 2:
            raise DimensionError(
                f"dense layer {self.name!r}: weight must be [out, in], got {self.weight.shape}"
            )
        if self.kind == "conv" and (
            self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]
        ):
            raise DimensionError(
                f"conv layer {self.name!r}: kernel must be [outC, inC, k, k], got {self.weight.shape}"
            )
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"layer {self.name!r}: bias shape {self.bias.shape} does not match "
                f"weight shape {self.weight.shape}"
            )
        if self.pool and self.kind != "conv":
            raise ValueError(f"layer {self.name!r}: pooling only follows conv layers")

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.name, self.kind, self.weight.copy(), self.bias.copy(), self.relu, self.pool
        )


@dataclass
class ModelParams:
    """Ordered parameter stack split into feature extractor and decision head.

    Layers with index < ``extractor_boundary`` form the extractor; the
    activation leaving the last extractor layer (after its ReLU/pool, if
    any) is the embedding used for prototypes. The remaining layers form
    the decision head.
    """

    layers: list[LayerParams]
    extractor_boundary: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if not 0 <= self.extractor_boundary <= len(self.layers):
            raise ValueError(
                f"extractor_boundary {self.extractor_boundary} out of range "
                f"for {len(self.layers)} layers"
            )

    def copy(self) -> "ModelParams":
        return ModelParams([l.copy() for l in self.layers], self.extractor_boundary)

    @property
    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def same_structure(self, other: "ModelParams") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        if self.extractor_boundary != other.extractor_boundary:
            return False
        return all(
            a.name == b.name
            and a.kind == b.kind
            and a.weight.shape == b.weight.shape
            and a.bias.shape == b.bias.shape
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class OptimizerState:
    """Heavy-ball momentum buffers, one (weight, bias) pair per layer."""

    velocity: list[tuple[np.ndarray, np.ndarray]]
    learning_rate: float
    momentum: float

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def zeros(cls, params: ModelParams, learning_rate: float, momentum: float) -> "OptimizerState":
        vel = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
        return cls(vel, learning_rate, momentum)


@dataclass
class BatchLossReport:
    """Loss decomposition and exact gradients for one mini-batch."""

    total_loss: float
    ce_loss: float
    proto_loss: float
    grads: GradList


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def dense_forward(weight: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Affine map: out[b, o] = sum_k weight[o, k] * x[b, k] + bias[o]."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"dense input must be [batch, in], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"dense weight {weight.shape} does not match input {x.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold valid stride-1 windows into [batch, C*k*k, H'*W'] (copies)."""
    b, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2, s3),
        writeable=False,
    )
    return windows.reshape(b, c * k * k, ho * wo)


def _conv2d_cached(kernel: np.ndarray, bias: np.ndarray, x: np.ndarray):
    out_c, in_c, k, _ = kernel.shape
    b, c, h, w = x.shape
    if c != in_c:
        raise DimensionError(f"conv kernel expects {in_c} input channels, input has {c}")
    if k > h or k > w:
        raise DimensionError(f"conv kernel {k}x{k} larger than input {h}x{w}")
    ho, wo = h - k + 1, w - k + 1
    cols = _im2col(x, k)
    y = np.matmul(kernel.reshape(out_c, -1), cols) + bias[:, None]
    return y.reshape(b, out_c, ho, wo), cols


def conv2d_forward(kernel: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Valid (no padding) stride-1 cross-correlation plus per-channel bias."""
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv kernel must be [outC, inC, k, k], got {kernel.shape}")
    if x.ndim != 4:
        raise DimensionError(f"conv input must be [batch, C, H, W], got {x.shape}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv bias {bias.shape} does not match kernel {kernel.shape}")
    y, _ = _conv2d_cached(kernel, bias, x)
    return y


def _conv2d_backward(dy: np.ndarray, cols: np.ndarray, x_shape, kernel: np.ndarray, need_dx: bool):
    out_c, in_c, k, _ = kernel.shape
    b, _, ho, wo = dy.shape
    dy_flat = dy.reshape(b, out_c, ho * wo)
    d_kernel = np.tensordot(dy_flat, cols, axes=([0, 2], [0, 2])).reshape(out_c, in_c, k, k)
    d_bias = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return d_kernel, d_bias, None
    d_cols = np.matmul(kernel.reshape(out_c, -1).T, dy_flat).reshape(b, in_c, k, k, ho, wo)
    dx = np.zeros(x_shape)
    for di in range(k):
        for dj in range(k):
            dx[:, :, di : di + ho, dj : dj + wo] += d_cols[:, :, di, dj]
    return d_kernel, d_bias, dx


def relu(x: np.ndarray) -> np.ndarray:
    """Element-wise max(0, x); the derivative at exactly 0 is taken as 0."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _check_pool_dims(x: np.ndarray):
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")


def _maxpool2_cached(x: np.ndarray):
    """Pool and remember each window's argmax for the backward pass."""
    _check_pool_dims(x)
    b, c, h, w = x.shape
    grouped = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    arg = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool2_fast(x: np.ndarray) -> np.ndarray:
    """Pool without tracking argmax (forward-only paths)."""
    _check_pool_dims(x)
    return np.maximum(
        np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
        np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]),
    )


def maxpool2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 max pooling."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 input must be [batch, C, H, W], got {x.shape}")
    return _maxpool2_fast(x)


def _maxpool2_backward(dy: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    b, c, ho, wo = dy.shape
    grouped = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(grouped, arg[..., None], dy[..., None], axis=-1)
    return grouped.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]):
    """Mean negative log softmax likelihood, stabilized by max subtraction.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch of {logits.shape[0]}"
        )
    n, c = logits.shape
    if n < 1:
        raise DimensionError("softmax_cross_entropy needs a non-empty batch")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total) - shifted[rows, labels]))
    dlogits = exp / total[:, None]
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


# ---------------------------------------------------------------------------
# Whole-model forward / backward
# ---------------------------------------------------------------------------


def _forward_cached(params: ModelParams, x: np.ndarray, want_cache: bool = True):
    """Run the stack, optionally recording what each backward pass needs.

    Returns (embeddings[batch, d], logits, caches). The embedding is the
    activation crossing the extractor boundary, flattened per sample.
    Forward-only callers pass want_cache=False and get the same values
    cheaper (no argmax bookkeeping, no retained intermediates).
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim < 2:
        raise DimensionError(f"model input must have a batch axis, got shape {a.shape}")
    emb = a.reshape(a.shape[0], -1) if params.extractor_boundary == 0 else None
    caches = []
    for idx, layer in enumerate(params.layers):
        cache = {"input_shape": a.shape} if want_cache else None
        if layer.kind == "dense":
            flat = a.reshape(a.shape[0], -1) if a.ndim > 2 else a
            if flat.shape[1] != layer.weight.shape[1]:
                raise DimensionError(
                    f"dense layer {layer.name!r}: weight {layer.weight.shape} does not "
                    f"match input {flat.shape}"
                )
            if want_cache:
                cache["x"] = flat
            a = flat @ layer.weight.T + layer.bias
        else:
            if a.ndim != 4:
                raise DimensionError(
                    f"conv layer {layer.name!r}: input must be [batch, C, H, W], got {a.shape}"
                )
            a, cols = _conv2d_cached(layer.weight, layer.bias, a)
            if want_cache:
                cache["cols"] = cols
        if layer.relu:
            if want_cache:
                cache["preact"] = a
            a = np.maximum(a, 0.0)
        if layer.pool:
            if want_cache:
                cache["pool_in_shape"] = a.shape
                a, arg = _maxpool2_cached(a)
                cache["pool_arg"] = arg
            else:
                a = _maxpool2_fast(a)
        caches.append(cache)
        if idx == params.extractor_boundary - 1:
            emb = a.reshape(a.shape[0], -1)
    return emb, a, caches


def model_forward(params: ModelParams, batch: np.ndarray):
    """Forward pass returning (embeddings, logits)."""
    emb, logits, _ = _forward_cached(params, batch, want_cache=False)
    return emb, logits


def _backward(params: ModelParams, caches, dlogits: np.ndarray, d_emb: np.ndarray | None):
    grads: GradList = [None] * len(params.layers)  # type: ignore[list-item]
    d = dlogits
    for idx in range(len(params.layers) - 1, -1, -1):
        layer, cache = params.layers[idx], caches[idx]
        # The gradient w.r.t. the raw input is never consumed, so the
        # first layer skips it.
        need_dx = idx > 0
        if layer.pool:
            d = _maxpool2_backward(d, cache["pool_arg"], cache["pool_in_shape"])
        if layer.relu:
            d = d * (cache["preact"] > 0)
        if layer.kind == "dense":
            x = cache["x"]
            d_weight = d.T @ x
            d_bias = d.sum(axis=0)
            d = (d @ layer.weight).reshape(cache["input_shape"]) if need_dx else None
        else:
            d_weight, d_bias, d = _conv2d_backward(
                d, cache["cols"], cache["input_shape"], layer.weight, need_dx
            )
        grads[idx] = (d_weight, d_bias)
        if idx == params.extractor_boundary and d_emb is not None and d is not None:
            # d is now the gradient w.r.t. the embedding; the prototype
            # term joins here and flows through the extractor only.
            d = d + d_emb.reshape(d.shape)
    return grads


def _class_vectors(protos) -> dict[int, np.ndarray]:
    """Accept a GlobalPrototypeSet, a plain {class: vector} mapping, or None."""
    if protos is None:
        return {}
    if hasattr(protos, "class_vectors"):
        return protos.class_vectors()
    if isinstance(protos, Mapping):
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in protos.items()}
    raise TypeError(f"unsupported prototype container {type(protos).__name__}")


def loss_and_grad(
    params: ModelParams,
    batch: np.ndarray,
    labels: Sequence[int],
    global_protos=None,
    lam: float = 1.0,
    proto_form: str = "squared",
) -> BatchLossReport:
    """Composite loss: cross-entropy plus lam * prototype pull term.

    The pull term averages, over the whole batch, the squared distance
    between each sample's embedding and the global prototype of its
    class; samples whose class has no prototype contribute 0. With
    proto_form="unsquared" the plain Euclidean distance is used instead
    (zero-distance samples get a zero subgradient). The prototype is a
    constant: its gradient flows into the extractor layers only.
    """
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    if proto_form not in ("squared", "unsquared"):
        raise ValueError(f"unknown proto_form {proto_form!r}")
    labels = np.asarray(labels, dtype=np.int64)
    emb, logits, caches = _forward_cached(params, batch)
    ce_loss, dlogits = softmax_cross_entropy(logits, labels)

    vectors = _class_vectors(global_protos)
    n = emb.shape[0]
    proto_loss = 0.0
    d_emb = None
    if vectors:
        dim = next(iter(vectors.values())).shape[0]
        if dim != emb.shape[1]:
            raise DimensionError(
                f"prototype dimension {dim} does not match embedding dimension {emb.shape[1]}"
            )
        d_emb = np.zeros_like(emb)
        for i in range(n):
            vec = vectors.get(int(labels[i]))
            if vec is None:
                continue
            diff = emb[i] - vec
            if proto_form == "squared":
                proto_loss += float(diff @ diff)
                d_emb[i] = 2.0 * diff / n
            else:
                dist = math.sqrt(float(diff @ diff))
                proto_loss += dist
                if dist > 0.0:
                    d_emb[i] = diff / (dist * n)
        proto_loss /= n

    total = ce_loss + lam * proto_loss
    inject = d_emb * lam if (d_emb is not None and lam != 0.0) else None
    grads = _backward(params, caches, dlogits, inject)
    return BatchLossReport(total, ce_loss, proto_loss, grads)


def sgd_momentum_step(
    params: ModelParams, grads: GradList, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """Heavy-ball update: v <- mu*v + g, w <- w - eta*v. Pure (no mutation)."""
    if len(grads) != len(params.layers) or len(state.velocity) != len(params.layers):
        raise DimensionError(
            f"gradients/velocity for {len(grads)}/{len(state.velocity)} layers "
            f"do not match model with {len(params.layers)}"
        )
    new_layers = []
    new_velocity = []
    for layer, (g_w, g_b), (v_w, v_b) in zip(params.layers, grads, state.velocity):
        if g_w.shape != layer.weight.shape or g_b.shape != layer.bias.shape:
            raise DimensionError(
                f"layer {layer.name!r}: gradient shapes {g_w.shape}/{g_b.shape} do not "
                f"match parameters {layer.weight.shape}/{layer.bias.shape}"
            )
        nv_w = state.momentum * v_w + g_w
        nv_b = state.momentum * v_b + g_b
        new_layers.append(
            LayerParams(
                layer.name,
                layer.kind,
                layer.weight - state.learning_rate * nv_w,
                layer.bias - state.learning_rate * nv_b,
                layer.relu,
                layer.pool,
            )
        )
        new_velocity.append((nv_w, nv_b))
    return (
        ModelParams(new_layers, params.extractor_boundary),
        OptimizerState(new_velocity, state.learning_rate, state.momentum),
    )


def finite_diff_gradient(
    loss_fn: Callable[[ModelParams], float], params: ModelParams, eps: float = 1e-5
) -> GradList:
    """Central-difference gradient of loss_fn over every scalar parameter."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    work = params.copy()
    out: GradList = []
    for layer in work.layers:
        grads_for_layer = []
        for arr in (layer.weight, layer.bias):
            grad = np.zeros_like(arr)
            flat, grad_flat = arr.reshape(-1), grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = loss_fn(work)
                flat[i] = orig - eps
                minus = loss_fn(work)
                flat[i] = orig
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise NumericError(
                        f"non-finite loss while probing {layer.name!r} element {i}"
                    )
                grad_flat[i] = (plus - minus) / (2.0 * eps)
            grads_for_layer.append(grad)
        out.append((grads_for_layer[0], grads_for_layer[1]))
    return out


# ---------------------------------------------------------------------------
# Model constructors
# ---------------------------------------------------------------------------


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mlp2(rng: np.random.Generator, in_dim: int, num_classes: int, hidden: int = 128) -> ModelParams:
    """Two dense layers; the hidden ReLU activation is the embedding."""
    layers = [
        LayerParams(
            "fc1",
            "dense",
            _uniform_init(rng, (hidden, in_dim), in_dim),
            _uniform_init(rng, (hidden,), in_dim),
            relu=True,
        ),
        LayerParams(
            "fc2",
            "dense",
            _uniform_init(rng, (num_classes, hidden), hidden),
            _uniform_init(rng, (num_classes,), hidden),
        ),
    ]
    return ModelParams(layers, extractor_boundary=1)


def build_cnn4(
    rng: np.random.Generator,
    num_classes: int = 10,
    in_channels: int = 1,
    image_hw: int = 28,
    conv_channels: tuple[int, int] = (10, 20),
    embed_dim: int = 50,
    kernel: int = 5,
) -> ModelParams:
    """Two conv+pool blocks and two dense layers; the 50-dim hidden
    activation after fc1's ReLU is the embedding."""
    size = image_hw
    for _ in range(2):
        size = size - kernel + 1
        if size < 2 or size % 2:
            raise DimensionError(
                f"image size {image_hw} incompatible with {kernel}x{kernel} conv + 2x2 pool"
            )
        size //= 2
    flat = conv_channels[1] * size * size
    c1, c2 = conv_channels
    layers = [
        LayerParams(
            "conv1",
            "conv",
            _uniform_init(rng, (c1, in_channels, kernel, kernel), in_channels * kernel * kernel),
            _uniform_init(rng, (c1,), in_channels * kernel * kernel),
            relu=True,
            pool=True,
        ),
        LayerParams(
            "conv2",
            "conv",
            _uniform_init(rng, (c2, c1, kernel, kernel), c1 * kernel * kernel),
            _uniform_init(rng, (c2,), c1 * kernel * kernel),
            relu=True,
            pool=True,
        ),
        LayerParams(
            "fc1",
            "dense",
            _uniform_init(rng, (embed_dim, flat), flat),
            _uniform_init(rng, (embed_dim,), flat),
            relu=True,
        ),
        LayerParams(
            "fc2",
            "dense",
            _uniform_init(rng, (num_classes, embed_dim), embed_dim),
            _uniform_init(rng, (num_classes,), embed_dim),
        ),
    ]
    return ModelParams(layers, extractor_boundary=3)
