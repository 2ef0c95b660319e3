"""Declarative small networks with hand-written backprop.

A :class:`NetworkSpec` is an immutable description: a backbone of layers,
one shared fully connected layer producing the feature vector, and one
single-output head per class. Weights live separately in a
:class:`WeightBundle` keyed by ``"<layer>.weight"`` / ``"<layer>.bias"``,
so the same spec can be evaluated with many bundles and bundles can be
edited surgically (see :func:`transfer_weights`).

Arrays are ``float64`` and images are ``(N, C, H, W)``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "fullyconnected", "pool", "activation", "dropout", "flatten")
ACTIVATIONS = ("relu", "identity", "sigmoid", "tanh")
RANDOM = "RANDOM"


class StateError(RuntimeError):
    """A bundle or checkpoint does not belong to the spec it is used with."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    bias: bool = True
    pool_size: int = 2
    pool_mode: str = "max"
    rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1 or self.padding < 0:
                raise ValueError(f"conv layer {self.name!r}: dimensions must be positive")
        elif self.kind == "fullyconnected":
            if min(self.in_features, self.out_features) < 1:
                raise ValueError(f"fc layer {self.name!r}: dimensions must be positive")
        elif self.kind == "pool":
            if self.pool_size < 1 or self.pool_mode not in ("max", "avg"):
                raise ValueError(f"bad pooling layer {self.name!r}")
        elif self.kind == "dropout":
            if not 0.0 <= self.rate < 1.0:
                raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        elif self.kind == "activation":
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def has_params(self):
        return self.kind in ("conv2d", "fullyconnected")


def conv2d(name, in_channels, out_channels, kernel, stride=1, padding=0, bias=True):
    return LayerSpec("conv2d", name, in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding, bias=bias)


def fullyconnected(name, in_features, out_features, bias=True):
    return LayerSpec("fullyconnected", name, in_features=in_features,
                     out_features=out_features, bias=bias)


def pool(size=2, mode="max"):
    return LayerSpec("pool", pool_size=size, pool_mode=mode)


def activation(fn="relu"):
    return LayerSpec("activation", activation=fn)


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


def flatten():
    return LayerSpec("flatten")


def _out_shape(layer: LayerSpec, shape):
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"conv {layer.name!r} expects {layer.in_channels} channels, got shape {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv {layer.name!r}: kernel larger than input {shape}")
        return (layer.out_channels, ho, wo)
    if layer.kind == "fullyconnected":
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ValueError(f"fc {layer.name!r} expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if layer.kind == "pool":
        if len(shape) != 3:
            raise ValueError(f"pooling expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        k = layer.pool_size
        if h % k or w % k:
            raise ValueError(f"pool size {k} does not divide spatial shape {h}x{w}")
        return (c, h // k, w // k)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return tuple(shape)


def layer_shapes(layers: Sequence[LayerSpec], input_shape):
    """Output shape after every layer; raises ``ValueError`` if they do not compose."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for layer in layers:
        shape = _out_shape(layer, shape)
        out.append(shape)
    return out


@dataclass(frozen=True)
class NetworkSpec:
    """Backbone + shared feature layer + one scalar head per class.

    ``head_kind="cosine"`` turns the heads into an angular classifier
    (``scale * cos`` between the normalised feature and each normalised
    head weight, no bias), which is what the ArcFace loss expects.
    Inputs are standardised as ``(x - input_mean) / input_std`` first.
    """

    input_shape: tuple = (1, 32, 32)
    backbone: tuple = ()
    shared_head: LayerSpec | None = None
    shared_activation: str = "relu"
    class_heads: tuple = ()
    head_kind: str = "linear"
    head_scale: float = 30.0
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "class_heads", tuple(self.class_heads))
        if len(set(self.class_heads)) != len(self.class_heads):
            raise ValueError("class head names must be unique")
        if not self.input_std > 0:
            raise ValueError("input_std must be positive")
        if self.head_kind not in ("linear", "cosine"):
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.shared_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.shared_activation!r}")
        names = [l.name for l in self.all_layers() if l.has_params]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError("parameterised layers need unique non-empty names")
        shapes = layer_shapes(self.backbone, self.input_shape)
        out = shapes[-1] if shapes else self.input_shape
        if self.shared_head is not None:
            if self.shared_head.kind != "fullyconnected":
                raise ValueError("shared head must be a fully connected layer")
            _out_shape(self.shared_head, out)
        elif self.class_heads:
            raise ValueError("class heads need a shared head")

    @property
    def feature_width(self):
        return self.shared_head.out_features if self.shared_head is not None else 0

    def head_layer(self, name) -> LayerSpec:
        return fullyconnected(f"head.{name}", self.feature_width, 1,
                              bias=self.head_kind == "linear")

    def all_layers(self):
        layers = list(self.backbone)
        if self.shared_head is not None:
            layers.append(self.shared_head)
        layers.extend(self.head_layer(h) for h in self.class_heads)
        return layers

    def param_shapes(self):
        """``{entry name: shape}`` for every weight and bias array."""
        out = {}
        for layer in self.all_layers():
            if layer.kind == "conv2d":
                out[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                if layer.bias:
                    out[f"{layer.name}.bias"] = (layer.out_channels,)
            elif layer.kind == "fullyconnected":
                out[f"{layer.name}.weight"] = (layer.out_features, layer.in_features)
                if layer.bias:
                    out[f"{layer.name}.bias"] = (layer.out_features,)
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone"] = tuple(LayerSpec(**l) for l in d.get("backbone", ()))
        if d.get("shared_head") is not None:
            d["shared_head"] = LayerSpec(**d["shared_head"])
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_heads(self, heads, **changes):
        return NetworkSpec(**{**self.__dict__, "class_heads": tuple(heads), **changes})


def conv_backbone(input_shape=(1, 32, 32), channels=(8, 16, 16), feature_width=64,
                  heads=(), kernel=3, head_kind="linear", head_scale=30.0,
                  shared_activation="relu", input_mean=0.5, input_std=0.25):
    """Stack of ``conv3x3 -> relu -> maxpool2`` blocks plus the shared layer."""
    layers = []
    c, h, w = input_shape
    for i, cout in enumerate(channels):
        layers += [conv2d(f"conv{i + 1}", c, cout, kernel, padding=kernel // 2),
                   activation("relu"), pool(2)]
        c, h, w = cout, h // 2, w // 2
    layers.append(flatten())
    return NetworkSpec(
        input_shape=input_shape,
        backbone=tuple(layers),
        shared_head=fullyconnected("shared", c * h * w, feature_width),
        shared_activation=shared_activation,
        class_heads=tuple(heads),
        head_kind=head_kind,
        head_scale=head_scale,
        input_mean=input_mean,
        input_std=input_std,
    )


@dataclass
class WeightBundle:
    entries: dict
    spec_fingerprint: str
    seed: int = 0

    def copy(self):
        return WeightBundle({k: v.copy() for k, v in self.entries.items()},
                            self.spec_fingerprint, self.seed)

    def equals(self, other: "WeightBundle"):
        """Bitwise equality of every entry (and the fingerprint)."""
        if self.spec_fingerprint != other.spec_fingerprint or self.entries.keys() != other.entries.keys():
            return False
        return all(self.entries[k].shape == other.entries[k].shape
                   and self.entries[k].tobytes() == other.entries[k].tobytes() for k in self.entries)

    def num_params(self):
        return sum(v.size for v in self.entries.values())


def _entry_rng(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _init_entry(name, shape, seed):
    if name.endswith(".bias"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return _entry_rng(seed, name).uniform(-bound, bound, size=shape)


def init_weights(spec: NetworkSpec, seed: int) -> WeightBundle:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases.

    Each entry draws from its own stream keyed by ``(seed, entry name)``,
    so a given layer is initialised identically in any spec that has it.
    """
    if not isinstance(spec, NetworkSpec):
        raise ValueError("init_weights needs a NetworkSpec")
    entries = {name: _init_entry(name, shape, seed) for name, shape in spec.param_shapes().items()}
    return WeightBundle(entries, spec.fingerprint(), int(seed))


def check_bundle(spec: NetworkSpec, bundle: WeightBundle):
    if bundle.spec_fingerprint != spec.fingerprint():
        raise StateError("weight bundle was built for a different network spec")
    for name, shape in spec.param_shapes().items():
        if name not in bundle.entries or bundle.entries[name].shape != shape:
            raise StateError(f"bundle entry {name!r} missing or misshapen")


# ---------------------------------------------------------------- layers

def _act(fn, x):
    if fn == "relu":
        return np.maximum(x, 0.0)
    if fn == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if fn == "tanh":
        return np.tanh(x)
    return x


def _act_backward(fn, y, dy):
    if fn == "relu":
        return dy * (y > 0)
    if fn == "sigmoid":
        return dy * y * (1.0 - y)
    if fn == "tanh":
        return dy * (1.0 - y * y)
    return dy


def _conv_forward(layer, w, b, x):
    k, s, p = layer.kernel, layer.stride, layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    y = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        y += b
    y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return y, (cols, x.shape)


def _conv_backward(layer, w, cache, dy, need_dx=True):
    cols, xshape = cache
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, o, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(o, -1)).reshape(n, ho, wo, xshape[1], k, k)
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return dx, dw, db


def _pool_forward(layer, x):
    n, c, h, w = x.shape
    k = layer.pool_size
    blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    if layer.pool_mode == "avg":
        return blocks.mean(axis=-1), x.shape
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def _pool_backward(layer, cache, dy):
    k = layer.pool_size
    if layer.pool_mode == "avg":
        n, c, h, w = cache
        dblocks = np.repeat(dy[..., None] / (k * k), k * k, axis=-1)
    else:
        idx, (n, c, h, w) = cache
        dblocks = np.zeros(dy.shape + (k * k,))
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
    return dblocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _dropout_mask(shape, rate, rng):
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random generator")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _layer_forward(layer, entries, x, training, rng):
    if layer.kind == "conv2d":
        return _conv_forward(layer, entries[f"{layer.name}.weight"], entries.get(f"{layer.name}.bias"), x)
    if layer.kind == "fullyconnected":
        w = entries[f"{layer.name}.weight"]
        y = x @ w.T
        b = entries.get(f"{layer.name}.bias")
        if b is not None:
            y = y + b
        return y, x
    if layer.kind == "pool":
        return _pool_forward(layer, x)
    if layer.kind == "activation":
        y = _act(layer.activation, x)
        return y, y
    if layer.kind == "dropout":
        if not training or layer.rate == 0.0:
            return x, None
        mask = _dropout_mask(x.shape, layer.rate, rng)
        return x * mask, mask
    # flatten
    return x.reshape(x.shape[0], -1), x.shape


def _layer_backward(layer, entries, cache, dy, grads, need_dx=True):
    if layer.kind == "conv2d":
        w = entries[f"{layer.name}.weight"]
        dx, dw, db = _conv_backward(layer, w, cache, dy, need_dx)
        grads[f"{layer.name}.weight"] = dw
        if layer.bias:
            grads[f"{layer.name}.bias"] = db
        return dx
    if layer.kind == "fullyconnected":
        w = entries[f"{layer.name}.weight"]
        grads[f"{layer.name}.weight"] = dy.T @ cache
        if layer.bias:
            grads[f"{layer.name}.bias"] = dy.sum(axis=0)
        return dy @ w
    if layer.kind == "pool":
        return _pool_backward(layer, cache, dy)
    if layer.kind == "activation":
        return _act_backward(layer.activation, cache, dy)
    if layer.kind == "dropout":
        return dy if cache is None else dy * cache
    return dy.reshape(cache)


# ---------------------------------------------------------------- network

class Output(NamedTuple):
    features: np.ndarray
    logits: np.ndarray


class Trace(NamedTuple):
    caches: list
    feature: np.ndarray
    feature_mask: np.ndarray | None
    head_cache: tuple


def _head_weights(spec, entries):
    if not spec.class_heads:
        return np.zeros((0, spec.feature_width)), None
    w = np.concatenate([entries[f"head.{h}.weight"] for h in spec.class_heads], axis=0)
    if spec.head_kind == "cosine":
        return w, None
    b = np.concatenate([entries[f"head.{h}.bias"] for h in spec.class_heads])
    return w, b


def _heads_forward(spec, entries, f):
    w, b = _head_weights(spec, entries)
    if spec.head_kind == "linear":
        return f @ w.T + b, (f, w)
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    wn = np.linalg.norm(w, axis=1, keepdims=True)
    fhat = f / np.maximum(fn, 1e-12)
    what = w / np.maximum(wn, 1e-12)
    return spec.head_scale * fhat @ what.T, (fhat, fn, what, wn)


def _normalize_backward(xhat, norm, dxhat):
    # d(x / |x|) = (I - xhat xhat^T) / |x|
    return (dxhat - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)) / np.maximum(norm, 1e-12)


def _heads_backward(spec, cache, dlogits, grads):
    if spec.head_kind == "linear":
        f, w = cache
        dw = dlogits.T @ f
        db = dlogits.sum(axis=0)
        for i, h in enumerate(spec.class_heads):
            grads[f"head.{h}.weight"] = dw[i:i + 1]
            grads[f"head.{h}.bias"] = db[i:i + 1]
        return dlogits @ w
    fhat, fn, what, wn = cache
    d = spec.head_scale * dlogits
    dfhat = d @ what
    dwhat = d.T @ fhat
    dw = _normalize_backward(what, wn, dwhat)
    for i, h in enumerate(spec.class_heads):
        grads[f"head.{h}.weight"] = dw[i:i + 1]
    return _normalize_backward(fhat, fn, dfhat)


def _as_images(spec, images):
    x = np.asarray(images, dtype=np.float64)
    single = False
    if x.shape == spec.input_shape[1:] and spec.input_shape[0] == 1:
        x = x[None, None]
        single = True
    elif x.shape == spec.input_shape:
        x = x[None]
        single = True
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"image shape {x.shape[1:]} does not match network input {spec.input_shape}")
    return x, single


def forward_trace(spec: NetworkSpec, bundle: WeightBundle, images, training=False, rng=None,
                  feature_dropout=0.0):
    """Forward pass that keeps what :func:`backward` needs."""
    check_bundle(spec, bundle)
    x, _ = _as_images(spec, images)
    if spec.input_mean != 0.0 or spec.input_std != 1.0:
        x = (x - spec.input_mean) / spec.input_std
    e = bundle.entries
    caches = []
    for layer in spec.backbone:
        x, c = _layer_forward(layer, e, x, training, rng)
        caches.append(c)
    if spec.shared_head is None:
        f = x.reshape(x.shape[0], -1)
        return Output(f, np.zeros((f.shape[0], 0))), Trace(caches, f, None, None)
    x = x.reshape(x.shape[0], -1)
    pre, c = _layer_forward(spec.shared_head, e, x, training, rng)
    caches.append(c)
    f = _act(spec.shared_activation, pre)
    h = f
    mask = None
    if training and feature_dropout > 0.0:
        mask = _dropout_mask(f.shape, feature_dropout, rng)
        h = f * mask
    logits, hc = _heads_forward(spec, e, h)
    return Output(f, logits), Trace(caches, f, mask, hc)


def forward(spec: NetworkSpec, bundle: WeightBundle, images, training=False, rng=None,
            feature_dropout=0.0) -> Output:
    """Features (shared-layer output) and per-head logits.

    ``images`` is a single image or an ``(N, C, H, W)`` batch; a single
    image gives 1-D outputs. Logit columns follow ``spec.class_heads``.
    Evaluation mode (the default) is deterministic and never masks.
    """
    _, single = _as_images(spec, images)
    out, _ = forward_trace(spec, bundle, images, training, rng, feature_dropout)
    if single:
        return Output(out.features[0], out.logits[0])
    return out


def logits_by_head(spec: NetworkSpec, logits):
    return {h: logits[..., i] for i, h in enumerate(spec.class_heads)}


def backward(spec: NetworkSpec, bundle: WeightBundle, trace: Trace, dlogits, dfeatures=None):
    """Gradients of a scalar loss w.r.t. every bundle entry.

    ``dlogits`` is the loss gradient at the head outputs, ``dfeatures`` an
    optional extra gradient at the (pre-dropout) feature vector.
    """
    e = bundle.entries
    grads = {}
    if spec.shared_head is not None:
        df = _heads_backward(spec, trace.head_cache, np.asarray(dlogits, dtype=np.float64), grads) \
            if spec.class_heads else np.zeros_like(trace.feature)
        if trace.feature_mask is not None:
            df = df * trace.feature_mask
        if dfeatures is not None:
            df = df + dfeatures
        dpre = _act_backward(spec.shared_activation, trace.feature, df)
        dx = _layer_backward(spec.shared_head, e, trace.caches[-1], dpre, grads)
        caches = trace.caches[:-1]
    else:
        dx = np.asarray(dfeatures, dtype=np.float64)
        caches = trace.caches
    first = 0
    while first < len(spec.backbone) and not spec.backbone[first].has_params:
        first += 1
    for i in range(len(spec.backbone) - 1, first - 1, -1):
        dx = _layer_backward(spec.backbone[i], e, caches[i], dx, grads, need_dx=i > first)
    return grads


# ---------------------------------------------------------------- surgery

def transfer_weights(ap_bundle: WeightBundle, ap_spec: NetworkSpec, rf_spec: NetworkSpec,
                     head_mapping: Mapping[str, str], seed: int, copy_backbone=True) -> WeightBundle:
    """Build an ``rf_spec`` bundle from a trained ``ap_spec`` bundle.

    Backbone and shared-layer entries are copied; each RF class head is
    copied from the AP head named in ``head_mapping`` or, for
    :data:`RANDOM`, initialised exactly as :func:`init_weights` would with
    ``seed``. With ``copy_backbone=False`` and every head RANDOM the result
    equals ``init_weights(rf_spec, seed)``. The input bundle is not touched.
    """
    check_bundle(ap_spec, ap_bundle)
    missing = [h for h in rf_spec.class_heads if h not in head_mapping]
    if missing:
        raise ValueError(f"head mapping does not cover RF classes {missing}")
    ap_shapes = ap_spec.param_shapes()
    entries = {}
    for name, shape in rf_spec.param_shapes().items():
        if name.startswith("head."):
            continue
        if copy_backbone:
            if ap_shapes.get(name) != shape:
                raise ValueError(f"entry {name!r}: RF shape {shape} incompatible with AP {ap_shapes.get(name)}")
            entries[name] = ap_bundle.entries[name].copy()
        else:
            entries[name] = _init_entry(name, shape, seed)
    if rf_spec.feature_width != ap_spec.feature_width:
        raise ValueError("AP and RF shared feature widths differ")
    for head in rf_spec.class_heads:
        src = head_mapping[head]
        for suffix, shape in (("weight", (1, rf_spec.feature_width)), ("bias", (1,))):
            name = f"head.{head}.{suffix}"
            if name not in rf_spec.param_shapes():
                continue
            if src == RANDOM:
                entries[name] = _init_entry(name, shape, seed)
                continue
            if src not in ap_spec.class_heads:
                raise ValueError(f"unknown AP head {src!r}")
            src_name = f"head.{src}.{suffix}"
            entries[name] = ap_bundle.entries[src_name].copy() if src_name in ap_bundle.entries \
                else np.zeros(shape)
    return WeightBundle(entries, rf_spec.fingerprint(), int(seed))


# ---------------------------------------------------------------- complexity

def _layers_of(spec):
    if isinstance(spec, NetworkSpec):
        return spec.all_layers()
    return list(spec)


def count_params(spec) -> int:
    """Exact number of weights and biases (spec or plain layer list)."""
    total = 0
    for layer in _layers_of(spec):
        if layer.kind == "conv2d":
            total += layer.kernel * layer.kernel * layer.in_channels * layer.out_channels
            total += layer.out_channels if layer.bias else 0
        elif layer.kind == "fullyconnected":
            total += layer.in_features * layer.out_features
            total += layer.out_features if layer.bias else 0
    return total


def count_macs(spec, input_shape=None) -> int:
    """Multiply-accumulates of one forward pass; bias adds are not counted.

    For a :class:`NetworkSpec` the input shape defaults to the spec's own.
    Heads are evaluated on the feature vector, after the backbone.
    """
    if isinstance(spec, NetworkSpec):
        input_shape = spec.input_shape if input_shape is None else input_shape
        body = list(spec.backbone) + ([spec.shared_head] if spec.shared_head else [])
        heads = [spec.head_layer(h) for h in spec.class_heads]
        return _macs(body, input_shape) + sum(l.in_features for l in heads)
    if input_shape is None:
        raise ValueError("count_macs on a layer list needs an input shape")
    return _macs(list(spec), input_shape)


def _macs(layers, input_shape):
    total = 0
    shape = tuple(input_shape)
    for layer in layers:
        out = _out_shape(layer, shape)
        if layer.kind == "conv2d":
            total += layer.kernel * layer.kernel * layer.in_channels * layer.out_channels * out[1] * out[2]
        elif layer.kind == "fullyconnected":
            total += layer.in_features * layer.out_features
        shape = out
    return total


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"KTDW"
_VERSION = 1


def save_checkpoint(bundle: WeightBundle, path, extra: dict | None = None):
    """Write a bundle as ``magic | version | header length | JSON header | raw arrays``.

    Arrays are stored little-endian float64 in sorted name order, so equal
    bundles produce identical bytes.
    """
    names = sorted(bundle.entries)
    header = {
        "fingerprint": bundle.spec_fingerprint,
        "seed": bundle.seed,
        "entries": [[n, list(bundle.entries[n].shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(blob)) + blob)
        for n in names:
            fh.write(np.ascontiguousarray(bundle.entries[n], dtype="<f8").tobytes())


def load_checkpoint(path, spec: NetworkSpec | None = None, with_extra=False):
    """Read a bundle written by :func:`save_checkpoint`.

    With ``spec`` given, a fingerprint mismatch raises :class:`StateError`.
    """
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise StateError(f"{path}: not a weight checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    entries = {}
    for name, shape in header["entries"]:
        size = int(np.prod(shape)) * 8
        entries[name] = np.frombuffer(data[offset:offset + size], dtype="<f8").astype(np.float64).reshape(shape)
        offset += size
    bundle = WeightBundle(entries, header["fingerprint"], header["seed"])
    if spec is not None:
        check_bundle(spec, bundle)
    if with_extra:
        return bundle, header["extra"]
    return bundle
