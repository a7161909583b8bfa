"""Small CNN: forward pass, penultimate features, backprop and SGD fine-tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, TrainingDataError

log = logging.getLogger(__name__)

LAYER_PARAMS = {
    "conv": ("out_channels", "kernel", "stride", "padding"),
    "relu": (),
    "maxpool": ("window", "stride"),
    "flatten": (),
    "dense": ("units",),
    "softmax": (),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    window: int | None = None
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_PARAMS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        required = LAYER_PARAMS[self.kind]
        for name in ("out_channels", "kernel", "stride", "padding", "window", "units"):
            value = getattr(self, name)
            if name in required:
                if value is None:
                    raise ValueError(f"{self.kind} layer requires {name!r}")
                if value < (0 if name == "padding" else 1):
                    raise ValueError(f"{self.kind} layer has invalid {name}={value}")
            elif value is not None:
                raise ValueError(f"{self.kind} layer does not take {name!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update({k: getattr(self, k) for k in LAYER_PARAMS[self.kind]})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(self.input_shape) != 3:
            raise DimensionError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if not self.class_names:
            raise ValueError("class_names must not be empty")
        if len(self.layers) < 2 or self.layers[-1].kind != "softmax" or self.layers[-2].kind != "dense":
            raise ValueError("network must end with a dense layer followed by softmax")
        if self.layers[-2].units != len(self.class_names):
            raise ValueError(
                f"final dense width {self.layers[-2].units} != number of classes {len(self.class_names)}")
        if any(layer.kind == "softmax" for layer in self.layers[:-1]):
            raise ValueError("softmax is only allowed as the final layer")
        self.shapes()  # validates the shape chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, in order."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k in ("conv", "maxpool"):
                if len(shape) != 3:
                    raise DimensionError(f"layer {i} ({k}) needs a [C, H, W] input, got {shape}")
                c, h, w = shape
                if k == "conv":
                    if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                        raise DimensionError(f"layer {i} (conv): kernel larger than padded input {shape}")
                    shape = (layer.out_channels,
                             tc.conv_output_size(h, layer.kernel, layer.stride, layer.padding),
                             tc.conv_output_size(w, layer.kernel, layer.stride, layer.padding))
                else:
                    if layer.window > h or layer.window > w:
                        raise DimensionError(f"layer {i} (maxpool): window larger than input {shape}")
                    shape = (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "dense":
                if len(shape) != 1:
                    raise DimensionError(f"layer {i} (dense) needs a flat input, got {shape}; add a flatten layer")
                shape = (layer.units,)
            out.append(shape)
        return out

    def param_shapes(self) -> dict[tuple[int, str], tuple[int, ...]]:
        """Parameter block shapes keyed by ``(layer_index, name)`` in storage order."""
        shapes = self.shapes()
        result = {}
        for i, layer in enumerate(self.layers):
            prev = self.input_shape if i == 0 else shapes[i - 1]
            if layer.kind == "conv":
                result[(i, "kernels")] = (layer.out_channels, prev[0], layer.kernel, layer.kernel)
                result[(i, "bias")] = (layer.out_channels,)
            elif layer.kind == "dense":
                result[(i, "weights")] = (layer.units, prev[0])
                result[(i, "bias")] = (layer.units,)
        return result

    @property
    def head_index(self) -> int:
        return len(self.layers) - 2

    def to_json(self) -> str:
        return json.dumps({
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "class_names": list(self.class_names),
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(x) for x in d["layers"]),
                   tuple(d["class_names"]))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def mini_cnn_spec(class_names: Sequence[str] | None = None) -> NetworkSpec:
    """The reference architecture shipped in ``configs/mini_cnn.json``."""
    text = resources.files("sonatr.configs").joinpath("mini_cnn.json").read_text(encoding="utf-8")
    spec = NetworkSpec.from_json(text)
    if class_names is not None:
        spec = _with_classes(spec, class_names)
    return spec


def _with_classes(spec: NetworkSpec, class_names: Sequence[str]) -> NetworkSpec:
    layers = list(spec.layers)
    layers[-2] = LayerSpec("dense", units=len(class_names))
    return NetworkSpec(spec.input_shape, tuple(layers), tuple(class_names))


@dataclass
class Network:
    """A NetworkSpec paired with its parameter blocks (float64 in memory)."""

    spec: NetworkSpec
    params: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            raise DimensionError(f"parameter blocks {sorted(self.params)} do not match spec {sorted(expected)}")
        for key, shape in expected.items():
            arr = np.asarray(self.params[key], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"parameter {key} has shape {arr.shape}, spec requires {shape}")
            self.params[key] = arr
        self.params = {k: self.params[k] for k in expected}

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "Network":
        """He-uniform weights, zero biases; the head uses uniform(-0.05, 0.05)."""
        rng = np.random.default_rng(seed)
        params = {}
        for (idx, name), shape in spec.param_shapes().items():
            if name == "bias":
                params[(idx, name)] = np.zeros(shape)
            elif idx == spec.head_index:
                params[(idx, name)] = rng.uniform(-0.05, 0.05, size=shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                limit = np.sqrt(6.0 / fan_in)
                params[(idx, name)] = rng.uniform(-limit, limit, size=shape)
        return cls(spec, params)

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.spec.class_names

    @property
    def feature_width(self) -> int:
        shapes = self.spec.shapes()
        h = self.spec.head_index
        return int(np.prod(shapes[h - 1] if h > 0 else self.spec.input_shape))


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]

    @property
    def probabilities(self) -> np.ndarray:
        return self.activations[-1]


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = net.spec.input_shape
    if x.shape[-3:] != shape or x.ndim not in (3, 4):
        raise DimensionError(f"input shape {x.shape} does not match network input {shape}")
    return x


def forward_batch(net: Network, x: np.ndarray, stop: int | None = None,
                  cache: dict | None = None) -> list[np.ndarray]:
    """Batched activations ``[N, ...]`` for layers ``0 .. stop-1`` (all by default).

    When ``cache`` is given, conv layers store their im2col matrices in it.
    """
    x = _check_input(net, x)
    if x.ndim == 3:
        x = x[np.newaxis]
    acts = []
    a = x
    p = net.params
    for i, layer in enumerate(net.spec.layers[:stop]):
        k = layer.kind
        if k == "conv":
            cols = None
            if cache is not None:
                cols = cache[i] = tc.im2col(a, layer.kernel, layer.kernel, layer.stride, layer.padding)
            a = tc.conv2d(a, p[(i, "kernels")], p[(i, "bias")], layer.stride, layer.padding, cols=cols)
        elif k == "relu":
            a = tc.relu(a)
        elif k == "maxpool":
            a = tc.maxpool2d(a, layer.window, layer.stride)
        elif k == "flatten":
            a = a.reshape(a.shape[0], -1)
        elif k == "dense":
            a = tc.dense(a, p[(i, "weights")], p[(i, "bias")])
        elif k == "softmax":
            a = tc.softmax(a)
        acts.append(a)
    return acts


def forward(net: Network, image) -> ForwardTrace:
    """Run one ``[C, H, W]`` image through every layer."""
    image = _check_input(net, image)
    if image.ndim != 3:
        raise DimensionError(f"forward takes a single [C, H, W] image, got {image.shape}")
    return ForwardTrace([a[0] for a in forward_batch(net, image)])


def predict_proba(net: Network, images, batch_size: int = 64) -> np.ndarray:
    images = _as_batch(net, images)
    out = [forward_batch(net, images[s:s + batch_size])[-1] for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, len(net.class_names)))


def extract_features_batch(net: Network, images, batch_size: int = 64, tap: int | None = None) -> np.ndarray:
    """Flattened activation of layer ``tap`` (default: the input to the final dense head)."""
    images = _as_batch(net, images)
    if tap is None:
        tap = net.spec.head_index - 1
    if not -1 <= tap < len(net.spec.layers):
        raise ValueError(f"feature tap {tap} out of range")
    feats = []
    for s in range(0, len(images), batch_size):
        chunk = images[s:s + batch_size]
        a = chunk if tap < 0 else forward_batch(net, chunk, stop=tap + 1)[-1]
        feats.append(a.reshape(len(chunk), -1))
    if not feats:
        return np.zeros((0, net.feature_width))
    return np.concatenate(feats)


def extract_features(net: Network, image, tap: int | None = None) -> np.ndarray:
    image = _check_input(net, image)
    if image.ndim != 3:
        raise DimensionError(f"extract_features takes a single [C, H, W] image, got {image.shape}")
    return extract_features_batch(net, image[np.newaxis], tap=tap)[0]


def _as_batch(net: Network, images) -> np.ndarray:
    """Accept ``[N, H, W]`` chips or ``[N, C, H, W]`` tensors."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3 and net.spec.input_shape[0] == 1 and images.shape[1:] == net.spec.input_shape[1:]:
        images = images[:, np.newaxis]
    if images.ndim != 4 or images.shape[1:] != net.spec.input_shape:
        raise DimensionError(f"batch shape {images.shape} does not match network input {net.spec.input_shape}")
    return images


def _targets(labels, k: int) -> np.ndarray:
    """One-hot rows for integer labels; float ``[N, K]`` target distributions pass through."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != k:
            raise DimensionError(f"target distributions have {labels.shape[1]} columns, network has {k} classes")
        return labels.astype(np.float64)
    t = np.zeros((len(labels), k))
    t[np.arange(len(labels)), labels] = 1.0
    return t


def loss_and_gradients(net: Network, x: np.ndarray, labels: np.ndarray,
                       feature_penalty: np.ndarray | None = None):
    """Mean cross-entropy over the batch and its gradient for every parameter block.

    ``labels`` holds class indices, or one target distribution per row.
    ``feature_penalty`` (one weight per example) adds ``weight * ||f||^2`` for
    the penultimate features ``f``, averaged over the batch like the loss.
    """
    cache: dict = {}
    acts = forward_batch(net, x, cache=cache)
    probs = acts[-1]
    t = _targets(labels, probs.shape[1])
    n = len(t)
    loss = -float(np.sum(t * np.log(np.maximum(probs, 1e-300)))) / n
    grad = (probs - t) / n  # gradient w.r.t. the logits (softmax + cross-entropy fused)
    head = net.spec.head_index
    if feature_penalty is not None:
        lam = np.asarray(feature_penalty, dtype=np.float64).reshape(n, *([1] * (acts[head - 1].ndim - 1)))
        loss += float(np.sum(lam * acts[head - 1] ** 2)) / n
    grads = {}
    layers = net.spec.layers
    p = net.params
    for i in range(len(layers) - 2, -1, -1):
        layer = layers[i]
        inp = x if i == 0 else acts[i - 1]
        k = layer.kind
        if k == "dense":
            grad, grads[(i, "weights")], grads[(i, "bias")] = tc.dense_backward(grad, inp, p[(i, "weights")])
            if i == head and feature_penalty is not None:
                grad = grad + 2.0 * lam * inp / n
        elif k == "conv":
            grad, grads[(i, "kernels")], grads[(i, "bias")] = tc.conv2d_backward(
                grad, inp, p[(i, "kernels")], layer.stride, layer.padding, cols=cache[i], input_grad=i > 0)
        elif k == "relu":
            grad = tc.relu_backward(grad, inp)
        elif k == "maxpool":
            grad = tc.maxpool2d_backward(grad, inp, layer.window, layer.stride)
        elif k == "flatten":
            grad = grad.reshape(inp.shape)
    return loss, grads


def mean_loss(net: Network, images, labels, batch_size: int = 64) -> float:
    probs = predict_proba(net, images, batch_size)
    t = _targets(labels, probs.shape[1])
    return -float(np.sum(t * np.log(np.maximum(probs, 1e-300)))) / len(t)


def replace_head(net: Network, new_class_names: Sequence[str], seed: int = 0) -> Network:
    """Swap the final dense+softmax for a fresh head over ``new_class_names``."""
    if len(new_class_names) == 0:
        raise ValueError("new_class_names must not be empty")
    spec = _with_classes(net.spec, new_class_names)
    h = spec.head_index
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in net.params.items() if k[0] != h}
    shape = spec.param_shapes()[(h, "weights")]
    params[(h, "weights")] = rng.uniform(-0.05, 0.05, size=shape)
    params[(h, "bias")] = np.zeros(shape[0])
    return Network(spec, params)


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    freeze_depth: int = 0


def _training_arrays(net: Network, train_set) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(train_set.images, dtype=np.float64)
    if len(images) == 0:
        raise TrainingDataError("training set is empty")
    names = [train_set.class_names[i] for i in np.asarray(train_set.labels)]
    index = {name: i for i, name in enumerate(net.class_names)}
    unknown = sorted(set(names) - set(index))
    if unknown:
        raise TrainingDataError(f"training labels {unknown} are not network classes {list(net.class_names)}")
    labels = np.array([index[n] for n in names])
    counts = np.bincount(labels, minlength=len(index))
    missing = [net.class_names[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise TrainingDataError(f"classes with zero training examples: {missing}")
    return _as_batch(net, images), labels


def fine_tune(net: Network, train_set, config: FineTuneConfig = FineTuneConfig()) -> tuple[Network, list[float]]:
    """Mini-batch SGD with momentum on cross-entropy.

    Layers with index < ``config.freeze_depth`` keep their weights. The returned
    loss history holds the full-training-set mean loss after each epoch.
    """
    x, labels = _training_arrays(net, train_set)
    return train_arrays(net, x, labels, config)


def train_arrays(net: Network, x: np.ndarray, labels: np.ndarray,
                 config: FineTuneConfig = FineTuneConfig(),
                 feature_penalty: np.ndarray | None = None) -> tuple[Network, list[float]]:
    """SGD loop behind ``fine_tune`` on prepared arrays.

    ``labels`` and ``feature_penalty`` are as in ``loss_and_gradients``; the
    history records cross-entropy only.
    """
    x = _as_batch(net, x)
    labels = np.asarray(labels)
    if len(labels) != len(x) or len(x) == 0:
        raise TrainingDataError(f"{len(labels)} labels for {len(x)} images")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    trainable = [k for k in net.params if k[0] >= config.freeze_depth]
    velocity = {k: np.zeros_like(net.params[k]) for k in trainable}
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            pen = None if feature_penalty is None else feature_penalty[idx]
            _, grads = loss_and_gradients(net, x[idx], labels[idx], pen)
            for k in trainable:
                v = velocity[k]
                v *= config.momentum
                v -= config.learning_rate * grads[k]
                net.params[k] += v
        history.append(mean_loss(net, x, labels))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return net, history


def dump_activations(net: Network, image, layer_indices: Sequence[int]) -> dict[int, list[np.ndarray]]:
    """Each channel of each selected layer min-max scaled to an 8-bit image.

    A channel with zero range maps to mid-gray (128).
    """
    n_layers = len(net.spec.layers)
    for i in layer_indices:
        if not 0 <= i < n_layers:
            raise ValueError(f"layer index {i} out of range 0..{n_layers - 1}")
    trace = forward(net, image)
    out = {}
    for i in layer_indices:
        act = trace.activations[i]
        if act.ndim != 3:
            raise ValueError(f"layer {i} ({net.spec.layers[i].kind}) has no spatial activation")
        chans = []
        for ch in act:
            lo, hi = ch.min(), ch.max()
            if hi == lo:
                chans.append(np.full(ch.shape, 128, dtype=np.uint8))
            else:
                chans.append(np.rint((ch - lo) / (hi - lo) * 255.0).astype(np.uint8))
        out[i] = chans
    return out

