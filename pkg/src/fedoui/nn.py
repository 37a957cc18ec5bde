"""A small convolutional network engine with hand-written backpropagation.

Tensors are plain float64 :class:`numpy.ndarray` objects in NCHW layout.
A network is described by an immutable :class:`ModelSpec` and its weights
live in a separate :class:`ModelParams`, so the same spec can be shared by
every client of a federated run while each one owns its parameters.
"""

from dataclasses import dataclass, field
from math import sqrt

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, InputError, InternalError, NumericError


# ---------------------------------------------------------------------------
# Parameters


class ModelParams:
    """Ordered mapping ``name -> ndarray`` that behaves like a vector.

    Supports ``+``, ``-``, unary ``-`` and multiplication by a scalar.
    Binary operations require identical names and shapes.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors):
        self._tensors = {k: np.asarray(v, dtype=np.float64) for k, v in dict(tensors).items()}

    # mapping protocol
    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    @property
    def shapes(self):
        return {k: v.shape for k, v in self._tensors.items()}

    @property
    def size(self):
        return sum(v.size for v in self._tensors.values())

    def _check_compatible(self, other):
        if not isinstance(other, ModelParams):
            raise TypeError(f"expected ModelParams, got {type(other).__name__}")
        if list(self._tensors) != list(other._tensors):
            raise InputError("ModelParams have different layer names")
        for k, v in self._tensors.items():
            if v.shape != other._tensors[k].shape:
                raise InputError(f"shape mismatch for {k}: {v.shape} vs {other._tensors[k].shape}")

    def __add__(self, other):
        self._check_compatible(other)
        return ModelParams({k: v + other._tensors[k] for k, v in self._tensors.items()})

    def __sub__(self, other):
        self._check_compatible(other)
        return ModelParams({k: v - other._tensors[k] for k, v in self._tensors.items()})

    def __neg__(self):
        return ModelParams({k: -v for k, v in self._tensors.items()})

    def __mul__(self, scalar):
        if isinstance(scalar, ModelParams):
            return NotImplemented
        s = float(scalar)
        return ModelParams({k: s * v for k, v in self._tensors.items()})

    __rmul__ = __mul__

    def dot(self, other):
        self._check_compatible(other)
        return float(sum(np.dot(v.ravel(), other._tensors[k].ravel()) for k, v in self._tensors.items()))

    def norm(self):
        return sqrt(self.dot(self))

    def ravel(self):
        """Concatenate all tensors into one flat vector (in layer order)."""
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def zeros_like(self):
        return ModelParams({k: np.zeros_like(v) for k, v in self._tensors.items()})

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self._tensors.items()})

    def array_equal(self, other):
        """Bit-exact equality of names, shapes and values."""
        if not isinstance(other, ModelParams) or list(self) != list(other):
            return False
        return all(np.array_equal(v, other[k]) for k, v in self.items())

    def to_dict(self):
        return {k: v.tolist() for k, v in self._tensors.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def __repr__(self):
        inner = ", ".join(f"{k}={v.shape}" for k, v in self._tensors.items())
        return f"ModelParams({inner})"


# ---------------------------------------------------------------------------
# Layers
#
# Each layer maps an input shape (without batch axis) to an output shape and
# implements forward/backward.  ``aux`` is whatever the backward pass needs
# beyond the layer input.


@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    padding: int = 0

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
            f"{self.name}.bias": (self.out_channels,),
        }

    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ConfigError(f"{self.name}: expected ({self.in_channels}, H, W) input, got {in_shape}", self.name)
        h = in_shape[1] + 2 * self.padding - self.kernel + 1
        w = in_shape[2] + 2 * self.padding - self.kernel + 1
        if h < 1 or w < 1:
            raise ConfigError(f"{self.name}: kernel larger than padded input {in_shape}", self.name)
        return (self.out_channels, h, w)

    def _columns(self, x):
        p, k = self.padding, self.kernel
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
        b, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        return cols, ho, wo

    def forward(self, x, params):
        w = params[f"{self.name}.weight"]
        bias = params[f"{self.name}.bias"]
        cols, ho, wo = self._columns(x)
        out = cols @ w.reshape(self.out_channels, -1).T + bias
        out = out.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), cols

    def backward(self, dy, x, cols, params, need_input_grad=True):
        w = params[f"{self.name}.weight"]
        b, _, ho, wo = dy.shape
        k, p = self.kernel, self.padding
        dflat = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.out_channels)
        grads = {
            f"{self.name}.weight": (dflat.T @ cols).reshape(w.shape),
            f"{self.name}.bias": dflat.sum(axis=0),
        }
        if not need_input_grad:
            return None, grads
        dcols = dflat @ w.reshape(self.out_channels, -1)
        # (k*k, B, Ho, Wo, C) so each kernel offset is one contiguous block
        dcols = np.ascontiguousarray(
            dcols.reshape(b, ho, wo, self.in_channels, k * k).transpose(4, 0, 1, 2, 3))
        dxp = np.zeros((b, x.shape[2] + 2 * p, x.shape[3] + 2 * p, self.in_channels))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + ho, j:j + wo, :] += dcols[i * k + j]
        dxp = dxp[:, p:dxp.shape[1] - p, p:dxp.shape[2] - p, :]
        return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)), grads


@dataclass(frozen=True)
class ReLU:
    name: str

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, params):
        return np.maximum(x, 0.0), None

    def backward(self, dy, x, aux, params):
        return dy * (x > 0.0), {}


@dataclass(frozen=True)
class MaxPool2d:
    """Max pooling.  Ties go to the first maximum in row-major window order."""

    name: str
    size: int
    stride: int

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"{self.name}: expected (C, H, W) input, got {in_shape}", self.name)
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ConfigError(f"{self.name}: window {self.size} larger than input {in_shape}", self.name)
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x, params):
        s, st = self.size, self.stride
        b, c, h, w = x.shape
        ho, wo = (h - s) // st + 1, (w - s) // st + 1
        win = sliding_window_view(x, (s, s), axis=(2, 3))[:, :, ::st, ::st][:, :, :ho, :wo]
        flat = win.reshape(b, c, ho, wo, s * s)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, arg

    def backward(self, dy, x, arg, params):
        s, st = self.size, self.stride
        b, c, ho, wo = dy.shape
        rows = np.arange(ho)[:, None] * st + arg // s
        cols = np.arange(wo)[None, :] * st + arg % s
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(x)
        if st >= s:
            dx[bi, ci, rows, cols] = dy
        else:
            np.add.at(dx, (bi, ci, rows, cols), dy)
        return dx, {}


@dataclass(frozen=True)
class Flatten:
    name: str

    def param_shapes(self):
        return {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, x, aux, params):
        return dy.reshape(x.shape), {}


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def fan_in(self):
        return self.in_features

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ConfigError(f"{self.name}: expected ({self.in_features},) input, got {in_shape}", self.name)
        return (self.out_features,)

    def forward(self, x, params):
        return x @ params[f"{self.name}.weight"].T + params[f"{self.name}.bias"], None

    def backward(self, dy, x, aux, params):
        w = params[f"{self.name}.weight"]
        grads = {f"{self.name}.weight": dy.T @ x, f"{self.name}.bias": dy.sum(axis=0)}
        return dy @ w, grads


# ---------------------------------------------------------------------------
# Model spec


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack, input shape ``(C, H, W)``, class count and the tapped layer.

    ``tap`` names the :class:`Linear` layer whose output (before its ReLU) is
    exposed as the penultimate pre-activation.
    """

    input_shape: tuple
    layers: tuple
    n_classes: int
    tap: str
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        tapped = [layer for layer in self.layers if layer.name == self.tap]
        if len(tapped) != 1 or not isinstance(tapped[0], Linear):
            raise ConfigError(f"tap {self.tap!r} must name exactly one Linear layer", self.tap)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        if shapes[-1] != (self.n_classes,):
            raise ConfigError(f"network output {shapes[-1]} does not match {self.n_classes} classes",
                              self.layers[-1].name if self.layers else None)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def tap_width(self):
        return self.shapes[self.tap_index + 1][0]

    @property
    def tap_index(self):
        return next(i for i, layer in enumerate(self.layers) if layer.name == self.tap)

    def param_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def check_params(self, params):
        expected = self.param_shapes()
        for layer in self.layers:
            for key, shape in layer.param_shapes().items():
                if key not in params.keys() or params[key].shape != shape:
                    got = params[key].shape if key in params.keys() else None
                    raise ConfigError(f"{layer.name}: parameter {key} expected shape {shape}, got {got}",
                                      layer.name)
        if len(params) != len(expected):
            raise ConfigError("parameters contain entries not in the model spec")


def cnn_spec(in_channels=3, image_side=32, n_classes=10, conv1=32, conv2=64, hidden=128):
    """Two conv blocks (conv3x3-pad1, ReLU, maxpool 2/2) then a two-layer head.

    With the defaults this is the 32x32 RGB CIFAR model with a 128-unit
    penultimate layer (``fc1``).
    """
    if image_side % 4:
        raise ConfigError("image_side must be divisible by 4", "image_side")
    flat = conv2 * (image_side // 4) ** 2
    layers = (
        Conv2d("conv1", in_channels, conv1, 3, 1),
        ReLU("relu1"),
        MaxPool2d("pool1", 2, 2),
        Conv2d("conv2", conv1, conv2, 3, 1),
        ReLU("relu2"),
        MaxPool2d("pool2", 2, 2),
        Flatten("flatten"),
        Linear("fc1", flat, hidden),
        ReLU("relu3"),
        Linear("fc2", hidden, n_classes),
    )
    return ModelSpec((in_channels, image_side, image_side), layers, n_classes, tap="fc1")


def reference_cnn(n_classes=10):
    return cnn_spec(3, 32, n_classes, 32, 64, 128)


def init_params(spec, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, in layer order."""
    tensors = {}
    for layer in spec.layers:
        shapes = layer.param_shapes()
        if not shapes:
            continue
        bound = sqrt(1.0 / layer.fan_in())
        for key, shape in shapes.items():
            tensors[key] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class ForwardCache:
    """Per-layer inputs and auxiliaries from :func:`forward`."""

    inputs: list
    aux: list
    logits: np.ndarray
    penultimate: np.ndarray


def forward(spec, params, batch):
    """Run the network on ``batch`` (B x C x H x W).

    Returns ``(logits, cache)``; ``cache.penultimate`` is the tapped layer's
    pre-activation matrix (B x d) in the same row order as ``batch``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ConfigError(f"input: expected batch of shape (B, {', '.join(map(str, spec.input_shape))}), "
                          f"got {x.shape}", "input")
    spec.check_params(params)
    inputs, aux = [], []
    penultimate = None
    for layer in spec.layers:
        inputs.append(x)
        x, a = layer.forward(x, params)
        aux.append(a)
        if layer.name == spec.tap:
            penultimate = x
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite logits in forward pass")
    return x, ForwardCache(inputs, aux, x, penultimate)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError("logits must be B x K and labels length B")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(spec, params, cache, labels):
    """Gradient of the mean cross-entropy w.r.t. every parameter."""
    labels = np.asarray(labels)
    logits = cache.logits
    if len(cache.inputs) != len(spec.layers) or logits.shape != (labels.shape[0], spec.n_classes):
        raise InternalError("forward cache does not match spec/labels")
    for layer, x, shape in zip(spec.layers, cache.inputs, spec.shapes):
        if x.shape[1:] != shape:
            raise InternalError(f"stale cache at layer {layer.name}")
    b = logits.shape[0]
    dy = np.exp(_log_softmax(logits))
    dy[np.arange(b), labels] -= 1.0
    dy /= b
    grads = {}
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        if i == 0 and isinstance(layer, Conv2d):
            dy, g = layer.backward(dy, cache.inputs[i], cache.aux[i], params, need_input_grad=False)
        else:
            dy, g = layer.backward(dy, cache.inputs[i], cache.aux[i], params)
        grads.update(g)
    return ModelParams({k: grads[k] for k in params.keys()})


def sgd_momentum_step(params, gradients, velocity, lr, momentum):
    """``v' = momentum * v + g``; ``p' = p - lr * v'``.  Returns ``(p', v')``."""
    params._check_compatible(gradients)
    params._check_compatible(velocity)
    new_v = ModelParams({k: momentum * velocity[k] + gradients[k] for k in params.keys()})
    new_p = ModelParams({k: params[k] - lr * new_v[k] for k in params.keys()})
    return new_p, new_v


def predict_logits(spec, params, images, batch_size=100):
    """Logits for a whole array of images, evaluated in chunks."""
    out = [forward(spec, params, images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, spec.n_classes))
    return np.concatenate(out)


def penultimate_preactivations(spec, params, images):
    return forward(spec, params, images)[1].penultimate
