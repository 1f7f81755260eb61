"""Network specifications and a small sequential network on the autodiff tensors."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError, NumericalBlowupError, UsageError
from . import autodiff as ad

ACTIVATIONS = ("softplus", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    padding: int | None = None

    @property
    def trainable(self):
        return self.kind in ("conv1d", "dense")

    def param_shapes(self):
        if self.kind == "conv1d":
            return [(self.kernel, self.in_channels, self.out_channels), (self.out_channels,)]
        if self.kind == "dense":
            return [(self.in_channels, self.out_channels), (self.out_channels,)]
        return []


def conv(cin, cout, kernel=1, padding=None):
    return LayerSpec("conv1d", cin, cout, kernel, padding)


def dense(cin, cout):
    return LayerSpec("dense", cin, cout)


def act(kind):
    return LayerSpec(kind)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers; convolutional networks take (batch, time, channels) input."""

    layers: tuple
    input_channels: int

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("a network needs at least one layer")
        width = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.kind in ACTIVATIONS:
                continue
            if layer.kind not in ("conv1d", "dense"):
                raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
            if layer.in_channels != width:
                raise ConfigurationError(
                    f"layer {i} expects {layer.in_channels} channels but receives {width}")
            if layer.kind == "conv1d" and (layer.kernel < 1 or layer.kernel % 2 == 0):
                raise ConfigurationError("convolution kernels must be odd and positive")
            width = layer.out_channels

    @property
    def output_channels(self):
        width = self.input_channels
        for layer in self.layers:
            if layer.trainable:
                width = layer.out_channels
        return width

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for layer in self.layers for s in layer.param_shapes())

    def to_dict(self):
        return {"input_channels": self.input_channels,
                "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(**layer) for layer in d["layers"]), d["input_channels"])


def conv_stack(cin, width, cout, n_hidden, kernel=1, activation="softplus"):
    """conv(cin, width), then ``n_hidden`` conv(width, width), then conv(width, cout)."""
    layers = [conv(cin, width, kernel), act(activation)]
    for _ in range(n_hidden):
        layers += [conv(width, width, kernel), act(activation)]
    layers.append(conv(width, cout, kernel))
    return NetworkSpec(tuple(layers), cin)


def mlp(cin, width, cout, n_hidden, activation="tanh"):
    layers = [dense(cin, width), act(activation)]
    for _ in range(n_hidden):
        layers += [dense(width, width), act(activation)]
    layers.append(dense(width, cout))
    return NetworkSpec(tuple(layers), cin)


_ACT_SLOPE_AT_ZERO = {"softplus": 0.5, "tanh": 1.0}


class Network:
    """Sequential network with trainable parameters stored as autodiff tensors."""

    def __init__(self, spec, params=None, seed=0, zero_last=False, init="uniform",
                 last_scale=1.0):
        """``init="uniform"``: weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

        ``init="gain"``: zero biases and normal weights whose variance
        (1/fan_in) / act'(0)^2 keeps input sensitivity from decaying with depth.
        The last layer is multiplied by ``last_scale`` (0 when ``zero_last``).
        """
        self.spec = spec
        shapes = [s for layer in spec.layers for s in layer.param_shapes()]
        if init not in ("uniform", "gain"):
            raise ConfigurationError(f"unknown init scheme {init!r}")
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            layers = spec.layers
            for i, layer in enumerate(layers):
                if not layer.trainable:
                    continue
                fan_in = layer.in_channels * (layer.kernel if layer.kind == "conv1d" else 1)
                w_shape, b_shape = layer.param_shapes()
                if init == "uniform":
                    bound = 1.0 / np.sqrt(fan_in)
                    params.append(rng.uniform(-bound, bound, size=w_shape))
                    params.append(rng.uniform(-bound, bound, size=b_shape))
                else:
                    nxt = layers[i + 1].kind if i + 1 < len(layers) else None
                    slope = _ACT_SLOPE_AT_ZERO.get(nxt, 1.0)
                    params.append(rng.standard_normal(w_shape) / (slope * np.sqrt(fan_in)))
                    params.append(np.zeros(b_shape))
            scale = 0.0 if zero_last else float(last_scale)
            if scale != 1.0:
                params[-2] = params[-2] * scale
                params[-1] = params[-1] * scale
        if len(params) != len(shapes):
            raise ConfigurationError(f"expected {len(shapes)} parameter arrays, got {len(params)}")
        self.params = []
        for i, (p, shape) in enumerate(zip(params, shapes)):
            arr = np.array(p, dtype=np.float64).reshape(shape)
            self.params.append(ad.Tensor(arr, requires_grad=True, name=f"param[{i}]"))

    @property
    def n_params(self):
        return self.spec.n_params

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def flat_params(self):
        return np.concatenate([p.value.ravel() for p in self.params])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise UsageError(f"expected {self.n_params} parameters, got {flat.size}")
        i = 0
        for p in self.params:
            n = p.value.size
            p.value = flat[i:i + n].reshape(p.shape).copy()
            i += n

    def flat_grads(self):
        return np.concatenate([(np.zeros_like(p.value) if p.grad is None else p.grad).ravel()
                               for p in self.params])

    def copy(self):
        return Network(self.spec, [p.value.copy() for p in self.params])

    def __call__(self, x):
        return forward(self, x)


def forward(net, x):
    """Run ``net`` on ``x``; the returned tensor carries the trace for ``backward``."""
    x = ad.as_tensor(x)
    if x.shape[-1] != net.spec.input_channels:
        raise UsageError(
            f"input has {x.shape[-1]} channels, network expects {net.spec.input_channels}")
    if net.spec.layers[0].kind == "conv1d" and x.ndim != 3:
        raise UsageError("convolutional networks take (batch, time, channels) input")
    it = iter(net.params)
    for layer in net.spec.layers:
        if layer.kind == "conv1d":
            x = ad.conv1d(x, next(it), next(it), layer.padding)
        elif layer.kind == "dense":
            x = ad.add(ad.matmul(x, next(it)), next(it))
        elif layer.kind == "softplus":
            x = ad.softplus(x)
        else:
            x = ad.tanh(x)
    if not np.all(np.isfinite(x.value)):
        raise NumericalBlowupError("network produced non-finite output")
    return x


def backward(output, seed=None, net=None):
    """Backpropagate ``seed`` from ``output``; returns the parameter gradients of ``net``."""
    if net is not None:
        net.zero_grad()
    ad.backward(output, seed)
    if net is not None:
        return [np.zeros_like(p.value) if p.grad is None else p.grad for p in net.params]
    return None


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def gradcheck(loss_fn, params, n_coords=64, eps=1e-5, seed=0):
    """Compare reverse-mode gradients with central differences at random coordinates.

    ``loss_fn()`` must build a fresh scalar tensor from ``params`` each call.
    Returns the relative error ||analytic - numeric|| / max norm over the
    sampled coordinates.
    """
    for p in params:
        p.grad = None
    ad.backward(loss_fn())
    sizes = [p.value.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    analytic, numeric = [], []
    for flat in picks:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[j], params[j].shape)
        p = params[j]
        g = 0.0 if p.grad is None else p.grad[idx]
        orig = p.value[idx]
        p.value[idx] = orig + eps
        with ad.no_grad():
            up = float(loss_fn().value)
        p.value[idx] = orig - eps
        with ad.no_grad():
            down = float(loss_fn().value)
        p.value[idx] = orig
        analytic.append(g)
        numeric.append((up - down) / (2 * eps))
    return relative_error(analytic, numeric)
