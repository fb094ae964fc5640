"""Encoder/decoder/adapter network builders and the VAE model container.

The architecture is a parameterized family: the full-size instance takes
3x128x128 inputs with latent dimension 100; `channel_scale` shrinks every
hidden width proportionally so the same topology trains in minutes on a CPU.
Input height and width must be divisible by 16 (four stride-2 stages); the
final encoder kernel spans whatever spatial extent remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal layer base: named parameters plus a forward pass."""

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        rng = rng or np.random.default_rng(0)
        fan_in = cin * kh * kw
        self.weight = Tensor(kaiming_uniform(rng, (cout, cin, kh, kw), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding = stride, padding

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, output_padding=0, rng=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        rng = rng or np.random.default_rng(0)
        fan_in = cin * kh * kw
        self.weight = Tensor(kaiming_uniform(rng, (cin, cout, kh, kw), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False):
        return T.conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps, self.momentum = eps, momentum

    def parameters(self):
        return {"weight": self.gamma, "bias": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False):
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.eps, self.momentum,
        )


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x, training=False):
        return T.leaky_relu(x, self.slope)


class ReLU(Module):
    def forward(self, x, training=False):
        return T.relu(x)


class Sigmoid(Module):
    def forward(self, x, training=False):
        return T.sigmoid(x)


class Identity(Module):
    def forward(self, x, training=False):
        return x


class Flatten(Module):
    def forward(self, x, training=False):
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


class DeFlatten(Module):
    def __init__(self, shape):
        self.target = tuple(shape)

    def forward(self, x, training=False):
        return x.reshape((x.shape[0],) + self.target)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None, padding=0):
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel
        self.padding = padding

    def forward(self, x, training=False):
        return T.maxpool2d(x, self.kernel, self.stride, self.padding)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def forward(self, x, training=False, record: tuple[int, ...] = ()):
        """Run all layers; when `record` is non-empty, also return the
        activations observed after each listed layer index."""
        acts = {}
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training)
            if i in record:
                acts[i] = x
        if record:
            return x, acts
        return x


# ---------------------------------------------------------------------------
# Architecture specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Shape parameters of the encoder/decoder family."""

    input_size: tuple[int, int, int] = (3, 128, 128)
    latent_dim: int = 100
    channel_scale: float = 1.0

    # hidden widths of the full-size instance, in encoder order
    base_widths: tuple[int, ...] = (128, 128, 256, 256, 512, 512, 512, 32)

    def width(self, base: int) -> int:
        return max(1, round(base * self.channel_scale))

    def validate(self) -> None:
        c, h, w = self.input_size
        if h % 16 != 0 or w % 16 != 0:
            raise ShapeError(
                f"input {h}x{w} must be divisible by 16 (four stride-2 stages)"
            )
        if self.latent_dim < 1:
            raise ShapeError("latent_dim must be positive")

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        _, h, w = self.input_size
        return h // 16, w // 16


def build_encoder(spec: ModelSpec, rng: np.random.Generator) -> Sequential:
    """Fully convolutional encoder emitting a flat (N, 2*latent_dim) code."""
    spec.validate()
    c_in = spec.input_size[0]
    s = spec.width
    w = spec.base_widths
    bh, bw = spec.bottleneck_hw
    layers = [
        Conv2d(c_in, s(w[0]), 4, 2, 1, rng), BatchNorm2d(s(w[0])), LeakyReLU(),
        Conv2d(s(w[0]), s(w[1]), 4, 2, 1, rng), BatchNorm2d(s(w[1])), LeakyReLU(),
        Conv2d(s(w[1]), s(w[2]), 3, 1, 1, rng), BatchNorm2d(s(w[2])), LeakyReLU(),
        Conv2d(s(w[2]), s(w[3]), 4, 2, 1, rng), BatchNorm2d(s(w[3])), LeakyReLU(),
        Conv2d(s(w[3]), s(w[4]), 3, 1, 1, rng), BatchNorm2d(s(w[4])), LeakyReLU(),
        Conv2d(s(w[4]), s(w[5]), 4, 2, 1, rng), BatchNorm2d(s(w[5])), LeakyReLU(),
        Conv2d(s(w[5]), s(w[6]), 3, 1, 1, rng), BatchNorm2d(s(w[6])), LeakyReLU(),
        Conv2d(s(w[6]), s(w[7]), 3, 1, 1, rng), BatchNorm2d(s(w[7])), LeakyReLU(),
        Conv2d(s(w[7]), 2 * spec.latent_dim, (bh, bw), 1, 0, rng),
        Flatten(),
    ]
    return Sequential(layers)


def build_decoder(spec: ModelSpec, rng: np.random.Generator) -> Sequential:
    """Mirror of the encoder built from transposed convolutions."""
    spec.validate()
    c_out = spec.input_size[0]
    s = spec.width
    w = spec.base_widths
    bh, bw = spec.bottleneck_hw
    layers = [
        DeFlatten((spec.latent_dim, 1, 1)),
        ConvTranspose2d(spec.latent_dim, s(w[7]), (bh, bw), 1, 0, 0, rng),
        BatchNorm2d(s(w[7])), LeakyReLU(),
        ConvTranspose2d(s(w[7]), s(w[6]), 3, 1, 1, 0, rng), BatchNorm2d(s(w[6])), LeakyReLU(),
        ConvTranspose2d(s(w[6]), s(w[5]), 3, 1, 1, 0, rng), BatchNorm2d(s(w[5])), LeakyReLU(),
        ConvTranspose2d(s(w[5]), s(w[4]), 4, 2, 1, 0, rng), BatchNorm2d(s(w[4])), LeakyReLU(),
        ConvTranspose2d(s(w[4]), s(w[3]), 3, 1, 1, 0, rng), BatchNorm2d(s(w[3])), LeakyReLU(),
        ConvTranspose2d(s(w[3]), s(w[2]), 4, 2, 1, 0, rng), BatchNorm2d(s(w[2])), LeakyReLU(),
        ConvTranspose2d(s(w[2]), s(w[1]), 3, 1, 1, 0, rng), BatchNorm2d(s(w[1])), LeakyReLU(),
        ConvTranspose2d(s(w[1]), s(w[0]), 4, 2, 1, 0, rng), BatchNorm2d(s(w[0])), LeakyReLU(),
        ConvTranspose2d(s(w[0]), c_out, 4, 2, 1, 0, rng),
        Identity(),
        Sigmoid(),
    ]
    return Sequential(layers)


# Decoder layer indices (transposed-conv positions) where feature adapters
# attach; ordered to pair with taps listed shallow-to-deep.
DECODER_ATTACH_LAYERS = (22, 10, 16)


def attachment_channels(spec: ModelSpec, count: int = 3) -> tuple[int, ...]:
    """Channel widths of the decoder attachment activations, shallow-pair first."""
    widths = {22: spec.width(128), 16: spec.width(256), 10: spec.width(512)}
    ordered = sorted(DECODER_ATTACH_LAYERS, reverse=True)[:count]
    return tuple(widths[i] for i in ordered)


def _attach_record_index(conv_index: int) -> int:
    # attachment activation is the block output (conv -> bn -> leaky relu)
    return conv_index + 2


@dataclass
class AdapterSpec:
    """Two-layer 1x1-conv head mapping a decoder activation to a tap space."""

    in_channels: int
    tap_channels: int

    def build(self, rng: np.random.Generator) -> Sequential:
        return Sequential([
            Conv2d(self.in_channels, self.tap_channels, 1, 1, 0, rng),
            ReLU(),
            Conv2d(self.tap_channels, self.tap_channels, 1, 1, 0, rng),
        ])


class VaeModel:
    """Encoder + decoder + per-space decoder variances (and tap adapters).

    `log_gamma` holds one per-channel log standard-deviation vector for each
    reconstructed space: index 0 is pixel space, 1..L the feature taps.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0,
                 tap_channels: tuple[int, ...] = (),
                 adapter_in_channels: tuple[int, ...] = ()):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.encoder = build_encoder(spec, rng)
        self.decoder = build_decoder(spec, rng)
        self.log_gamma = [Tensor(np.zeros(spec.input_size[0]), requires_grad=True)]
        self.adapters: list[Sequential] = []
        for cin, ctap in zip(adapter_in_channels, tap_channels):
            self.adapters.append(AdapterSpec(cin, ctap).build(rng))
            self.log_gamma.append(Tensor(np.zeros(ctap), requires_grad=True))
        self.tap_channels = tuple(tap_channels)
        # taps arrive shallow -> deep; the shallow tap reads the late
        # (high-index) decoder layer
        self.attach_layers = tuple(sorted(DECODER_ATTACH_LAYERS, reverse=True))[
            : len(self.adapters)
        ]

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.encoder.parameters().items():
            out[f"encoder.{name}"] = p
        for name, p in self.decoder.parameters().items():
            out[f"decoder.{name}"] = p
        for i, ad in enumerate(self.adapters):
            for name, p in ad.parameters().items():
                out[f"adapter.{i}.{name}"] = p
        for i, lg in enumerate(self.log_gamma):
            out[f"log_gamma.{i}"] = lg
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, b in self.encoder.buffers().items():
            out[f"encoder.{name}"] = b
        for name, b in self.decoder.buffers().items():
            out[f"decoder.{name}"] = b
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {name: p.data for name, p in self.parameters().items()}
        arrs.update(self.buffers())
        return arrs

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        for name, value in arrs.items():
            if name in params:
                if params[name].data.shape != value.shape:
                    raise ShapeError(
                        f"parameter {name}: stored shape {value.shape} "
                        f"does not match model shape {params[name].data.shape}"
                    )
                params[name].data = np.asarray(value, dtype=np.float64)
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise KeyError(f"unknown parameter {name!r} in state")

    # -- inference ------------------------------------------------------------

    def encode(self, x: Tensor, training: bool = False,
               record: tuple[int, ...] = ()):
        """Return (mu_z, logvar_z); sigma_z = exp(0.5 * logvar_z)."""
        if x.data.ndim != 4 or x.data.shape[1:] != tuple(self.spec.input_size):
            raise ShapeError(
                f"encode: input shape {x.data.shape} does not match "
                f"spec {(-1,) + tuple(self.spec.input_size)}"
            )
        if record:
            code, acts = self.encoder.forward(x, training, record=record)
        else:
            code, acts = self.encoder.forward(x, training), {}
        ld = self.spec.latent_dim
        mu = code.narrow(1, 0, ld)
        logvar = code.narrow(1, ld, ld)
        if record:
            return mu, logvar, acts
        return mu, logvar

    def decode(self, z: Tensor, training: bool = False,
               record: tuple[int, ...] = ()):
        record_idx = tuple(_attach_record_index(i) for i in record)
        if record_idx:
            out, acts = self.decoder.forward(z, training, record=record_idx)
            return out, {orig: acts[_attach_record_index(orig)] for orig in record}
        return self.decoder.forward(z, training)

    def reconstruct(self, x: Tensor) -> Tensor:
        mu, _ = self.encode(x, training=False)
        return self.decode(mu, training=False)

    def gamma(self, i: int = 0) -> np.ndarray:
        return np.exp(self.log_gamma[i].data)
