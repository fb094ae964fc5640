"""Feature extractors producing the tapped feature maps the decoder reconstructs.

A tap is a designated intermediate layer of a backbone network; the feature
batch pairs the raw pixels y_0 = x with the tap activations y_1..y_L, ordered
shallow to deep. Supported backbones: an ImageNet-style VGG16 trunk (loaded
from a weight pack or randomly initialized), a ResNet18 trunk, or the model's
own encoder. Ablation modes control whether the extractor is trained and
whether gradients may flow into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

BACKBONES = ("vgg16", "resnet18", "random_vgg16", "own_encoder", "none")

# ablation modes
MODES = (
    "pretrained_frozen",   # M1: pretrained backbone, weights never updated
    "random_frozen",       # M2: randomly initialized backbone, never updated
    "encoder_gradstop",    # M3: own encoder as extractor, targets detached
    "vanilla",             # M4: no feature taps at all
    "unfrozen",            # M5: backbone weights join the optimizer
    "encoder_nostop",      # M6: own encoder, gradients flow into the targets
)

FROZEN_MODES = ("pretrained_frozen", "random_frozen")
ENCODER_MODES = ("encoder_gradstop", "encoder_nostop")

# Layer taps per backbone (verbatim indices into the published layer stacks)
# and the decoder layers their adapters read from.
VGG16_TAPS = (7, 14, 21)
VGG16_TAP_CHANNELS = (128, 256, 512)
RESNET18_TAPS = (1, 2, 3)          # residual stage number
RESNET18_TAP_CHANNELS = (64, 128, 256)
OWN_ENCODER_TAPS = (3, 9, 15)
DECODER_ATTACHMENTS = (22, 10, 16)


@dataclass(frozen=True)
class TapConfig:
    """Which backbone to tap, where, and under which training regime."""

    backbone: str
    mode: str
    tap_layers: tuple[int, ...]
    tap_channels: tuple[int, ...]
    attach_layers: tuple[int, ...] = DECODER_ATTACHMENTS

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.tap_layers) != len(self.tap_channels):
            raise ValueError("tap_layers and tap_channels must pair up")
        if len(self.tap_layers) != len(self.attach_layers):
            raise ValueError("every tap needs a decoder attachment")
        if self.mode == "vanilla" and self.tap_layers:
            raise ValueError("vanilla mode admits no taps")
        if self.mode != "vanilla" and not self.tap_layers:
            raise ValueError(f"mode {self.mode!r} requires at least one tap")

    @property
    def num_taps(self) -> int:
        return len(self.tap_layers)

    @property
    def frozen(self) -> bool:
        return self.mode in FROZEN_MODES

    @property
    def paired_attachments(self) -> tuple[int, ...]:
        """Attachments reordered to pair with taps listed shallow -> deep.

        The published table lists decoder layers as (22, 10, 16); the shallow
        tap pairs with the shallow (late, high-index) decoder layer, so the
        pairing order is the attachment list sorted descending.
        """
        return tuple(sorted(self.attach_layers, reverse=True))

    @classmethod
    def for_mode(cls, mode: str, backbone: str | None = None) -> "TapConfig":
        """Standard configuration for each ablation mode."""
        if mode == "vanilla":
            return cls("none", mode, (), (), ())
        if mode in ENCODER_MODES:
            return cls("own_encoder", mode, OWN_ENCODER_TAPS, (0, 0, 0))
        if mode == "random_frozen":
            backbone = backbone or "random_vgg16"
        backbone = backbone or "vgg16"
        if backbone in ("vgg16", "random_vgg16"):
            return cls(backbone, mode, VGG16_TAPS, VGG16_TAP_CHANNELS)
        if backbone == "resnet18":
            return cls(backbone, mode, RESNET18_TAPS, RESNET18_TAP_CHANNELS)
        raise ValueError(f"backbone {backbone!r} has no standard taps")


class FeatureBatch:
    """y_0 = x plus the tap activations y_1..y_L, shallow to deep."""

    def __init__(self, pixels: Tensor, taps: list[Tensor]):
        self.tensors = [pixels] + list(taps)

    @property
    def pixels(self) -> Tensor:
        return self.tensors[0]

    @property
    def taps(self) -> list[Tensor]:
        return self.tensors[1:]

    def __len__(self) -> int:
        return len(self.tensors)


# ---------------------------------------------------------------------------
# Backbone trunks
# ---------------------------------------------------------------------------

# VGG16 convolutional stack up to the last tapped conv, published layer
# indices: conv indices and their (in, out) channels; pools at 4, 9, 16.
_VGG_CONVS = {
    0: (3, 64), 2: (64, 64),
    5: (64, 128), 7: (128, 128),
    10: (128, 256), 12: (256, 256), 14: (256, 256),
    17: (256, 512), 19: (512, 512), 21: (512, 512),
}
_VGG_POOLS = (4, 9, 16)
_VGG_DEPTH = 22


def build_vgg_trunk(rng: np.random.Generator, channel_scale: float = 1.0) -> nn.Sequential:
    """VGG16 features[0..21]; taps are the pre-activation conv outputs."""

    def width(c):
        return 3 if c == 3 else max(1, round(c * channel_scale))

    layers = []
    for i in range(_VGG_DEPTH):
        if i in _VGG_CONVS:
            cin, cout = _VGG_CONVS[i]
            layers.append(nn.Conv2d(width(cin), width(cout), 3, 1, 1, rng))
        elif i in _VGG_POOLS:
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers.append(nn.ReLU())
    return nn.Sequential(layers)


class BasicBlock(nn.Module):
    """Two 3x3 conv/BN pairs with an additive skip connection."""

    def __init__(self, cin, cout, stride, rng):
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, rng)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, rng)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                [nn.Conv2d(cin, cout, 1, stride, 0, rng), nn.BatchNorm2d(cout)]
            )

    def _children(self):
        out = {"conv1": self.conv1, "bn1": self.bn1,
               "conv2": self.conv2, "bn2": self.bn2}
        if self.downsample is not None:
            out["downsample.0"] = self.downsample.layers[0]
            out["downsample.1"] = self.downsample.layers[1]
        return out

    def parameters(self):
        return {f"{cname}.{n}": p for cname, child in self._children().items()
                for n, p in child.parameters().items()}

    def buffers(self):
        return {f"{cname}.{n}": b for cname, child in self._children().items()
                for n, b in child.buffers().items()}

    def forward(self, x, training=False):
        out = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        out = self.bn2.forward(self.conv2.forward(out), training)
        skip = x if self.downsample is None else self.downsample.forward(x, training)
        return T.relu(out + skip)


class ResNet18Trunk(nn.Module):
    """Stem plus the first three residual stages of ResNet18."""

    def __init__(self, rng: np.random.Generator, channel_scale: float = 1.0):
        def width(c):
            return max(1, round(c * channel_scale))

        w64, w128, w256 = width(64), width(128), width(256)
        self.conv1 = nn.Conv2d(3, w64, 7, 2, 3, rng)
        self.bn1 = nn.BatchNorm2d(w64)
        self.layer1 = nn.Sequential([BasicBlock(w64, w64, 1, rng),
                                     BasicBlock(w64, w64, 1, rng)])
        self.layer2 = nn.Sequential([BasicBlock(w64, w128, 2, rng),
                                     BasicBlock(w128, w128, 1, rng)])
        self.layer3 = nn.Sequential([BasicBlock(w128, w256, 2, rng),
                                     BasicBlock(w256, w256, 1, rng)])

    def _children(self):
        return {"conv1": self.conv1, "bn1": self.bn1,
                "layer1": self.layer1, "layer2": self.layer2, "layer3": self.layer3}

    def parameters(self):
        return {f"{cname}.{n}": p for cname, child in self._children().items()
                for n, p in child.parameters().items()}

    def buffers(self):
        return {f"{cname}.{n}": b for cname, child in self._children().items()
                for n, b in child.buffers().items()}

    def forward_taps(self, x, training=False):
        h = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = T.maxpool2d(h, 3, 2, 1)
        t1 = self.layer1.forward(h, training)
        t2 = self.layer2.forward(t1, training)
        t3 = self.layer3.forward(t2, training)
        return [t1, t2, t3]

    def forward(self, x, training=False):
        return self.forward_taps(x, training)[-1]


# ---------------------------------------------------------------------------
# The extractor
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Produces FeatureBatch objects according to a TapConfig.

    Pretrained modes require a weight-pack dictionary (see `favae.weights`)
    holding "backbone/<tensor-name>" entries plus "meta/input_mean" and
    "meta/input_std" normalization vectors. Encoder modes read taps off the
    VAE encoder supplied at extraction time.
    """

    def __init__(self, config: TapConfig, pack: dict[str, np.ndarray] | None = None,
                 seed: int = 0, channel_scale: float = 1.0):
        self.config = config
        self.input_mean = None
        self.input_std = None
        self.trunk = None
        rng = np.random.default_rng(seed)
        if config.backbone in ("vgg16", "resnet18"):
            if pack is None:
                raise ValueError(
                    f"backbone {config.backbone!r} needs a pretrained weight pack"
                )
            if config.backbone == "vgg16":
                self.trunk = build_vgg_trunk(rng)
            else:
                self.trunk = ResNet18Trunk(rng)
            self._load_pack(pack)
        elif config.backbone == "random_vgg16":
            self.trunk = build_vgg_trunk(rng, channel_scale)
        elif config.backbone == "own_encoder":
            if config.mode not in ENCODER_MODES:
                raise ValueError("own_encoder backbone requires an encoder mode")
        # "none" has no trunk

    def _load_pack(self, pack: dict[str, np.ndarray]) -> None:
        prefix = "backbone/"
        entries = {k[len(prefix):]: v for k, v in pack.items() if k.startswith(prefix)}
        if not entries:
            raise ValueError("weight pack holds no backbone/ tensors")
        self.input_mean = np.asarray(pack.get("meta/input_mean", np.zeros(3)))
        self.input_std = np.asarray(pack.get("meta/input_std", np.ones(3)))
        params = self.trunk.parameters()
        buffers = self.trunk.buffers()
        if self.config.backbone == "vgg16":
            # torchvision naming: features.<idx>.weight/bias
            rename = {}
            for name in params:
                idx, leaf = name.split(".", 1)
                rename[f"features.{idx}.{leaf}"] = name
        else:
            rename = {name: name for name in params}
            rename.update({name: name for name in buffers})
        for stored, local in rename.items():
            if stored not in entries:
                # conv bias slots absent from bias-free checkpoints stay zero
                if local.endswith(".bias") and local in params:
                    continue
                raise KeyError(f"weight pack missing tensor {stored!r}")
            value = entries[stored]
            if local in params:
                if params[local].data.shape != value.shape:
                    raise ShapeError(
                        f"tensor {stored!r}: pack shape {value.shape} does not "
                        f"match trunk shape {params[local].data.shape}"
                    )
                params[local].data = np.asarray(value, dtype=np.float64)
            else:
                buffers[local][...] = value

    def parameters(self) -> dict[str, Tensor]:
        """Parameters the optimizer may update: empty unless mode is unfrozen."""
        if self.config.mode != "unfrozen" or self.trunk is None:
            return {}
        return {f"extractor.{n}": p for n, p in self.trunk.parameters().items()}

    def _normalize(self, x: Tensor) -> Tensor:
        if self.input_mean is None:
            return x
        shape = x.data.shape
        mean = T.broadcast_channels(Tensor(-self.input_mean), shape)
        inv = T.broadcast_channels(Tensor(1.0 / self.input_std), shape)
        return (x + mean) * inv

    def extract(self, x: Tensor, encoder: nn.Sequential | None = None) -> FeatureBatch:
        cfg = self.config
        if cfg.mode == "vanilla":
            return FeatureBatch(x, [])
        if cfg.backbone == "own_encoder":
            if encoder is None:
                raise ValueError("encoder modes need the VAE encoder at extract time")
            _, acts = encoder.forward(x, training=False, record=cfg.tap_layers)
            taps = [acts[i] for i in cfg.tap_layers]
            if cfg.mode == "encoder_gradstop":
                taps = [T.gradient_stop(t) for t in taps]
            return FeatureBatch(x, taps)
        xin = self._normalize(x)
        if cfg.backbone == "resnet18":
            taps = self.trunk.forward_taps(xin, training=False)
        else:
            _, acts = self.trunk.forward(xin, training=False, record=cfg.tap_layers)
            taps = [acts[i] for i in cfg.tap_layers]
        if cfg.frozen:
            taps = [T.gradient_stop(t) for t in taps]
        return FeatureBatch(x, taps)

    def tap_channels(self, input_size: tuple[int, int, int],
                     encoder: nn.Sequential | None = None) -> tuple[int, ...]:
        """Channel count of each tap, probed with a tiny forward pass."""
        c, h, w = input_size
        probe = Tensor(np.zeros((1, c, h, w)))
        batch = self.extract(probe, encoder)
        return tuple(t.data.shape[1] for t in batch.taps)
