"""Export torchvision backbones to FVW1 weight packs plus reference packs.

A weight pack holds "backbone/<checkpoint-tensor-name>" entries, the input
normalization vectors, and the tap index map. A reference pack holds a
deterministic synthetic test image and the per-tap activations computed in
float64 from the (float32-rounded) pack weights, so any other
implementation can verify its forward pass against this one.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torchvision.models as tvm

from .fvw1 import read_pack, write_pack

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BACKBONES = {
    "vgg16": {"taps": (7, 14, 21), "tap_channels": (128, 256, 512)},
    "resnet18": {"taps": (1, 2, 3), "tap_channels": (64, 128, 256)},
}

# VGG16 feature-stack tensors needed up to the deepest tap (index 21)
_VGG_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21)

_RESNET_DROP_PREFIXES = ("layer4", "fc.")


class ChecksumError(Exception):
    """Checkpoint content does not match the expected digest."""


def _build_model(backbone: str, checkpoint: str | None, seed: int,
                 expected_sha256: str | None):
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r} "
                         f"(supported: {', '.join(BACKBONES)})")
    ctor = tvm.vgg16 if backbone == "vgg16" else tvm.resnet18
    if checkpoint is not None:
        raw = Path(checkpoint).read_bytes()
        if expected_sha256 is not None:
            digest = hashlib.sha256(raw).hexdigest()
            if digest != expected_sha256:
                raise ChecksumError(
                    f"checkpoint {checkpoint}: sha256 {digest} does not match "
                    f"expected {expected_sha256}"
                )
        model = ctor(weights=None)
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        source = f"checkpoint:{Path(checkpoint).name}"
    else:
        # no checkpoint supplied: deterministic seeded initialization of the
        # published architecture (the cross-implementation contract is about
        # the forward computation, not the particular weight values)
        torch.manual_seed(seed)
        model = ctor(weights=None)
        source = f"seeded-random:{seed}"
    model.eval()
    return model, source


def _collect_tensors(backbone: str, model) -> dict[str, np.ndarray]:
    state = model.state_dict()
    out = {}
    if backbone == "vgg16":
        for idx in _VGG_CONV_INDICES:
            for leaf in ("weight", "bias"):
                key = f"features.{idx}.{leaf}"
                out[f"backbone/{key}"] = state[key].numpy()
        return out
    for key, value in state.items():
        if key.startswith(_RESNET_DROP_PREFIXES) or key.startswith("fc"):
            continue
        if key.endswith("num_batches_tracked"):
            continue
        out[f"backbone/{key}"] = value.numpy()
    return out


def export(backbone: str, out_path, checkpoint: str | None = None,
           seed: int = 0, expected_sha256: str | None = None) -> dict:
    """Write the FVW1 weight pack and its manifest; returns the manifest."""
    model, source = _build_model(backbone, checkpoint, seed, expected_sha256)
    info = BACKBONES[backbone]
    tensors = _collect_tensors(backbone, model)
    tensors["meta/input_mean"] = np.array(IMAGENET_MEAN)
    tensors["meta/input_std"] = np.array(IMAGENET_STD)
    tensors["meta/tap_layers"] = np.array(info["taps"], dtype=np.float64)
    tensors["meta/tap_channels"] = np.array(info["tap_channels"], dtype=np.float64)
    out_path = Path(out_path)
    write_pack(tensors, out_path)
    manifest = {
        "backbone": backbone,
        "source": source,
        "pack": out_path.name,
        "sha256": hashlib.sha256(out_path.read_bytes()).hexdigest(),
        "tensor_count": len(tensors),
        "tensors": {name: list(arr.shape) for name, arr in sorted(tensors.items())},
        "taps": list(info["taps"]),
        "tap_channels": list(info["tap_channels"]),
    }
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def synthetic_image(side: int = 64) -> np.ndarray:
    """Deterministic gradient test pattern, (3, side, side) in [0, 1]."""
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    r = x / (side - 1)
    g = y / (side - 1)
    b = (x + y) / (2 * (side - 1))
    return np.stack([r, g, b])


def _load_model_from_pack(backbone: str, pack: dict[str, np.ndarray]):
    """Torch model carrying exactly the float32-rounded pack weights."""
    ctor = tvm.vgg16 if backbone == "vgg16" else tvm.resnet18
    model = ctor(weights=None).double()
    state = model.state_dict()
    for name, value in pack.items():
        if not name.startswith("backbone/"):
            continue
        key = name[len("backbone/"):]
        state[key] = torch.from_numpy(np.asarray(value, dtype=np.float64))
    model.load_state_dict(state)
    model.eval()
    return model


def _tap_activations(backbone: str, model, image: np.ndarray) -> list[np.ndarray]:
    mean = torch.tensor(IMAGENET_MEAN, dtype=torch.float64).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=torch.float64).view(1, 3, 1, 1)
    x = (torch.from_numpy(image[None]).double() - mean) / std
    acts = []
    with torch.no_grad():
        if backbone == "vgg16":
            h = x
            for idx, layer in enumerate(model.features):
                h = layer(h)
                if idx in BACKBONES["vgg16"]["taps"]:
                    # copy now: the following in-place ReLU would otherwise
                    # overwrite the captured pre-activation values
                    acts.append(h[0].numpy().copy())
                if idx >= 21:
                    break
        else:
            h = model.maxpool(model.relu(model.bn1(model.conv1(x))))
            for stage in (model.layer1, model.layer2, model.layer3):
                h = stage(h)
                acts.append(h.numpy()[0])
    return acts


def make_reference(backbone: str, pack_path, out_path, side: int = 64) -> dict:
    """Write the reference activation pack for a previously exported pack."""
    pack = read_pack(pack_path)
    model = _load_model_from_pack(backbone, pack)
    image = synthetic_image(side)
    # store first, then activate from the stored (float32-rounded) image so
    # both sides of the comparison start from identical bytes
    image32 = image.astype(np.float32).astype(np.float64)
    acts = _tap_activations(backbone, model, image32)
    tensors = {"input/image": image32}
    for tap, act in zip(BACKBONES[backbone]["taps"], acts):
        tensors[f"tap/{tap}"] = act
    tensors["meta/tolerance"] = np.array([1e-4])
    write_pack(tensors, out_path)
    return {
        "backbone": backbone,
        "taps": {tap: list(a.shape)
                 for tap, a in zip(BACKBONES[backbone]["taps"], acts)},
        "tolerance": 1e-4,
    }
