"""Run assembly: build model + extractor pairs from a plain config dict,
persist trained runs, and rebuild them for scoring.

A run directory holds `run.json` (architecture + mode echo), `model.fvw`
(all trainable tensors and normalization statistics), and `loss.csv`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import evalkit, nn, weights
from .extractor import MODES, FeatureExtractor, TapConfig

ABLATIONS = {f"m{i + 1}": mode for i, mode in enumerate(MODES)}

RUN_FILE = "run.json"
MODEL_FILE = "model.fvw"
LOSS_FILE = "loss.csv"


def resolve_mode(mode: str | None, ablation: str | None) -> str:
    """Map the CLI's --mode/--ablation pair onto an extractor mode name."""
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r} (use m1..m6)")
        resolved = ABLATIONS[ablation]
        if mode == "vanilla" and resolved != "vanilla":
            raise ValueError("--mode vanilla conflicts with a feature ablation")
        return resolved
    if mode == "vanilla":
        return "vanilla"
    if mode in (None, "favae"):
        return "random_frozen"
    raise ValueError(f"unknown mode {mode!r}")


def build(run: dict, pack: dict[str, np.ndarray] | None = None):
    """Construct (model, extractor) from a run-config dictionary.

    Recognized keys: input_size [C,H,W], latent_dim, channel_scale, seed,
    mode (an extractor mode name), backbone (optional override).
    """
    spec = nn.ModelSpec(
        input_size=tuple(run.get("input_size", (3, 128, 128))),
        latent_dim=int(run.get("latent_dim", 100)),
        channel_scale=float(run.get("channel_scale", 1.0)),
    )
    seed = int(run.get("seed", 0))
    mode = run.get("mode", "random_frozen")
    cfg = TapConfig.for_mode(mode, backbone=run.get("backbone"))
    fx = FeatureExtractor(cfg, pack=pack, seed=seed,
                          channel_scale=spec.channel_scale)
    if cfg.num_taps:
        if cfg.backbone == "own_encoder":
            probe_model = nn.VaeModel(spec, seed=seed)
            taps = fx.tap_channels(spec.input_size, encoder=probe_model.encoder)
        else:
            taps = fx.tap_channels(spec.input_size)
        model = nn.VaeModel(spec, seed=seed, tap_channels=taps,
                            adapter_in_channels=nn.attachment_channels(spec))
    else:
        model = nn.VaeModel(spec, seed=seed)
    return model, fx


def save_run(run_dir, run: dict, model: nn.VaeModel) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RUN_FILE).write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    weights.save_weights(model.state_arrays(), run_dir / MODEL_FILE)


def load_run(run_dir, pack: dict[str, np.ndarray] | None = None):
    """Rebuild a trained (model, extractor, run-config) triple."""
    run_dir = Path(run_dir)
    run_path = run_dir / RUN_FILE
    if not run_path.exists():
        raise FileNotFoundError(f"no {RUN_FILE} in {run_dir}")
    run = json.loads(run_path.read_text())
    if run.get("mode") == "pretrained_frozen" and pack is None and run.get("weights"):
        pack = weights.load_weights(run["weights"])
    model, fx = build(run, pack=pack)
    model.load_state_arrays(weights.load_weights(run_dir / MODEL_FILE))
    return model, fx, run


def samples_to_batch(samples, input_size) -> np.ndarray:
    """Stack labeled samples into a (N, C, H, W) float batch in [0, 1]."""
    c, h, w = input_size
    out = np.empty((len(samples), c, h, w))
    for i, s in enumerate(samples):
        img = s.image
        if img.shape[:2] != (h, w):
            img = evalkit._resize_float(img, h)
        if img.ndim == 2:
            chw = np.repeat(img[None], c, axis=0)
        else:
            chw = img.transpose(2, 0, 1)
            if chw.shape[0] != c:
                raise ValueError(
                    f"image {s.path!r} has {chw.shape[0]} channels, expected {c}"
                )
        out[i] = chw
    return out


def toy_batch_to_input(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """Toy-unit (N, side, side) images to model input (N, C, side, side)."""
    from .toy import to_unit

    unit = to_unit(images)
    return np.repeat(unit[:, None], channels, axis=1)
