"""Evaluation toolkit: dataset ingestion, crop/augment preparation,
AUROC computation, report assembly, and anomaly-map rendering.

Directory conventions:

* ``mvtec`` layout: ``train/good/*.png``; ``test/<defect>/*.png`` where the
  defect name ``good`` marks normal test images; defect masks live at
  ``ground_truth/<defect>/<stem>_mask.png``.
* ``flat`` layout: a single directory of images with optional sidecar masks
  named ``<stem>_mask.png``; an image is anomalous iff its mask exists.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import toy


class LayoutError(Exception):
    """Dataset directory does not follow the declared layout."""


@dataclass
class LabeledSample:
    image: np.ndarray            # (H, W) or (H, W, 3), float64 in [0, 1]
    label: str                   # "normal" | "anomalous"
    mask: np.ndarray | None = None   # (H, W) bool
    path: str = ""

    def __post_init__(self):
        if self.label not in ("normal", "anomalous"):
            raise ValueError(f"unknown label {self.label!r}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise LayoutError(
                f"mask shape {self.mask.shape} does not match image "
                f"{self.image.shape[:2]} for {self.path}"
            )


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average (exact halves)."""
    order = np.argsort(values, kind="mergesort")
    svals = values[order]
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j < values.size and svals[j] == svals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def auroc(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUROC with ties counted one half."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs at least one score in each class")
    ranks = _average_ranks(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def pixel_auroc(maps, masks) -> float:
    """AUROC over all pixels pooled across the evaluation set."""
    pos_chunks, neg_chunks = [], []
    for amap, mask in zip(maps, masks, strict=True):
        values = np.asarray(amap, dtype=np.float64)
        m = np.zeros(values.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
        if m.shape != values.shape:
            raise ValueError(f"mask shape {m.shape} does not match map {values.shape}")
        pos_chunks.append(values[m])
        neg_chunks.append(values[~m])
    pos = np.concatenate(pos_chunks)
    neg = np.concatenate(neg_chunks)
    if pos.size == 0:
        raise ValueError("no anomalous pixels in the evaluation set")
    return auroc(pos, neg)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _read_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if len(img.getbands()) >= 3 else img.convert("L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def _read_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


def _mvtec_test_samples(root: Path) -> list[LabeledSample]:
    test_dir = root / "test"
    samples = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for img_path in sorted(defect_dir.glob("*.png")):
            image = _read_image(img_path)
            if defect == "good":
                samples.append(LabeledSample(image, "normal", path=str(img_path)))
                continue
            mask_path = root / "ground_truth" / defect / f"{img_path.stem}_mask.png"
            if not mask_path.exists():
                raise LayoutError(f"missing mask for anomalous image: {mask_path}")
            samples.append(
                LabeledSample(image, "anomalous", _read_mask(mask_path), str(img_path))
            )
    return samples


def ingest(root, layout: str = "mvtec", split: str = "train") -> list[LabeledSample]:
    """Load a dataset split as a list of labeled samples (path-sorted)."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"layout violation: no such directory {root}")
    if layout == "mvtec":
        if split == "train":
            good = root / "train" / "good"
            if not good.is_dir():
                raise LayoutError(f"layout violation: missing {good}")
            return [LabeledSample(_read_image(p), "normal", path=str(p))
                    for p in sorted(good.glob("*.png"))]
        if split == "test":
            if not (root / "test").is_dir():
                return []
            return _mvtec_test_samples(root)
        raise ValueError(f"unknown split {split!r}")
    if layout == "flat":
        samples = []
        for p in sorted(root.glob("*.png")):
            if p.stem.endswith("_mask"):
                continue
            mask_path = p.with_name(f"{p.stem}_mask.png")
            if mask_path.exists():
                samples.append(
                    LabeledSample(_read_image(p), "anomalous", _read_mask(mask_path), str(p))
                )
            else:
                samples.append(LabeledSample(_read_image(p), "normal", path=str(p)))
        return samples
    raise ValueError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------
# Preparation (crop/augment)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrepareRecipe:
    kind: str                    # "texture" | "object"
    resize_to: int = 0           # 0 = kind default (512 texture, 128 object)
    crop: int = 128
    max_rotation: float = 360.0  # degrees, uniform [0, max)
    max_translate: float = 0.1   # fraction of side, uniform [-m, m]

    def __post_init__(self):
        if self.kind not in ("texture", "object"):
            raise ValueError(f"unknown recipe kind {self.kind!r}")

    @property
    def size(self) -> int:
        if self.resize_to:
            return self.resize_to
        return 512 if self.kind == "texture" else 128


def _resize_float(arr: np.ndarray, size: int) -> np.ndarray:
    def one(channel):
        im = Image.fromarray(channel.astype(np.float32), mode="F")
        return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)

    if arr.ndim == 2:
        return one(arr)
    return np.stack([one(arr[:, :, c]) for c in range(arr.shape[2])], axis=2)


def _rotate_translate(arr: np.ndarray, angle: float, dx: float, dy: float) -> np.ndarray:
    def one(channel):
        im = Image.fromarray(channel.astype(np.float32), mode="F")
        im = im.rotate(angle, resample=Image.BILINEAR, translate=(dx, dy))
        return np.asarray(im, dtype=np.float64)

    if arr.ndim == 2:
        return one(arr)
    return np.stack([one(arr[:, :, c]) for c in range(arr.shape[2])], axis=2)


def prepare(sample: LabeledSample, recipe: PrepareRecipe,
            rng: np.random.Generator) -> np.ndarray:
    """One training image per call: resize + crop (texture) or
    resize + rotate/translate (object). Deterministic given the rng state."""
    arr = sample.image
    if recipe.kind == "texture":
        resized = _resize_float(arr, recipe.size)
        if recipe.crop > recipe.size:
            raise ValueError(
                f"crop {recipe.crop} larger than resized image {recipe.size}"
            )
        top = int(rng.integers(0, recipe.size - recipe.crop + 1))
        left = int(rng.integers(0, recipe.size - recipe.crop + 1))
        return resized[top : top + recipe.crop, left : left + recipe.crop]
    resized = _resize_float(arr, recipe.size)
    angle = float(rng.uniform(0.0, recipe.max_rotation))
    shift = recipe.max_translate * recipe.size
    dx = float(rng.uniform(-shift, shift))
    dy = float(rng.uniform(-shift, shift))
    if angle == 0.0 and dx == 0.0 and dy == 0.0:
        return resized
    return _rotate_translate(resized, angle, dx, dy)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def equalized_ranks(values: np.ndarray, population: np.ndarray) -> np.ndarray:
    """Fraction of the pooled population below each value (ties averaged)."""
    pop = np.sort(np.asarray(population, dtype=np.float64).ravel())
    lo = np.searchsorted(pop, values, side="left")
    hi = np.searchsorted(pop, values, side="right")
    return (lo + hi) / (2.0 * pop.size)


def render(map_values: np.ndarray, mode: str, out_path,
           population: np.ndarray | None = None) -> np.ndarray:
    """Write an anomaly map as a PNG; returns the written array.

    equalized_jet: histogram-equalize scores against the pooled population
    (defaults to the map itself), then apply the jet colormap.
    gray16: equalized ranks as 16-bit grayscale.
    """
    from matplotlib import colormaps

    values = np.asarray(map_values, dtype=np.float64)
    pop = values if population is None else population
    frac = equalized_ranks(values, pop)
    if mode == "equalized_jet":
        rgba = colormaps["jet"](frac)
        rgb = (rgba[:, :, :3] * 255).round().astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(out_path)
        return rgb
    if mode == "gray16":
        gray = (frac * 65535).round().astype(np.uint16)
        Image.fromarray(gray.astype(np.int32), mode="I").convert("I;16").save(out_path)
        return gray
    raise ValueError(f"unknown render mode {mode!r}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    image_auroc: float | None
    pixel_auroc_value: float | None
    histograms: dict = field(default_factory=dict)  # name -> {edges, counts}
    sample_counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add_histogram(self, name: str, scores, bins: int = 40,
                      edges: np.ndarray | None = None) -> None:
        scores = np.asarray(scores, dtype=np.float64)
        counts, out_edges = np.histogram(scores, bins=bins if edges is None else edges)
        self.histograms[name] = {
            "edges": [float(e) for e in out_edges],
            "counts": [int(c) for c in counts],
        }
        self.sample_counts[name] = int(scores.size)

    def to_json(self, path) -> None:
        payload = {
            "image_auroc": self.image_auroc,
            "pixel_auroc": self.pixel_auroc_value,
            "histograms": self.histograms,
            "sample_counts": self.sample_counts,
            "config": self.config,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def histograms_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "bin_lo", "bin_hi", "count"])
            for name in sorted(self.histograms):
                h = self.histograms[name]
                for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                    writer.writerow([name, f"{lo:.10g}", f"{hi:.10g}", c])


# ---------------------------------------------------------------------------
# Toy dataset export and synthetic localization sets
# ---------------------------------------------------------------------------


def write_image(arr: np.ndarray, path) -> None:
    """Save a [0,1] float image as 8-bit PNG (grayscale or RGB)."""
    quant = (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(quant).save(path)


def export_toy_dataset(spec: toy.ToySpec, out_dir, n_normal: int, n_anomaly: int,
                       seed: int = 0) -> dict[str, int]:
    """Write a flat-layout toy dataset (8-bit PNGs, unit-interval mapping)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    normal = toy.sample_normal(spec, n_normal, seed=seed)
    for i, img in enumerate(normal):
        write_image(toy.to_unit(img), out_dir / f"normal_{i:05d}.png")
    if n_anomaly:
        anom = toy.sample_anomaly(spec, n_anomaly, seed=seed + 1)
        full_mask = np.full((spec.side, spec.side), 255, dtype=np.uint8)
        for i, img in enumerate(anom):
            write_image(toy.to_unit(img), out_dir / f"anomaly_{i:05d}.png")
            Image.fromarray(full_mask).save(out_dir / f"anomaly_{i:05d}_mask.png")
    return {"normal": n_normal, "anomalous": n_anomaly}


def make_localization_set(spec: toy.ToySpec, n: int, seed: int = 0,
                          patch_frac: float = 0.4,
                          patch_noise: float | None = None):
    """Toy normal images with a defective patch pasted into a random window.

    The defect is the stripe process plus its own pixel noise; `patch_noise`
    overrides the noise level (toy units, std) so the patch can carry
    textural noise well above the anomaly distribution's `sigma_e` — real
    surface defects are rough, not band-limited. Returns (images, masks):
    images (n, side, side) in toy units, boolean masks marking the patch.
    """
    rng = np.random.default_rng(seed)
    base = toy.sample_normal(spec, n, seed=seed)
    side = spec.side
    amp = spec.sigma_a * rng.standard_normal(n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    stripes = amp[:, None, None] * toy.stripe_pattern(spec, phase)[:, :, None]
    noise = spec.sigma_e if patch_noise is None else float(patch_noise)
    if noise > 0:
        stripes = stripes + noise * rng.standard_normal((n, side, side))
    patch = max(4, int(round(patch_frac * side)))
    masks = np.zeros((n, side, side), dtype=bool)
    images = base.copy()
    for i in range(n):
        top = int(rng.integers(0, side - patch + 1))
        left = int(rng.integers(0, side - patch + 1))
        window = (slice(top, top + patch), slice(left, left + patch))
        images[i][window] += stripes[i][window]
        masks[i][window] = True
    return images, masks
