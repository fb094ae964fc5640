"""Loss, optimizer, training loop, and gradient-based image correction.

The objective reconstructs the pixels plus every tapped feature space: each
layer contributes a Gaussian negative-log-likelihood map (channel-summed,
bilinearly upsampled to input resolution), and the layer maps plus the
latent KL divergence sum to the total loss. With zero taps this reduces
exactly to the vanilla VAE objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .extractor import FeatureBatch, FeatureExtractor
from .nn import VaeModel
from .tensor import Tensor, backward

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over all entries."""
    return (mu.square() + logvar.exp() - logvar - 1.0).sum() * 0.5


def layer_recon_nll(y: Tensor, mu: Tensor, log_gamma: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position Gaussian NLL map (channel-summed) and its scalar sum.

    `log_gamma` holds one log standard deviation per channel. The map keeps
    a singleton channel axis so it can feed the bilinear upsampler.
    """
    if y.data.shape != mu.data.shape:
        raise T.ShapeError(
            f"reconstruction target shape {y.data.shape} does not match "
            f"prediction shape {mu.data.shape}"
        )
    n, c, h, w = y.data.shape
    lg = T.broadcast_channels(log_gamma, y.data.shape)
    inv_var = T.broadcast_channels((log_gamma * (-2.0)).exp(), y.data.shape)
    nll = lg + (y - mu).square() * inv_var * 0.5 + 0.5 * LOG_2PI
    nll_map = nll.sum(axis=1).reshape(n, 1, h, w)
    return nll_map, nll_map.sum()


@dataclass
class LossBreakdown:
    """Reconstruction terms per layer (0 = pixels), KL, and their sum."""

    recon_terms: list[Tensor]
    kl: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {f"recon_{i}": t.item() for i, t in enumerate(self.recon_terms)}
        out["kl"] = self.kl.item()
        out["total"] = self.total.item()
        return out

    def term_names(self) -> list[str]:
        return [f"recon_{i}" for i in range(len(self.recon_terms))] + ["kl", "total"]


def reconstruction_maps(x: Tensor, model: VaeModel, features: FeatureBatch,
                        z: Tensor, training: bool = False) -> list[Tensor]:
    """Per-layer NLL maps, each upsampled to input resolution.

    Layer 0 scores the decoded pixels; layer i >= 1 scores the adapter's
    prediction of tap i read off the recorded decoder activation.
    """
    taps = features.taps
    if len(taps) != len(model.adapters):
        raise T.ShapeError(
            f"{len(taps)} feature taps but model carries {len(model.adapters)} adapters"
        )
    _, in_h, in_w = model.spec.input_size
    attach = () if not taps else tuple(model.attach_layers[: len(taps)])
    if attach:
        out, acts = model.decode(z, training, record=attach)
    else:
        out = model.decode(z, training)
        acts = {}
    maps = [layer_recon_nll(x, out, model.log_gamma[0])[0]]
    for i, y in enumerate(taps, start=1):
        pred = model.adapters[i - 1].forward(acts[attach[i - 1]], training)
        th, tw = y.data.shape[2], y.data.shape[3]
        if pred.data.shape[2:] != (th, tw):
            pred = T.resize_bilinear(pred, th, tw)
        nll_map, _ = layer_recon_nll(y, pred, model.log_gamma[i])
        if (th, tw) != (in_h, in_w):
            nll_map = T.bilinear_upsample(nll_map, in_h, in_w)
        maps.append(nll_map)
    return maps


def favae_loss(x: Tensor, model: VaeModel, extractor: FeatureExtractor,
               rng: np.random.Generator, training: bool = True) -> LossBreakdown:
    """One-sample reparameterized estimate of the full objective."""
    features = extractor.extract(x, encoder=model.encoder)
    mu, logvar = model.encode(x, training)
    eps = rng.standard_normal(mu.data.shape)
    z = mu + (logvar * 0.5).exp() * Tensor(eps)
    maps = reconstruction_maps(x, model, features, z, training)
    recon_terms = [m.sum() for m in maps]
    kl = gaussian_kl(mu, logvar)
    total = kl
    for t in recon_terms:
        total = total + t
    return LossBreakdown(recon_terms, kl, total)


class Adam:
    """Adam optimizer over a named parameter dictionary."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 1
    kl_weight: float = field(default=1.0)  # fixed by the objective; exposed read-only

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_weight != 1.0:
            raise ValueError("the objective fixes the KL weight at 1")


def trainable_parameters(model: VaeModel, extractor: FeatureExtractor) -> dict[str, Tensor]:
    params = dict(model.parameters())
    params.update(extractor.parameters())
    return params


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    for name, value in breakdown.values().items():
        if not math.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss term {name!r} ({value}) at step {step}"
            )


def train(model: VaeModel, extractor: FeatureExtractor, data: np.ndarray,
          config: TrainConfig, callback=None) -> list[dict[str, float]]:
    """Train on an array of normal images (M, C, H, W) in [0, 1].

    Returns the loss history: one record per logged step with the term
    values plus "step". Deterministic given the config seed.
    """
    rng = np.random.default_rng(config.seed)
    params = trainable_parameters(model, extractor)
    opt = Adam(params, lr=config.lr)
    history = []
    step = 0
    m = data.shape[0]
    for _epoch in range(config.epochs):
        order = rng.permutation(m)
        for lo in range(0, m - config.batch_size + 1, config.batch_size):
            batch = data[order[lo : lo + config.batch_size]]
            opt.zero_grad()
            breakdown = favae_loss(Tensor(batch), model, extractor, rng, training=True)
            _check_finite(breakdown, step)
            backward(breakdown.total)
            opt.step()
            if step % config.log_every == 0:
                rec = {"step": float(step)}
                rec.update(breakdown.values())
                history.append(rec)
            if callback is not None:
                callback(step, breakdown)
            step += 1
    return history


def history_to_csv(history: list[dict[str, float]], path) -> None:
    if not history:
        raise ValueError("empty loss history")
    names = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for rec in history:
            writer.writerow([f"{rec[n]:.10g}" for n in names])


def correct(x: np.ndarray, model: VaeModel, extractor: FeatureExtractor,
            lam: float = 1.0, steps: int = 50, step_size: float = 1e-3,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[float]]:
    """Descend on recon_loss(x_t) + lam * |x_t - x|_1 starting from x_t = x.

    Scores with the posterior-mean latent (no sampling), so the objective is
    deterministic. Returns the corrected image batch and the objective trace.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x0 = np.asarray(x, dtype=np.float64)
    xt = x0.copy()
    trace = []
    if steps == 0:
        return xt, trace
    anchor = Tensor(x0)
    for it in range(steps):
        xv = Tensor(xt, requires_grad=True)
        features = extractor.extract(xv, encoder=model.encoder)
        mu, _ = model.encode(xv, training=False)
        maps = reconstruction_maps(xv, model, features, mu, training=False)
        recon = maps[0].sum()
        for m in maps[1:]:
            recon = recon + m.sum()
        objective = recon + (xv - anchor).abs().sum() * lam
        value = objective.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite correction objective at step {it}")
        trace.append(value)
        backward(objective)
        xt = xt - step_size * xv.grad
    return xt, trace
