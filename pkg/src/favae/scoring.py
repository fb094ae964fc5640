"""Anomaly scores: fused feature-space maps, image scores, the classic
pixel classifier, typicality, and ELBO scoring.

All scoring uses the posterior-mean latent (no sampling) unless a score is
explicitly defined through a sampled bound. Every score is exposed raw plus
sign-fixed ("anomaly score", higher = more anomalous) so downstream AUROC
computations are unambiguous.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .extractor import FeatureExtractor
from .nn import VaeModel
from .tensor import Tensor
from .toy import AnalyticVae, _fsum, analytic_elbo, analytic_loglik
from .training import LOG_2PI, reconstruction_maps

SCORE_KINDS = ("favae", "loglik", "elbo", "typicality", "classic-pixel-max")

# +1: raw score already means "higher = more anomalous"; -1: higher = more normal
_ORIENTATION = {
    "favae": +1.0,
    "loglik": -1.0,
    "elbo": -1.0,
    "typicality": -1.0,
    "classic-pixel-max": +1.0,
}


@dataclass
class AnomalyMap:
    """Per-pixel anomaly field at input resolution; higher = more anomalous."""

    values: np.ndarray
    higher_is_anomalous: bool = True

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("anomaly map contains non-finite values")


@dataclass
class ScoreRecord:
    image_id: str
    score: float
    kind: str

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if not math.isfinite(self.score):
            raise FloatingPointError(f"non-finite score for image {self.image_id!r}")

    @property
    def anomaly_score(self) -> float:
        return _ORIENTATION[self.kind] * self.score


def favae_map(x: np.ndarray, model: VaeModel, extractor: FeatureExtractor) -> list[AnomalyMap]:
    """Layer-summed NLL maps at input resolution, one per image.

    Encodes with the posterior mean (no sampling); each layer's channel-summed
    NLL map is upsampled to the input resolution and the layers are summed.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64))
    features = extractor.extract(xt, encoder=model.encoder)
    mu, _ = model.encode(xt, training=False)
    maps = reconstruction_maps(xt, model, features, mu, training=False)
    total = maps[0].data
    for m in maps[1:]:
        total = total + m.data
    return [AnomalyMap(total[i, 0]) for i in range(total.shape[0])]


def image_score(amap: AnomalyMap) -> float:
    """Whole-image anomaly score: the plain sum of the map."""
    return float(amap.values.sum())


def _recon_and_gamma(x: np.ndarray, model) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean reconstruction and a gamma array broadcastable over x."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, AnalyticVae):
        return model.reconstruct_mean(x), np.asarray(model.gamma)
    recon = model.reconstruct(Tensor(x)).data
    gamma = model.gamma(0)
    return recon, gamma.reshape(1, -1, 1, 1)


def classic_pixel_classifier(x: np.ndarray, model, threshold: float,
                             route: str = "density") -> np.ndarray:
    """Boolean per-pixel anomaly flags: decoded Gaussian density below threshold.

    `route` selects between the literal density comparison and the
    algebraically equivalent squared-residual comparison; both must agree
    exactly.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0 (it bounds a density)")
    if route not in ("density", "residual"):
        raise ValueError(f"unknown route {route!r}")
    recon, gamma = _recon_and_gamma(x, model)
    x = np.asarray(x, dtype=np.float64)
    resid2 = (x - recon) ** 2
    var = np.broadcast_to(gamma ** 2, x.shape)
    if route == "density":
        density = np.exp(-resid2 / (2 * var)) / np.sqrt(2 * np.pi * var)
        return density < threshold
    # density < T  <=>  resid^2 > -2 var (ln T + 0.5 ln(2 pi var))
    bound = -2 * var * (math.log(threshold) + 0.5 * np.log(2 * np.pi * var))
    return resid2 > bound


def typicality_score(x: np.ndarray, model) -> float:
    """Negative distance between the mean per-pixel NLL and the model entropy.

    Always <= 0; 0 means maximally typical. Exactly permutation-invariant
    under the analytic model (compensated sums of shuffle-invariant
    statistics).
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, AnalyticVae):
        m, _ = model.posterior(x)
        g2 = model.gamma ** 2
        d = x.size
        mean_logp = -0.5 * math.log(2 * math.pi * g2) - _fsum((x - m) ** 2) / (2 * g2 * d)
        entropy = 0.5 * math.log(2 * math.pi * math.e * g2)
        return -abs(mean_logp + entropy)
    recon, gamma = _recon_and_gamma(x[None] if x.ndim == 3 else x, model)
    xb = x[None] if x.ndim == 3 else x
    var = np.broadcast_to(gamma ** 2, xb.shape)
    logp = -0.5 * np.log(2 * np.pi * var) - (xb - recon) ** 2 / (2 * var)
    entropy = 0.5 * np.log(2 * np.pi * math.e * var)
    return -abs(float(logp.mean()) + float(entropy.mean()))


def elbo_score(x: np.ndarray, model, seed: int = 0) -> float:
    """Evidence lower bound as a score; lower = more anomalous.

    Analytic model: exact closed form (tight, equals the log-likelihood).
    Trained model: one reparameterized sample, seeded for determinism.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, AnalyticVae):
        return analytic_elbo(x, model.spec)
    xb = x[None] if x.ndim == 3 else x
    mu, logvar = model.encode(Tensor(xb), training=False)
    mu, logvar = mu.data, logvar.data
    eps = np.random.default_rng(seed).standard_normal(mu.shape)
    z = mu + np.exp(0.5 * logvar) * eps
    out = model.decode(Tensor(z), training=False).data
    gamma = model.gamma(0).reshape(1, -1, 1, 1)
    logp = (-0.5 * np.log(2 * np.pi * gamma ** 2)
            - (xb - out) ** 2 / (2 * gamma ** 2)).sum()
    kl = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1 - logvar)
    return float(logp - kl)


def loglik_score(x: np.ndarray, model: AnalyticVae) -> float:
    """Exact marginal log-likelihood (analytic model only)."""
    if not isinstance(model, AnalyticVae):
        raise TypeError("exact log-likelihood requires the analytic model")
    return analytic_loglik(x, model.spec)


def score_batch(images: np.ndarray, kind: str, model, extractor=None,
                ids=None, seed: int = 0) -> list[ScoreRecord]:
    """Score every image with the named method and return one record each."""
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}")
    n = images.shape[0]
    ids = [f"img{i:05d}" for i in range(n)] if ids is None else list(ids)
    records = []
    if kind == "favae":
        maps = favae_map(images, model, extractor)
        scores = [image_score(m) for m in maps]
    elif kind == "classic-pixel-max":
        recon, gamma = _recon_and_gamma(images, model)
        var = np.broadcast_to(gamma ** 2, images.shape)
        nll = 0.5 * np.log(2 * np.pi * var) + (images - recon) ** 2 / (2 * var)
        scores = [float(nll[i].max()) for i in range(n)]
    else:
        fn = {"loglik": loglik_score, "typicality": typicality_score,
              "elbo": lambda v, m: elbo_score(v, m, seed=seed)}[kind]
        scores = [fn(images[i], model) for i in range(n)]
    for img_id, s in zip(ids, scores):
        records.append(ScoreRecord(img_id, s, kind))
    return records


def records_to_csv(records: list[ScoreRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "kind", "score", "anomaly_score"])
        for r in records:
            writer.writerow([r.image_id, r.kind, f"{r.score:.10g}",
                             f"{r.anomaly_score:.10g}"])
