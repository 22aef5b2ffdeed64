"""Test-time dropout: posterior sampling, per-pixel variance, and its link to errors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_images
from .checkpoint import as_network
from .imaging import label_overlay, normalize
from .rng import RngStream

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 100
DEFAULT_RATE = 0.2
CHUNK = 10


@dataclass
class PosteriorSamples:
    samples: np.ndarray  # (T, C, H, W) float64 probabilities
    dropout_rate: float
    seed: int

    @property
    def T(self) -> int:
        return int(self.samples.shape[0])


@dataclass
class PosteriorStats:
    mean: np.ndarray
    variance: np.ndarray
    uncertainty_map: np.ndarray
    prediction: np.ndarray


@dataclass
class UncertaintyAssociation:
    index: list[int] = field(default_factory=list)
    misclassified: list[float] = field(default_factory=list)
    correct: list[float] = field(default_factory=list)
    ratio: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def median_ratio(self) -> float:
        return float(np.median(self.ratio)) if self.ratio else float("nan")

    def extend(self, other: "UncertaintyAssociation", offset: int) -> None:
        self.index += [i + offset for i in other.index]
        self.misclassified += other.misclassified
        self.correct += other.correct
        self.ratio += other.ratio
        self.skipped += [i + offset for i in other.skipped]

    def to_tsv(self) -> str:
        rows = ["image\tmean_u_misclassified\tmean_u_correct\tratio"]
        for i, m, c, r in zip(self.index, self.misclassified, self.correct, self.ratio):
            rows.append(f"{i}\t{m:.8g}\t{c:.8g}\t{r:.6f}")
        return "\n".join(rows) + "\n"


def sample_posterior(network, image, T=DEFAULT_SAMPLES, rate=DEFAULT_RATE, seed=0) -> PosteriorSamples:
    """``T`` stochastic forward passes with every dropout node at ``rate``.

    Passes run in chunks of ``CHUNK`` copies of the image; chunk ``j`` draws its
    masks from ``RngStream(seed).advance(j)`` so results depend only on the seed.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if T < 1:
        raise ValueError(f"need at least one sample, got T={T}")
    net = as_network(network).clone()
    if not net.graph.dropout_ids():
        raise ValueError("network has no dropout nodes")
    net.graph.set_dropout_rate(rate)
    x = check_images(image, dtype=net.graph.dtype)[:1]
    out = []
    for j, start in enumerate(range(0, T, CHUNK)):
        n = min(CHUNK, T - start)
        batch = np.repeat(x, n, axis=0)
        out.append(net.predict_proba(batch, mode="mc_dropout", rng=RngStream(seed).advance(j)))
    return PosteriorSamples(np.concatenate(out).astype(np.float64), float(rate), int(seed))


def posterior_stats(samples) -> PosteriorStats:
    phi = samples.samples if isinstance(samples, PosteriorSamples) else np.asarray(samples, dtype=np.float64)
    if phi.shape[0] == 0:
        raise ValueError("empty sample set")
    mean = phi.mean(axis=0)
    var = ((phi - mean) ** 2).mean(axis=0)
    return PosteriorStats(mean, var, var.mean(axis=0), np.argmax(mean, axis=0))


def associate(stats: PosteriorStats | list, gt) -> UncertaintyAssociation:
    """Mean uncertainty over misclassified vs correct pixels, per image.

    Images with no misclassified pixel are recorded in ``skipped``.
    """
    items = stats if isinstance(stats, (list, tuple)) else [stats]
    gts = np.asarray(gt)
    if gts.ndim == 2:
        gts = gts[None]
    if len(items) != len(gts):
        raise ValueError(f"{len(items)} stats but {len(gts)} label maps")
    out = UncertaintyAssociation()
    for i, (s, g) in enumerate(zip(items, gts)):
        if s.prediction.shape != g.shape:
            raise ValueError(f"prediction {s.prediction.shape} vs labels {g.shape}")
        wrong = s.prediction != g
        if not wrong.any():
            log.info("image %d has no misclassified pixels; skipped", i)
            out.skipped.append(i)
            continue
        u = s.uncertainty_map
        mis = float(u[wrong].mean())
        cor = float(u[~wrong].mean()) if (~wrong).any() else 0.0
        if cor > 0:
            ratio = mis / cor
        else:
            ratio = 1.0 if mis == 0 else float("inf")
        out.index.append(i)
        out.misclassified.append(mis)
        out.correct.append(cor)
        out.ratio.append(ratio)
    return out


def render_uncertainty(stats: PosteriorStats, image, gt) -> np.ndarray:
    """Three panels side by side: ground truth, prediction, uncertainty.

    The first two tint the classes over channel 0; the third puts the
    per-image normalized uncertainty in the red channel on black.
    Returns ``(3, H, 3W)`` in [0, 1].
    """
    gray = check_images(image, dtype=np.float64)[0, 0]
    u = normalize(stats.uncertainty_map)
    zero = np.zeros_like(u)
    panels = [label_overlay(gray, gt), label_overlay(gray, stats.prediction), np.stack([u, zero, zero])]
    return np.concatenate(panels, axis=2)


class TTDUncertainty(BaseEstimator):
    """``transform(X)`` -> uncertainty maps ``(N, H, W)``; ``score(X, y)`` -> median ratio."""

    def __init__(self, network=None, n_samples=DEFAULT_SAMPLES, rate=DEFAULT_RATE, seed=0):
        self.network = network
        self.n_samples = n_samples
        self.rate = rate
        self.seed = seed

    def fit(self, X=None, y=None):
        self.network_ = as_network(self.network)
        return self

    def stats(self, X) -> list[PosteriorStats]:
        if not hasattr(self, "network_"):
            self.fit()
        X = check_images(X)
        return [posterior_stats(sample_posterior(self.network_, x, self.n_samples, self.rate,
                                                 self.seed + i)) for i, x in enumerate(X)]

    def transform(self, X):
        return np.stack([s.uncertainty_map for s in self.stats(X)])

    def predict(self, X):
        return np.stack([s.prediction for s in self.stats(X)])

    def score(self, X, y):
        return associate(self.stats(X), y).median_ratio()
