"""Filter-level concept dissection.

For every (layer, filter) the activation values are pooled over all pixels
of all images, a dataset-level threshold keeps the top 1%, and the
upsampled, thresholded, cleaned maps are scored against ground-truth
concept masks by IoU.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary, check_images, check_same_shape
from .checkpoint import as_network
from .imaging import resize_bilinear

CONCEPTS = ("brain", "wt", "tc", "et", "ed")
DEFAULT_DETECTOR_IOU = 0.04
TOP_FRACTION = 0.01
MIN_STABLE_SAMPLE = 10_000


@dataclass
class ActivationDistribution:
    layer: str
    filter: int
    values: np.ndarray  # sorted ascending

    @property
    def sample_size(self) -> int:
        return int(self.values.size)

    def quantile_stable(self) -> bool:
        return self.sample_size >= MIN_STABLE_SAMPLE


@dataclass
class ConceptMask:
    layer: str
    filter: int
    mask: np.ndarray
    threshold: float
    post_processed: bool = False


@dataclass
class DetectorEntry:
    layer: str
    filter: int
    concept: str
    mean_iou: float
    is_detector: bool
    iou_by_concept: dict[str, float] = field(default_factory=dict)
    threshold: float = float("nan")


@dataclass
class DetectorReport:
    entries: list[DetectorEntry]
    detector_iou: float

    def detectors(self, concept: str | None = None) -> list[DetectorEntry]:
        return [e for e in self.entries if e.is_detector and (concept is None or e.concept == concept)]

    def best_for(self, concept: str) -> DetectorEntry | None:
        ranked = sorted(self.entries, key=lambda e: -e.iou_by_concept.get(concept, 0.0))
        return ranked[0] if ranked else None

    def to_tsv(self) -> str:
        lines = ["layer\tfilter\tconcept\tmeanIoU\tis_detector\t" + "\t".join(f"iou_{c}" for c in CONCEPTS)]
        for e in self.entries:
            per = "\t".join(f"{e.iou_by_concept.get(c, 0.0):.6f}" for c in CONCEPTS)
            lines.append(f"{e.layer}\t{e.filter}\t{e.concept}\t{e.mean_iou:.6f}\t{int(e.is_detector)}\t{per}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"detector_iou": self.detector_iou,
                           "entries": [asdict(e) for e in self.entries]}, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# activations and thresholds


def layer_activations(network, images, layers, batch_size=16) -> dict[str, np.ndarray]:
    """Eval-mode activations ``(N, C, h, w)`` for each named layer."""
    net = as_network(network)
    images = check_images(images)
    ids = {name: net.layer_id(name) for name in layers}
    out = {name: [] for name in layers}
    for i in range(0, len(images), batch_size):
        net.graph.forward({net.input_id: images[i:i + batch_size]}, mode="eval")
        for name, nid in ids.items():
            out[name].append(net.graph.value(nid).copy())
    return {name: np.concatenate(v) for name, v in out.items()}


def distribution_from_activations(acts: np.ndarray, layer: str, filter: int) -> ActivationDistribution:
    if not 0 <= filter < acts.shape[1]:
        raise IndexError(f"filter {filter} out of range for layer {layer!r} with {acts.shape[1]} filters")
    return ActivationDistribution(layer, filter, np.sort(acts[:, filter].ravel()))


def collect_distribution(network, images, layer: str, filter: int) -> ActivationDistribution:
    acts = layer_activations(network, images, [layer])[layer]
    return distribution_from_activations(acts, layer, filter)


def threshold(dist: ActivationDistribution, top_fraction: float = TOP_FRACTION) -> float:
    """Smallest sample value with at most ``top_fraction`` of samples strictly above it."""
    n = dist.sample_size
    if n == 0:
        raise ValueError(f"empty activation distribution for {dist.layer}:{dist.filter}")
    allowed = math.floor(round(n * top_fraction, 9))
    return float(dist.values[n - 1 - allowed])


# ---------------------------------------------------------------------------
# masks


def threshold_maps(acts, T, size) -> np.ndarray:
    """Bilinearly upsample activation map(s) to ``size`` and apply ``>= T``."""
    return resize_bilinear(acts, size) >= T


def concept_mask(network, image, layer: str, filter: int, T: float) -> ConceptMask:
    img = check_images(image)
    acts = layer_activations(network, img, [layer])[layer]
    if not 0 <= filter < acts.shape[1]:
        raise IndexError(f"filter {filter} out of range for layer {layer!r}")
    mask = threshold_maps(acts[:, filter], T, img.shape[2:])
    return ConceptMask(layer, filter, mask[0] if np.ndim(image) == 3 else mask, float(T))


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; ties go to the component met first in raster order."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _clean_once(mask, brain):
    m = ndimage.median_filter(mask.astype(np.uint8), size=3, mode="constant", cval=0).astype(bool)
    return largest_component(m & brain)


def postprocess(mask, brain_mask, max_iter: int = 64) -> np.ndarray:
    """Despeckle (3x3 median), restrict to the brain, keep the largest component.

    The three steps are repeated until the mask stops changing, so the
    result is a fixed point and cleaning it again is a no-op.
    """
    if isinstance(mask, ConceptMask):
        return ConceptMask(mask.layer, mask.filter, postprocess(mask.mask, brain_mask, max_iter),
                           mask.threshold, True)
    m, brain = check_same_shape(check_binary(mask), check_binary(brain_mask))
    if m.ndim == 3:
        return np.stack([postprocess(a, b, max_iter) for a, b in zip(m, brain)])
    seen = [m]
    for _ in range(max_iter):
        nxt = _clean_once(m, brain)
        if np.array_equal(nxt, m):
            return nxt
        for prev in seen[1:]:
            if np.array_equal(prev, nxt):
                # period > 1: settle on the common core, which is stable
                return _settle(nxt, brain)
        seen.append(nxt)
        m = nxt
    return _settle(m, brain)


def _settle(m, brain):
    while True:
        nxt = _clean_once(m, brain) & m
        if np.array_equal(nxt, m):
            return m
        m = nxt


def iou(mask, gt) -> float:
    """|M & G| / |M | G|; 0 when the union is empty."""
    m, g = check_same_shape(check_binary(mask), check_binary(gt))
    union = int(np.logical_or(m, g).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(m, g).sum()) / union


# ---------------------------------------------------------------------------
# detector assignment


def _concept_ious(cleaned, concept_masks):
    out = {}
    for concept, gts in concept_masks.items():
        vals = [iou(m, g) for m, g in zip(cleaned, gts) if g.any()]
        out[concept] = float(np.mean(vals)) if vals else 0.0
    return out


def _score_filter(acts, layer, k, concept_masks, brain, c, top_fraction):
    T = threshold(distribution_from_activations(acts, layer, k), top_fraction)
    cleaned = postprocess(threshold_maps(acts[:, k], T, brain.shape[1:]), brain)
    per = _concept_ious(cleaned, concept_masks)
    best = max(per, key=lambda name: (per[name], -CONCEPTS.index(name)))
    return DetectorEntry(layer, int(k), best, per[best], per[best] >= c, per, T)


def dissect_layer(acts, layer, concept_masks, brain, c=DEFAULT_DETECTOR_IOU,
                  top_fraction=TOP_FRACTION, filters=None, workers=1) -> list[DetectorEntry]:
    filters = list(range(acts.shape[1]) if filters is None else filters)

    def job(k):
        return _score_filter(acts, layer, k, concept_masks, brain, c, top_fraction)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, filters))
    return [job(k) for k in filters]


def assign_detectors(network, images, concept_masks: dict, brain, layers=None,
                     c: float = DEFAULT_DETECTOR_IOU, top_fraction: float = TOP_FRACTION,
                     workers: int = 1) -> DetectorReport:
    """Rank every filter of ``layers`` by its best mean concept IoU.

    ``concept_masks`` maps concept name to ``(N, H, W)`` ground truth; the
    mean for a concept runs over images where that concept is present.
    """
    if not 0 < c <= 1:
        raise ValueError(f"detector IoU threshold must lie in (0, 1], got {c}")
    net = as_network(network)
    layers = list(net.layer_names if layers is None else layers)
    for name in layers:
        net.layer_id(name)
    brain = check_binary(brain)
    masks = {k: check_binary(v) for k, v in concept_masks.items()}
    acts = layer_activations(net, images, layers)
    entries = []
    for name in layers:
        entries.extend(dissect_layer(acts[name], name, masks, brain, c, top_fraction, workers=workers))
    order = {name: i for i, name in enumerate(layers)}
    entries.sort(key=lambda e: (-e.mean_iou, order[e.layer], e.filter))
    return DetectorReport(entries, c)


def concept_targets(samples) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack ground-truth concept masks and brain masks from phantom samples."""
    samples = list(samples)
    concepts = {c: np.stack([s.masks[c] for s in samples]) for c in CONCEPTS}
    return concepts, concepts["brain"]


class NetworkDissection(BaseEstimator):
    """Estimator form: ``fit(images, concept_masks, brain)`` builds ``report_``.

    ``transform`` returns cleaned concept masks ``(N, n_detectors, H, W)``
    for the fitted detectors, using the thresholds learned in ``fit``.
    """

    def __init__(self, network=None, layers=None, detector_iou=DEFAULT_DETECTOR_IOU,
                 top_fraction=TOP_FRACTION):
        self.network = network
        self.layers = layers
        self.detector_iou = detector_iou
        self.top_fraction = top_fraction

    def fit(self, X, y, brain=None):
        if brain is None:
            brain = y["brain"]
        self.report_ = assign_detectors(self.network, X, y, brain, self.layers,
                                        self.detector_iou, self.top_fraction)
        self.thresholds_ = {(e.layer, e.filter): e.threshold for e in self.report_.entries}
        return self

    def transform(self, X, brain):
        check_is_fitted(self, "report_")
        X = check_images(X)
        dets = self.report_.detectors()
        layers = sorted({e.layer for e in dets})
        acts = layer_activations(self.network, X, layers) if layers else {}
        brain = check_binary(brain)
        out = np.zeros((len(X), len(dets)) + X.shape[2:], dtype=bool)
        for j, e in enumerate(dets):
            raw = threshold_maps(acts[e.layer][:, e.filter], e.threshold, X.shape[2:])
            out[:, j] = postprocess(raw, brain)
        return out
