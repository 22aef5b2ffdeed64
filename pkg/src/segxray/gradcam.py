"""Layer-wise Grad-CAM for segmentation outputs.

The class score is the spatial mean of a class probability map (or of a
composite such as ``"wt"`` = edema + core + enhancing). One backward pass
from that score yields the adjoints of every hidden layer at once; each
filter's importance is the spatial mean of its adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_binary, check_images
from .checkpoint import as_network
from .dissection import iou
from .imaging import resize_bilinear
from .phantom import COMPOSITES
from .zoo import softmax

ATTENTION_TOP = 0.2


@dataclass
class ClassScore:
    channel: int | str
    value: float
    P: int


@dataclass
class GradCamMap:
    layer: str
    channel: int | str
    beta: np.ndarray
    activation: np.ndarray
    map: np.ndarray
    upsampled: np.ndarray

    @property
    def N(self) -> int:
        return int(self.activation.shape[-2] * self.activation.shape[-1])


def _members(channel, n_out):
    if isinstance(channel, str):
        key = channel.lower()
        if key not in COMPOSITES:
            raise ValueError(f"unknown composite {channel!r}; choose from {sorted(COMPOSITES)}")
        members = COMPOSITES[key]
    else:
        members = (int(channel),)
    if any(not 0 <= m < n_out for m in members):
        raise ValueError(f"channel {channel!r} out of range for {n_out} output channels")
    return list(members)


def score_and_seed(logits, channel, pre_softmax=False):
    """``y(c)`` for one image and its gradient w.r.t. the logits."""
    n_out = logits.shape[1]
    members = _members(channel, n_out)
    P = logits.shape[2] * logits.shape[3]
    sel = np.zeros(n_out, dtype=np.float64)
    sel[members] = 1.0
    sel = sel[None, :, None, None]
    if pre_softmax:
        y = float(logits[:, members].sum(axis=1).mean())
        return y, np.broadcast_to(sel / P, logits.shape).astype(np.float64)
    p = softmax(logits.astype(np.float64))
    ps = p[:, members].sum(axis=1, keepdims=True)
    y = float(ps.mean())
    return y, p * (sel - ps) / P


def class_score_from_output(output_map, channel) -> ClassScore:
    """Spatial average of an already computed ``(C, H, W)`` output map."""
    out = np.asarray(output_map, dtype=np.float64)
    members = _members(channel, out.shape[0])
    return ClassScore(channel, float(out[members].sum(axis=0).mean()), int(out.shape[1] * out.shape[2]))


def class_score(network, image, channel, pre_softmax=False) -> ClassScore:
    net = as_network(network)
    logits = net.forward(check_images(image)[:1])
    out = logits[0] if pre_softmax else softmax(logits.astype(np.float64))[0]
    return class_score_from_output(out, channel)


def _backprop(net, image, channel, pre_softmax):
    x = check_images(image, dtype=net.graph.dtype)[:1]
    net.graph.forward({net.input_id: x}, mode="eval")
    y, seed = score_and_seed(net.graph.value(net.output_id), channel, pre_softmax)
    adj = net.graph.backward(net.output_id, seed)
    return x, y, adj


def _beta(adjoint):
    return adjoint[0].astype(np.float64).mean(axis=(1, 2))


def weighted_map(beta, activation) -> np.ndarray:
    """relu(sum_k beta_k A_k)."""
    return np.maximum(np.tensordot(beta, activation.astype(np.float64), axes=1), 0.0)


def _make_map(net, layer, channel, adj, size):
    nid = net.layer_id(layer)
    A = net.graph.value(nid)[0]
    beta = _beta(adj[nid])
    m = weighted_map(beta, A)
    return GradCamMap(layer, channel, beta, A.copy(), m, resize_bilinear(m, size))


def importances(network, image, layer, channel, pre_softmax=False) -> np.ndarray:
    net = as_network(network)
    nid = net.layer_id(layer)
    _, _, adj = _backprop(net, image, channel, pre_softmax)
    return _beta(adj[nid])


def gradcam_map(network, image, layer, channel, pre_softmax=False) -> GradCamMap:
    net = as_network(network)
    net.layer_id(layer)
    x, _, adj = _backprop(net, image, channel, pre_softmax)
    return _make_map(net, layer, channel, adj, x.shape[2:])


def attention_mask(upsampled, top=ATTENTION_TOP) -> np.ndarray:
    """Pixels within the top ``top`` of the max-normalized attention range."""
    peak = float(upsampled.max())
    if peak <= 0:
        return np.zeros(upsampled.shape, dtype=bool)
    return upsampled / peak >= 1.0 - top


def layerwise_attention(network, image, channel, gt=None, pre_softmax=False):
    """Grad-CAM at every hidden layer from a single forward/backward pass.

    Returns ``(maps, ious)``; ``ious`` holds the attention-mask IoU against
    ``gt`` per layer (``None`` when no ground truth is given).
    """
    net = as_network(network)
    x, _, adj = _backprop(net, image, channel, pre_softmax)
    maps = [_make_map(net, name, channel, adj, x.shape[2:]) for name in net.layer_names]
    ious = None
    if gt is not None:
        gt = check_binary(gt)
        ious = [iou(attention_mask(m.upsampled), gt) for m in maps]
    return maps, ious


def attention_curve(network, images, gts, channel="wt", pre_softmax=False) -> np.ndarray:
    """Mean attention IoU per layer over images whose ground truth is nonempty."""
    net = as_network(network)
    images = check_images(images)
    gts = check_binary(gts)
    rows = []
    for img, gt in zip(images, gts):
        if gt.any():
            rows.append(layerwise_attention(net, img, channel, gt, pre_softmax)[1])
    if not rows:
        return np.zeros(len(net.layer_names))
    return np.mean(np.asarray(rows), axis=0)


def first_reaching(curve, level=0.3) -> float:
    """Relative depth ``(index + 1) / n_layers`` of the first layer at ``level``; inf if none."""
    hits = np.nonzero(np.asarray(curve) >= level)[0]
    return float((hits[0] + 1) / len(curve)) if hits.size else float("inf")


class GradCAM(BaseEstimator, TransformerMixin):
    """``transform(X)`` -> upsampled maps ``(N, n_layers, H, W)`` for ``channel``."""

    def __init__(self, network=None, channel="wt", layers=None, pre_softmax=False):
        self.network = network
        self.channel = channel
        self.layers = layers
        self.pre_softmax = pre_softmax

    def fit(self, X=None, y=None):
        self.network_ = as_network(self.network)
        self.layers_ = list(self.layers or self.network_.layer_names)
        for name in self.layers_:
            self.network_.layer_id(name)
        return self

    def transform(self, X):
        if not hasattr(self, "network_"):
            self.fit()
        X = check_images(X)
        out = np.zeros((len(X), len(self.layers_)) + X.shape[2:])
        for i, img in enumerate(X):
            _, _, adj = _backprop(self.network_, img, self.channel, self.pre_softmax)
            for j, name in enumerate(self.layers_):
                out[i, j] = _make_map(self.network_, name, self.channel, adj, X.shape[2:]).upsampled
        return out
