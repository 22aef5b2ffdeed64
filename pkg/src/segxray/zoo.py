"""Tiny encoder-decoder segmentation networks and their training loop.

Three families share one builder:

* ``plain``: encoder, bottleneck, decoder, no cross connections;
* ``skip``: encoder stage ``i`` is concatenated into the decoder stage at
  the same resolution;
* ``residual``: ``skip`` plus an identity shortcut around the second conv
  of every block.

Every hidden conv is followed by relu and a dropout node (rate 0 unless
retrained for test-time dropout). Hidden conv outputs are addressed as
``enc{i}.conv{j}``, ``mid.conv{j}``, ``dec{i}.conv{j}`` where ``i`` is the
resolution level (0 = input resolution).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_label_maps, check_same_shape, check_binary
from .autodiff import Graph
from .phantom import COMPOSITES
from .rng import RngStream

logger = logging.getLogger(__name__)

FAMILIES = ("plain", "skip", "residual")


class InvalidSpecError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str = "skip"
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 4
    out_channels: int = 4
    dropout_rate: float = 0.0

    def validate(self) -> "ArchSpec":
        if self.family not in FAMILIES:
            raise InvalidSpecError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise InvalidSpecError("depth and base_channels must be >= 1")
        if self.in_channels < 1 or self.out_channels < 2:
            raise InvalidSpecError("need in_channels >= 1 and out_channels >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpecError("dropout_rate must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class Network:
    """A graph plus its input/output and addressable hidden layers."""

    def __init__(self, graph: Graph, input_id: int, output_id: int,
                 layers: dict[str, int], arch: ArchSpec | None = None):
        self.graph = graph
        self.input_id = input_id
        self.output_id = output_id
        self.layers = dict(layers)
        self.arch = arch

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def layer_id(self, layer: str) -> int:
        if layer not in self.layers:
            raise KeyError(f"unknown layer {layer!r}; known: {', '.join(self.layers)}")
        return self.layers[layer]

    def parameters(self) -> dict[str, np.ndarray]:
        return self.graph.parameters()

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    def load_parameters(self, params) -> None:
        names = [self.graph.nodes[i].name for i in self.graph.parameter_ids()]
        if list(params) != names:
            raise ValueError("parameter names do not match the architecture")
        for name, value in params.items():
            self.graph.set_parameter(name, value)

    def clone(self) -> "Network":
        return Network(self.graph.clone(), self.input_id, self.output_id, self.layers, self.arch)

    def astype(self, dtype) -> "Network":
        return Network(self.graph.astype(dtype), self.input_id, self.output_id, self.layers, self.arch)

    def forward(self, x, mode="eval", rng=None) -> np.ndarray:
        """Logits for ``(N, C, H, W)`` (or a single ``(C, H, W)``) input."""
        x = check_images(x, dtype=self.graph.dtype)
        self.graph.forward({self.input_id: x}, mode=mode, rng=rng)
        return self.graph.value(self.output_id)

    def predict_proba(self, x, mode="eval", rng=None) -> np.ndarray:
        return softmax(self.forward(x, mode=mode, rng=rng))


# ---------------------------------------------------------------------------
# construction


def _he(gen, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (gen.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(spec: ArchSpec, init_seed: int = 0, dtype=np.float32) -> Network:
    spec = spec.validate()
    g = Graph(dtype)
    rng = RngStream(init_seed)
    n_params = [0]
    layers: dict[str, int] = {}

    def conv(x, cin, cout, name, k=3):
        w = g.parameter(f"{name}.w", _he(rng.generator(n_params[0]), (cout, cin, k, k), dtype))
        b = g.parameter(f"{name}.b", np.zeros(cout, dtype))
        n_params[0] += 1
        return g.conv2d(x, w, b, stride=1, pad=k // 2, name=f"{name}.conv")

    def hidden(x, cin, cout, name, shortcut=None):
        h = conv(x, cin, cout, name)
        if shortcut is not None:
            h = g.add(h, shortcut, name=f"{name}.add")
        a = g.relu(h, name=name)
        layers[name] = a
        return g.dropout(a, spec.dropout_rate, name=f"{name}.drop")

    def block(x, cin, cout, prefix):
        h = hidden(x, cin, cout, f"{prefix}.conv0")
        short = h if spec.family == "residual" else None
        return hidden(h, cout, cout, f"{prefix}.conv1", shortcut=short)

    x = g.input("x")
    h, cin = x, spec.in_channels
    skips = []
    for i in range(spec.depth):
        cout = spec.base_channels * 2 ** i
        h = block(h, cin, cout, f"enc{i}")
        skips.append((h, cout))
        h = g.max_pool2d(h, kernel=2, name=f"enc{i}.pool")
        cin = cout
    cout = spec.base_channels * 2 ** spec.depth
    h = block(h, cin, cout, "mid")
    cin = cout
    for i in reversed(range(spec.depth)):
        h = g.upsample_nearest2x(h, name=f"dec{i}.up")
        cout = spec.base_channels * 2 ** i
        if spec.family != "plain":
            s, sc = skips[i]
            h = g.concat_channels(h, s, name=f"dec{i}.cat")
            cin += sc
        h = block(h, cin, cout, f"dec{i}")
        cin = cout
    out = conv(h, cin, spec.out_channels, "head", k=1)
    return Network(g, x, out, layers, spec)


# ---------------------------------------------------------------------------
# losses and metrics


def softmax(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def composite_masks(classes: np.ndarray) -> dict[str, np.ndarray]:
    """WT/TC/ET masks from an output-class map."""
    return {name: np.isin(classes, members) for name, members in COMPOSITES.items()}


def segmentation_loss(logits, target, *, smooth=1.0):
    """Mean of soft-Dice (WT, TC, ET composites) and pixel cross-entropy.

    Returns ``(loss, d loss / d logits)``.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    n_classes = logits.shape[1]
    onehot = (target[:, None] == np.arange(n_classes)[None, :, None, None]).astype(logits.dtype)
    m = target.size
    ce = -float((logp * onehot).sum()) / m
    d_ce = (p - onehot) / m

    dice_terms = []
    g_p = np.zeros_like(p)
    for members in COMPOSITES.values():
        P = p[:, members].sum(axis=1)
        G = onehot[:, members].sum(axis=1)
        inter, denom = float((P * G).sum()), float(P.sum() + G.sum()) + smooth
        d = (2 * inter + smooth) / denom
        dice_terms.append(d)
        dd = (2 * G * denom - (2 * inter + smooth)) / denom ** 2
        for c in members:
            g_p[:, c] -= dd / len(COMPOSITES)
    soft_dice = 1.0 - float(np.mean(dice_terms))
    d_dice = p * (g_p - (p * g_p).sum(axis=1, keepdims=True))
    return 0.5 * (ce + soft_dice), 0.5 * (d_ce + d_dice)


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred, gt = check_same_shape(check_binary(pred), check_binary(gt))
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass
class SegMetrics:
    dice_wt: float
    dice_tc: float
    dice_et: float


def evaluate(network: Network, X, y, batch_size=16) -> SegMetrics:
    """Dice per composite, pooled over all pixels of the dataset."""
    pred = predict_labels(network, X, batch_size=batch_size)
    pm, gm = composite_masks(pred), composite_masks(np.asarray(y))
    return SegMetrics(*(dice(pm[k], gm[k]) for k in ("wt", "tc", "et")))


def predict_labels(network, X, mode="eval", rng=None, batch_size=16):
    return predict_proba(network, X, mode, rng, batch_size).argmax(axis=1)


def predict_proba(network, X, mode="eval", rng=None, batch_size=16):
    X = check_images(X, dtype=network.graph.dtype)
    rng = rng if rng is not None else RngStream(0)
    out = []
    for k, i in enumerate(range(0, len(X), batch_size)):
        out.append(network.predict_proba(X[i:i + batch_size], mode=mode, rng=rng.advance(k)))
    return np.concatenate(out) if out else np.zeros((0, network.arch.out_channels) + X.shape[2:])


def predict(network, image, mode="eval", rng=None):
    """Per-class probabilities and the argmax label map for one image or a batch."""
    proba = predict_proba(network, image, mode, rng)
    return proba, proba.argmax(axis=1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.002
    epochs: int = 30
    batch: int = 8
    momentum: float = 0.9
    seed: int = 0
    patience: int = 10
    clip_norm: float | None = 5.0
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train(network: Network, X, y, config: TrainConfig, X_val=None, y_val=None,
          callback=None) -> TrainResult:
    """Minimize the composite loss in place (Adam by default, momentum SGD optional).

    With a validation set, training stops once WT Dice has not improved for
    ``patience`` epochs and the best-scoring parameters are restored.
    """
    X = check_images(X, dtype=network.graph.dtype)
    y = check_label_maps(y, X)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if config.lr < 0:
        raise ValueError("lr must be non-negative")
    if config.optimizer not in ("adam", "sgd"):
        raise ValueError(f"optimizer must be 'adam' or 'sgd', got {config.optimizer!r}")
    g = network.graph
    pids = g.parameter_ids()
    velocity = {i: np.zeros_like(g.nodes[i].value) for i in pids}
    second = {i: np.zeros_like(g.nodes[i].value) for i in pids}
    base = RngStream(config.seed)
    drop_rng = base.child(1)
    result = TrainResult()
    best, best_params, stale = -1.0, None, 0
    step = 0
    for epoch in range(config.epochs):
        order = base.advance(epoch).generator(7).permutation(len(X))
        total, seen = 0.0, 0
        for start in range(0, len(X), config.batch):
            idx = order[start:start + config.batch]
            g.forward({network.input_id: X[idx]}, mode="train", rng=drop_rng.advance(step))
            loss, dlogits = segmentation_loss(g.value(network.output_id), y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            adj = g.backward(network.output_id, dlogits)
            grads = {i: adj[i] for i in pids}
            if config.clip_norm:
                norm = math.sqrt(sum(float((gr.astype(np.float64) ** 2).sum()) for gr in grads.values()))
                if norm > config.clip_norm:
                    scale = g.dtype.type(config.clip_norm / norm)
                    grads = {i: gr * scale for i, gr in grads.items()}
            lr = g.dtype.type(config.lr)
            mom = g.dtype.type(config.momentum)
            if config.optimizer == "adam":
                b1, b2 = config.betas
                c1, c2 = 1 - b1 ** (step + 1), 1 - b2 ** (step + 1)
                for i in pids:
                    velocity[i] = b1 * velocity[i] + (1 - b1) * grads[i]
                    second[i] = b2 * second[i] + (1 - b2) * grads[i] ** 2
                    upd = (velocity[i] / c1) / (np.sqrt(second[i] / c2) + 1e-8)
                    g.set_parameter(i, g.nodes[i].value - lr * upd.astype(g.dtype))
            else:
                for i in pids:
                    velocity[i] = mom * velocity[i] + grads[i]
                    g.set_parameter(i, g.nodes[i].value - lr * velocity[i])
            total += loss * len(idx)
            seen += len(idx)
            step += 1
        epoch_loss = total / seen
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        result.loss_curve.append(epoch_loss)
        msg = f"epoch {epoch + 1}/{config.epochs} loss {epoch_loss:.4f}"
        if X_val is not None:
            score = evaluate(network, X_val, y_val).dice_wt
            result.val_dice.append(score)
            msg += f" val WT dice {score:.4f}"
            if score > best:
                best, stale, result.best_epoch = score, 0, epoch
                best_params = network.parameters()
            else:
                stale += 1
        logger.info(msg)
        if callback is not None:
            callback(epoch, epoch_loss)
        if X_val is not None and stale >= config.patience:
            result.stopped_early = True
            break
    if best_params is not None:
        network.load_parameters(best_params)
    return result


# ---------------------------------------------------------------------------
# estimator facade


class SegmentationNet(BaseEstimator):
    """sklearn-style wrapper: ``fit(X, y)`` trains, ``predict`` returns label maps.

    ``X`` is ``(N, 4, H, W)``; ``y`` holds output-class maps ``(N, H, W)``.
    """

    def __init__(self, family="skip", depth=3, base_channels=8, dropout_rate=0.0,
                 lr=0.002, epochs=30, batch_size=8, optimizer="adam", momentum=0.9,
                 patience=10, clip_norm=5.0, init_seed=0, seed=0):
        self.family = family
        self.depth = depth
        self.base_channels = base_channels
        self.dropout_rate = dropout_rate
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.momentum = momentum
        self.patience = patience
        self.clip_norm = clip_norm
        self.init_seed = init_seed
        self.seed = seed

    def _arch(self, in_channels):
        return ArchSpec(self.family, self.depth, self.base_channels, in_channels, 4, self.dropout_rate)

    def _config(self):
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch_size,
                           momentum=self.momentum, seed=self.seed, patience=self.patience,
                           clip_norm=self.clip_norm, optimizer=self.optimizer)

    def fit(self, X, y, X_val=None, y_val=None, warm_start_from: Network | None = None):
        X = check_images(X)
        y = check_label_maps(y, X, n_classes=4)
        net = build_model(self._arch(X.shape[1]), self.init_seed)
        if warm_start_from is not None:
            net.load_parameters(warm_start_from.parameters())
        self.train_result_ = train(net, X, y, self._config(), X_val, y_val)
        self.network_ = net
        self.loss_curve_ = self.train_result_.loss_curve
        return self

    def predict_proba(self, X, mode="eval", rng=None):
        check_is_fitted(self, "network_")
        return predict_proba(self.network_, X, mode, rng)

    def predict(self, X, mode="eval", rng=None):
        return self.predict_proba(X, mode, rng).argmax(axis=1)

    def score(self, X, y):
        """Whole-tumor Dice."""
        check_is_fitted(self, "network_")
        return evaluate(self.network_, X, y).dice_wt
