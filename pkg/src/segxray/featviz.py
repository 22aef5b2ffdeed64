"""Regularized activation maximization.

Gradient ascent on the input for the mean activation of one filter,
penalized by anisotropic total variation, a channel-wise Gaussian-kernel
patch statistic against a template image, and an L2 bound. Each step sees
a randomly shifted and slightly rotated copy of the current image; the
transform is linear, so its exact transpose carries the gradient back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator

from ._validation import check_images
from .checkpoint import as_network
from .rng import RngStream


class NonFiniteObjectiveError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# total variation


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError(f"total variation needs (C, H, W) with H, W >= 2, got {img.shape}")
    return img


def total_variation(img) -> float:
    x = _as_chw(img)
    return float(np.abs(np.diff(x, axis=2)).sum() + np.abs(np.diff(x, axis=1)).sum())


def total_variation_grad(img):
    x = _as_chw(img)
    g = np.zeros_like(x)
    dh = np.sign(np.diff(x, axis=2))
    g[:, :, 1:] += dh
    g[:, :, :-1] -= dh
    dv = np.sign(np.diff(x, axis=1))
    g[:, 1:, :] += dv
    g[:, :-1, :] -= dv
    return total_variation(x), g.reshape(np.shape(img))


# ---------------------------------------------------------------------------
# kernel style statistic


def gaussian_kernel(x, y, sigma) -> float:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    d = x - y
    return math.exp(-float(np.dot(d.ravel(), d.ravel())) / (2.0 * sigma ** 2))


def gaussian_kernel_grad(x, y, sigma) -> np.ndarray:
    """d k(x, y) / d x."""
    k = gaussian_kernel(x, y, sigma)
    return -k * (np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) / sigma ** 2


def _gram(A, B, sigma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma ** 2))


def sample_patch_positions(gen: np.random.Generator, H, W, n=128, size=7) -> np.ndarray:
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} smaller than patch size {size}")
    return np.stack([gen.integers(0, H - size + 1, n), gen.integers(0, W - size + 1, n)], axis=1)


def extract_patches(channel, positions, size=7) -> np.ndarray:
    channel = np.asarray(channel, dtype=np.float64)
    rows = positions[:, 0, None, None] + np.arange(size)[None, :, None]
    cols = positions[:, 1, None, None] + np.arange(size)[None, None, :]
    return channel[rows, cols].reshape(len(positions), size * size)


def style_loss(x, s, sigma, positions, size=7) -> float:
    return style_loss_grad(x, s, sigma, positions, size)[0]


def style_loss_grad(x, s, sigma, positions, size=7):
    """Sum over channels of the kernel two-sample statistic between patch sets.

    ``x`` and ``s`` are ``(C, H, W)``; patches sit at the same ``positions``
    in both. Returns ``(value, d value / d x)``.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise ValueError(f"pre-image {x.shape} and template {s.shape} differ in shape")
    total = 0.0
    grad = np.zeros_like(x)
    rows = positions[:, 0, None, None] + np.arange(size)[None, :, None]
    cols = positions[:, 1, None, None] + np.arange(size)[None, None, :]
    for c in range(x.shape[0]):
        X = extract_patches(x[c], positions, size)
        S = extract_patches(s[c], positions, size)
        kxx, kss, kxs = _gram(X, X, sigma), _gram(S, S, sigma), _gram(X, S, sigma)
        total += float(kxx.sum() + kss.sum() - 2.0 * kxs.sum())
        # d/dX_i: 2 sum_j kxx_ij (X_j - X_i) / s^2  -  2 sum_j kxs_ij (S_j - X_i) / s^2
        gX = (2.0 / sigma ** 2) * ((kxx @ X - kxx.sum(1)[:, None] * X)
                                   - (kxs @ S - kxs.sum(1)[:, None] * X))
        np.add.at(grad[c], (rows, cols), gX.reshape(-1, size, size))
    return total, grad


def median_sigma(template, positions, size=7) -> float:
    """Median pairwise patch distance of the template (pooled over channels)."""
    d = []
    for c in range(template.shape[0]):
        S = extract_patches(template[c], positions, size)
        sq = (S * S).sum(1)[:, None] + (S * S).sum(1)[None, :] - 2 * S @ S.T
        iu = np.triu_indices(len(S), 1)
        d.append(np.sqrt(np.maximum(sq[iu], 0)))
    med = float(np.median(np.concatenate(d))) if d else 0.0
    return med if med > 0 else 1.0


# ---------------------------------------------------------------------------
# jitter


def _reflect(i, n):
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


@dataclass
class JitterTransform:
    """Linear resampling ``out = M @ in`` (per channel) with its exact transpose."""

    shift: tuple[int, int]
    angle: float
    shape: tuple[int, int]
    matrix: sparse.csr_matrix | None = None

    def apply(self, img):
        img = np.asarray(img, dtype=np.float64)
        if self.matrix is None:
            return img.copy()
        c = img.shape[0]
        return (self.matrix @ img.reshape(c, -1).T).T.reshape(img.shape)

    def adjoint(self, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if self.matrix is None:
            return grad.copy()
        c = grad.shape[0]
        return (self.matrix.T @ grad.reshape(c, -1).T).T.reshape(grad.shape)


def jitter_transform(H, W, shift=(0, 0), angle=0.0) -> JitterTransform:
    """Window offset by ``shift`` (reflect boundary) and rotated by ``angle`` degrees."""
    dy, dx = int(shift[0]), int(shift[1])
    if dy == 0 and dx == 0 and angle == 0:
        return JitterTransform((0, 0), 0.0, (H, W), None)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    th = math.radians(angle)
    ct, st = (1.0, 0.0) if angle == 0 else (math.cos(th), math.sin(th))
    ry, rx = yy - cy, xx - cx
    sy = ct * ry - st * rx + cy + dy
    sx = st * ry + ct * rx + cx + dx
    y0, x0 = np.floor(sy), np.floor(sx)
    ty, tx = sy - y0, sx - x0
    out_idx = np.arange(H * W)
    rows, cols, vals = [], [], []
    for oy, wy in ((0, 1 - ty), (1, ty)):
        for ox, wx in ((0, 1 - tx), (1, tx)):
            w = (wy * wx).ravel()
            keep = w != 0
            src = _reflect((y0 + oy).astype(int), H) * W + _reflect((x0 + ox).astype(int), W)
            rows.append(out_idx[keep])
            cols.append(src.ravel()[keep])
            vals.append(w[keep])
    M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(H * W, H * W))
    return JitterTransform((dy, dx), float(angle), (H, W), M)


def jitter(img, gen: np.random.Generator, max_shift: int, max_rot: float):
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[-2:]
    if max_shift and not max_shift < min(H, W) / 4:
        raise ValueError(f"max_shift {max_shift} must be < min(H, W) / 4 = {min(H, W) / 4}")
    dy, dx = (int(v) for v in gen.integers(-max_shift, max_shift + 1, 2)) if max_shift else (0, 0)
    angle = float(gen.uniform(-max_rot, max_rot)) if max_rot else 0.0
    t = jitter_transform(H, W, (dy, dx), angle)
    return t.apply(img), t


# ---------------------------------------------------------------------------
# ascent


@dataclass
class RegConfig:
    lambda_l2: float = 1e-4
    tv_weight: float = 2e-4
    gamma_style: float = 1e-4
    sigma: float | None = None
    jitter_max_shift: int = 2
    jitter_max_rot: float = 5.0
    steps: int = 200
    step_size: float = 30.0
    n_patches: int = 128
    patch_size: int = 7

    def validate(self) -> "RegConfig":
        for name in ("lambda_l2", "tv_weight", "gamma_style"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        return self


TRACE_FIELDS = ("step", "activation", "tv", "style", "l2", "total")


@dataclass
class PreImage:
    x_star: np.ndarray
    trace: list[tuple] = field(default_factory=list)
    layer: str = ""
    filter: int = 0
    template_id: int | None = None
    best_step: int = 0
    final_activation: float = float("nan")

    def trace_csv(self) -> str:
        lines = [",".join(TRACE_FIELDS)]
        for row in self.trace:
            lines.append(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]))
        return "\n".join(lines) + "\n"


def filter_activation(network, image, layer, filter) -> float:
    net = as_network(network)
    net.graph.forward({net.input_id: check_images(image, dtype=net.graph.dtype)[:1]}, mode="eval")
    return float(net.graph.value(net.layer_id(layer))[0, filter].mean())


def activation_maximize(network, layer, filter, reg: RegConfig | None = None, template=None,
                        seed=0, template_id=None, init=None) -> PreImage:
    reg = (reg or RegConfig()).validate()
    net = as_network(network)
    nid = net.layer_id(layer)
    g = net.graph
    shape = (net.arch.in_channels, 64, 64) if template is None and init is None and net.arch else None
    if template is not None:
        template = check_images(template, dtype=np.float64)[0]
        shape = template.shape
    if init is not None:
        shape = np.shape(init)
    if shape is None:
        raise ValueError("need a template or an init image to fix the pre-image shape")
    rng = RngStream(seed)
    x = rng.generator(0).uniform(0.4, 0.6, size=shape) if init is None else np.array(init, dtype=np.float64)

    use_style = template is not None and reg.gamma_style > 0
    sigma = reg.sigma
    if use_style and sigma is None:
        pos0 = sample_patch_positions(rng.generator(1), shape[1], shape[2], reg.n_patches, reg.patch_size)
        sigma = median_sigma(template, pos0, reg.patch_size)

    trace = []
    best_obj, best_x, best_step = -math.inf, x.copy(), 0
    for step in range(reg.steps):
        gen = rng.advance(step + 1).generator(2)
        xj, tf = jitter(x, gen, reg.jitter_max_shift, reg.jitter_max_rot)
        g.forward({net.input_id: xj[None].astype(g.dtype)}, mode="eval")
        A = g.value(nid)
        if not 0 <= filter < A.shape[1]:
            raise IndexError(f"filter {filter} out of range for layer {layer!r}")
        act = float(A[0, filter].astype(np.float64).mean())
        seed_grad = np.zeros(A.shape, dtype=np.float64)
        seed_grad[0, filter] = 1.0 / (A.shape[2] * A.shape[3])
        g_act = tf.adjoint(g.backward(nid, seed_grad)[net.input_id][0].astype(np.float64))

        tv, g_tv = total_variation_grad(x) if reg.tv_weight else (0.0, 0.0)
        if use_style:
            pos = sample_patch_positions(gen, shape[1], shape[2], reg.n_patches, reg.patch_size)
            st, g_st = style_loss_grad(x, template, sigma, pos, reg.patch_size)
        else:
            st, g_st = 0.0, 0.0
        l2 = float((x * x).sum())
        total = act - reg.tv_weight * tv - reg.gamma_style * st - reg.lambda_l2 * l2
        trace.append((step, act, tv, st, l2, total))
        if not math.isfinite(total):
            raise NonFiniteObjectiveError(f"objective became non-finite at step {step}", trace)
        if total > best_obj:
            best_obj, best_x, best_step = total, x.copy(), step
        grad = g_act - reg.tv_weight * g_tv - reg.gamma_style * g_st - 2.0 * reg.lambda_l2 * x
        x = np.clip(x + reg.step_size * grad, 0.0, 1.0)

    final = filter_activation(net, best_x, layer, filter)
    return PreImage(best_x, trace, layer, int(filter), template_id, best_step, final)


class ActivationMaximizer(BaseEstimator):
    """``fit(X)`` picks a template from ``X`` (seeded) and optimizes ``x_star_``."""

    def __init__(self, network=None, layer=None, filter=0, lambda_l2=1e-4, tv_weight=2e-4,
                 gamma_style=1e-4, sigma=None, jitter_max_shift=2, jitter_max_rot=5.0,
                 steps=200, step_size=30.0, seed=0):
        self.network = network
        self.layer = layer
        self.filter = filter
        self.lambda_l2 = lambda_l2
        self.tv_weight = tv_weight
        self.gamma_style = gamma_style
        self.sigma = sigma
        self.jitter_max_shift = jitter_max_shift
        self.jitter_max_rot = jitter_max_rot
        self.steps = steps
        self.step_size = step_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X, dtype=np.float64)
        tid = int(RngStream(self.seed).generator(9).integers(len(X)))
        reg = RegConfig(self.lambda_l2, self.tv_weight, self.gamma_style, self.sigma,
                        self.jitter_max_shift, self.jitter_max_rot, self.steps, self.step_size)
        self.pre_image_ = activation_maximize(self.network, self.layer, self.filter, reg, X[tid],
                                              self.seed, tid)
        self.x_star_ = self.pre_image_.x_star
        self.trace_ = self.pre_image_.trace
        return self
