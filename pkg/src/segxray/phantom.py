"""Synthetic 4-channel brain phantoms with nested tumor labels.

Label classes: 0 background, 1 brain-only, 2 edema (ED), 3 non-enhancing
core, 4 enhancing tumor (ET). Composite masks follow the usual convention:
WT = ED | core | ET, TC = core | ET.

Channels loosely mimic (T1, T2, FLAIR, T1ce); the enhancing rim is
brightest in channel 3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import ndimage

from .rng import RngStream

BACKGROUND, BRAIN, EDEMA, CORE, ENHANCING = range(5)
LABEL_NAMES = ("background", "brain", "edema", "core", "enhancing")
# network output classes: background/brain merged, ED, non-enhancing core, ET
OUTPUT_CLASSES = ("background", "edema", "core", "enhancing")
COMPOSITES = {"wt": (1, 2, 3), "tc": (2, 3), "et": (3,)}

# rows: label class, columns: channel
INTENSITY_PROFILES = np.array([
    [0.00, 0.00, 0.00, 0.00],
    [0.45, 0.35, 0.35, 0.40],
    [0.40, 0.70, 0.85, 0.45],
    [0.25, 0.60, 0.50, 0.30],
    [0.50, 0.55, 0.60, 0.90],
])
NOISE_STD = 0.05
TEXTURE_AMPLITUDE = 0.04
EDGE_BLUR = 0.6
WT_RADIUS = (4.0, 6.5)      # semi-major axis in pixels at 64x64
TC_SCALE = (0.5, 0.65)
NECROSIS_SCALE = (0.4, 0.55)


@dataclass
class SyntheticSample:
    image: np.ndarray
    labels: np.ndarray
    seed: int
    index: int
    tumor: bool
    masks: dict[str, np.ndarray] = field(init=False)

    def __post_init__(self):
        lab = self.labels
        self.masks = {
            "brain": lab >= BRAIN,
            "wt": lab >= EDEMA,
            "tc": lab >= CORE,
            "et": lab == ENHANCING,
            "ed": lab == EDEMA,
        }

    @property
    def target(self) -> np.ndarray:
        """Output-class map in ``[0, 4)``."""
        return np.maximum(self.labels.astype(np.int64) - 1, 0)


@dataclass(frozen=True)
class DatasetHandle:
    count: int
    base_seed: int
    H: int = 64
    W: int = 64
    tumor_fraction: float = 0.9

    def is_tumor(self, index: int) -> bool:
        return tumor_flag(index, self.tumor_fraction)

    def __iter__(self) -> Iterator[SyntheticSample]:
        return generate_dataset(self)

    def __len__(self):
        return self.count

    def __getitem__(self, index: int) -> SyntheticSample:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return generate_sample(self.base_seed, index, self.H, self.W, self.is_tumor(index))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(images, output-class targets)``."""
        samples = list(self)
        if not samples:
            return np.zeros((0, 4, self.H, self.W), np.float32), np.zeros((0, self.H, self.W), np.int64)
        return np.stack([s.image for s in samples]), np.stack([s.target for s in samples])


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def tumor_flag(index: int, fraction: float) -> bool:
    # Evenly strided assignment: the first n samples hold round(fraction * n) tumors.
    return _round_half_up((index + 1) * fraction) - _round_half_up(index * fraction) == 1


def _blob(yy, xx, cy, cx, a, b, angle, harmonics):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / a
    v = (-dx * sa + dy * ca) / b
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    r = np.ones_like(rho)
    for m, amp, phase in harmonics:
        r += amp * np.cos(m * theta + phase)
    return rho <= r


def _harmonics(gen, max_amp):
    return [(m, gen.uniform(0, max_amp), gen.uniform(0, 2 * math.pi)) for m in (2, 3, 4)]


def _make_proper(inner, outer):
    """Shrink ``inner`` (already inside ``outer``) until ``outer - inner`` is nonempty."""
    inner = inner & outer
    while inner.sum() and not (outer & ~inner).any():
        eroded = ndimage.binary_erosion(inner)
        inner = eroded if eroded.any() else np.zeros_like(inner)
    return inner


def _ensure_nonempty(inner, outer, cy, cx):
    if inner.any():
        return inner
    inner = np.zeros_like(outer)
    ys, xs = np.nonzero(outer)
    k = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
    inner[ys[k], xs[k]] = True
    return inner


def _smooth_field(gen, yy, xx, H, W):
    f = np.zeros_like(yy)
    for _ in range(3):
        ky, kx = gen.uniform(0.5, 2.5, size=2) * 2 * math.pi
        f += np.cos(ky * yy / H + kx * xx / W + gen.uniform(0, 2 * math.pi))
    return f / 3.0


def generate_sample(base_seed: int, index: int, H: int = 64, W: int = 64,
                    tumor: bool = True) -> SyntheticSample:
    if H < 32 or W < 32:
        raise ValueError(f"phantoms need H, W >= 32, got {H}x{W}")
    gen = RngStream(base_seed).generator(index)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    scale = min(H, W) / 64.0

    cy = H / 2 + gen.uniform(-2, 2) * scale
    cx = W / 2 + gen.uniform(-2, 2) * scale
    ba, bb = H * gen.uniform(0.34, 0.40), W * gen.uniform(0.28, 0.34)
    brain = _blob(yy, xx, cy, cx, ba, bb, gen.uniform(0, math.pi), _harmonics(gen, 0.05))
    labels = np.where(brain, BRAIN, BACKGROUND).astype(np.uint8)

    # always consume the tumor draws so geometry does not depend on the flag
    r = gen.uniform(*WT_RADIUS) * scale
    aspect = gen.uniform(0.75, 1.0)
    t_angle = gen.uniform(0, math.pi)
    rad, phi = gen.uniform(0, 0.45), gen.uniform(0, 2 * math.pi)
    ty = cy + rad * (ba - r) * math.sin(phi)
    tx = cx + rad * (bb - r) * math.cos(phi)
    wt_h, tc_h, nc_h = (_harmonics(gen, 0.1) for _ in range(3))
    s_tc, s_nc = gen.uniform(*TC_SCALE), gen.uniform(*NECROSIS_SCALE)

    if tumor:
        wt = _blob(yy, xx, ty, tx, r, r * aspect, t_angle, wt_h)
        wt = _ensure_nonempty(_make_proper(wt, brain), brain, ty, tx)
        tc = _blob(yy, xx, ty, tx, r * s_tc, r * s_tc * aspect, t_angle, tc_h)
        tc = _ensure_nonempty(_make_proper(tc, wt), wt, ty, tx)
        tc = _make_proper(tc, wt)
        nc = _blob(yy, xx, ty, tx, r * s_tc * s_nc, r * s_tc * s_nc * aspect, t_angle, nc_h)
        nc = _ensure_nonempty(_make_proper(nc, tc), tc, ty, tx)
        nc = _make_proper(nc, tc)
        labels[wt] = EDEMA
        labels[tc] = ENHANCING
        labels[nc] = CORE

    clean = INTENSITY_PROFILES[labels].transpose(2, 0, 1)
    if EDGE_BLUR:
        clean = ndimage.gaussian_filter(clean, sigma=(0, EDGE_BLUR, EDGE_BLUR), mode="nearest")
    texture = TEXTURE_AMPLITUDE * _smooth_field(gen, yy, xx, H, W) * brain
    image = clean + texture[None] + gen.normal(0.0, NOISE_STD, size=clean.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticSample(image, labels, base_seed, index, bool(tumor))


def generate_dataset(handle: DatasetHandle) -> Iterator[SyntheticSample]:
    for i in range(handle.count):
        yield generate_sample(handle.base_seed, i, handle.H, handle.W, handle.is_tumor(i))
