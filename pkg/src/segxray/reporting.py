"""Run manifests, data/image specs, config files, and expected-result bands."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import DatasetHandle, generate_sample

MANIFEST_NAME = "manifest.json"


class SpecError(ValueError):
    """A malformed ``--data`` / ``--image`` / ``--config`` value."""


# ---------------------------------------------------------------------------
# hashing and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def list_outputs(root) -> dict[str, str]:
    """Every file under ``root`` (except the manifest) mapped to its SHA-256."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in files}


@dataclass
class RunManifest:
    command: str
    flags: dict
    seeds: dict
    checkpoint_hash: str | None
    version: str
    wall_clock_seconds: float
    files: dict[str, str] = field(default_factory=dict)
    stages: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True, default=str)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def write_manifest(out_dir, command, flags, seeds, checkpoint_hash, version, wall_clock) -> RunManifest:
    out_dir = Path(out_dir)
    files = list_outputs(out_dir)
    stages: dict[str, list[str]] = {}
    for name in files:
        top = name.split("/", 1)[0] if "/" in name else "."
        stages.setdefault(top, []).append(name)
    m = RunManifest(command, flags, seeds, checkpoint_hash, version, round(wall_clock, 3), files, stages)
    (out_dir / MANIFEST_NAME).write_text(m.to_json() + "\n")
    return m


# ---------------------------------------------------------------------------
# data specs


def _parse_kv(text: str, what: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise SpecError(f"{what} spec item {part!r} is not key=value")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _int(d, key, default, what):
    try:
        return int(d.pop(key, default))
    except ValueError:
        raise SpecError(f"{what} spec field {key!r} must be an integer") from None


@dataclass
class DataBundle:
    images: np.ndarray             # (N, 4, H, W) float32
    targets: np.ndarray            # (N, H, W) output classes
    masks: dict[str, np.ndarray]   # concept -> (N, H, W) bool
    source: dict

    def __len__(self):
        return len(self.images)


def _bundle_from_samples(samples, source) -> DataBundle:
    samples = list(samples)
    if not samples:
        raise SpecError("data spec selects no samples")
    masks = {k: np.stack([s.masks[k] for s in samples]) for k in samples[0].masks}
    return DataBundle(np.stack([s.image for s in samples]), np.stack([s.target for s in samples]),
                      masks, source)


def _load_array_file(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix == ".npy":
        return {"images": np.load(path)}
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def load_data(spec: str) -> DataBundle:
    """``seed=S,count=N[,size=H][,tumor_fraction=f]`` or a ``.npz`` with ``images``/``targets``."""
    if "=" not in spec:
        arrays = _load_array_file(Path(spec))
        images = np.asarray(arrays["images"], dtype=np.float32)
        if images.ndim != 4:
            raise SpecError(f"{spec}: images must be (N, C, H, W), got {images.shape}")
        targets = np.asarray(arrays.get("targets", np.zeros((len(images),) + images.shape[2:], int)))
        masks = {k[5:]: arrays[k].astype(bool) for k in arrays if k.startswith("mask_")}
        if "wt" not in masks:
            masks["wt"] = targets > 0
        if "brain" not in masks:
            masks["brain"] = images.max(axis=1) > 0
        return DataBundle(images, targets, masks, {"path": str(spec)})
    d = _parse_kv(spec, "data")
    seed, count = _int(d, "seed", 0, "data"), _int(d, "count", 48, "data")
    size = _int(d, "size", 64, "data")
    frac = float(d.pop("tumor_fraction", 0.9))
    if d:
        raise SpecError(f"unknown data spec fields: {', '.join(sorted(d))}")
    handle = DatasetHandle(count, seed, size, size, frac)
    return _bundle_from_samples(handle, {"seed": seed, "count": count, "size": size, "tumor_fraction": frac})


def load_image(spec: str):
    """``seed=S,index=i[,size=H][,tumor=0|1]`` or a ``.npy`` ``(C, H, W)`` file.

    Returns ``(image, target or None, masks dict)``.
    """
    if "=" not in spec:
        arr = _load_array_file(Path(spec))["images"]
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 4:
            arr = arr[0]
        if arr.ndim != 3:
            raise SpecError(f"{spec}: image must be (C, H, W), got {arr.shape}")
        return arr, None, {"brain": arr.max(axis=0) > 0}
    d = _parse_kv(spec, "image")
    seed, index = _int(d, "seed", 0, "image"), _int(d, "index", 0, "image")
    size = _int(d, "size", 64, "image")
    tumor = d.pop("tumor", None)
    if d:
        raise SpecError(f"unknown image spec fields: {', '.join(sorted(d))}")
    if tumor is None:
        s = DatasetHandle(index + 1, seed, size, size)[index]
    else:
        s = generate_sample(seed, index, size, size, tumor not in ("0", "false", "no"))
    return s.image, s.target, s.masks


# ---------------------------------------------------------------------------
# config files and workers


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment; keys use ``_`` or ``-``."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_workers(flag: int | None) -> int:
    env = os.environ.get("SEGXRAY_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SpecError(f"SEGXRAY_WORKERS must be an integer, got {env!r}") from None
    if flag:
        return max(1, int(flag))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# expected-results bands


@dataclass
class Band:
    value: float
    lo: float
    hi: float

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


@dataclass
class ExpectedResults:
    metrics: dict[str, Band]
    note: str = ""

    @classmethod
    def load(cls, path) -> "ExpectedResults":
        raw = json.loads(Path(path).read_text())
        return cls({k: Band(**v) for k, v in raw["metrics"].items()}, raw.get("note", ""))

    def save(self, path) -> None:
        data = {"note": self.note, "metrics": {k: b.__dict__ for k, b in sorted(self.metrics.items())}}
        Path(path).write_text(json.dumps(data, indent=1) + "\n")

    def compare(self, realized: dict[str, float]) -> list[tuple[str, float, Band, bool]]:
        rows = []
        for name, band in self.metrics.items():
            if name in realized:
                x = float(realized[name])
                rows.append((name, x, band, band.contains(x)))
        return rows
