"""Deterministic synthetic small-object dataset.

Backgrounds are sums of random 2-D sinusoids plus uniform noise; objects are
anti-aliased discs, squares and triangles whose boxes come straight from the
geometry used to draw them. Image ``i`` depends only on ``(seed, i)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detector import BoxLabel
from .errors import ConfigError, TensorFileError
from .metrics import iou
from .tensor import Tensor
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "square", "triangle")
MANIFEST_VERSION = 1
MAX_REJECTIONS = 1000
IOU_CAP = 0.3
SUPERSAMPLE = 4


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 200
    image_size: int = 256
    objects_per_image: tuple[int, int] = (8, 24)
    size_range: tuple[float, float] = (4.0, 24.0)
    num_classes: int = 3
    seed: int = 0
    num_val: int = 0

    def __post_init__(self):
        lo, hi = self.size_range
        if not 0 < lo <= hi < 32:
            raise ConfigError(f"size_range must satisfy 0 < min <= max < 32, got {self.size_range}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in 1..{len(CLASS_NAMES)}, got {self.num_classes}")
        a, b = self.objects_per_image
        if not 0 <= a <= b:
            raise ConfigError(f"objects_per_image must be an increasing pair, got {self.objects_per_image}")
        if self.num_images < 0 or self.num_val < 0:
            raise ConfigError("num_images and num_val must be non-negative")
        if self.image_size <= 2 * hi or self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32 larger than twice the max object size")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for k in ("objects_per_image", "size_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        d["size_range"] = list(self.size_range)
        return d


def benchmark_spec(seed: int = 1) -> DatasetSpec:
    """200 train / 50 val images at 128 px: the desk-scale comparison set."""
    return DatasetSpec(num_images=200, num_val=50, image_size=128, seed=seed)


def background(rng: np.random.Generator, size: int) -> np.ndarray:
    """(3, size, size) clutter in [0, 1]: 6 sinusoids per channel + uniform noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((3, size, size))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(6):
            fx, fy = rng.uniform(-12, 12, size=2)
            phase = rng.uniform(0, 2 * math.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
        img[c] = acc + rng.uniform(-1.0, 1.0, size=(size, size))
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return img


def _inside(cls_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in box-normalized coordinates u, v in [-0.5, 0.5]."""
    if cls_id == 0:
        return u * u + v * v <= 0.25
    if cls_id == 1:
        return (np.abs(u) <= 0.5) & (np.abs(v) <= 0.5)
    # upward triangle: apex (0, -0.5), base from (-0.5, 0.5) to (0.5, 0.5)
    return (v <= 0.5) & (np.abs(u) <= (v + 0.5) / 2)


def coverage(cls_id: int, cx: float, cy: float, w: float, h: float, size: int):
    """Fractional pixel coverage of a shape over its bounding pixel window.

    Returns ``(y0, x0, cov)`` where ``cov`` covers rows y0.. and cols x0..
    """
    x0, x1 = int(math.floor(cx - w / 2)), int(math.ceil(cx + w / 2))
    y0, y1 = int(math.floor(cy - h / 2)), int(math.ceil(cy + h / 2))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, size), min(y1, size)
    s = SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    px = (np.arange(x0, x1)[:, None] + offs[None, :]).reshape(-1)
    py = (np.arange(y0, y1)[:, None] + offs[None, :]).reshape(-1)
    u = (px[None, :] - cx) / w
    v = (py[:, None] - cy) / h
    hit = _inside(cls_id, u, v).astype(np.float64)
    cov = hit.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    return y0, x0, cov


def render_image(spec: DatasetSpec, index: int, return_masks: bool = False):
    """Draw image ``index``; returns (image (3, S, S) float32, labels[, masks], rejected)."""
    rng = np.random.default_rng([spec.seed, index])
    S = spec.image_size
    img = background(rng, S)
    n_target = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    lo, hi = spec.size_range
    labels: list[BoxLabel] = []
    masks = []
    rejections = 0
    while len(labels) < n_target and rejections < MAX_REJECTIONS:
        cls_id = int(rng.integers(spec.num_classes))
        side = float(rng.uniform(lo, hi))
        aspect = float(rng.uniform(0.6, 1.0))
        w, h = (side, side * aspect) if rng.random() < 0.5 else (side * aspect, side)
        cx = float(rng.uniform(w / 2, S - w / 2))
        cy = float(rng.uniform(h / 2, S - h / 2))
        box = (cx, cy, w, h)
        if any(iou(box, (b.cx, b.cy, b.w, b.h)) > IOU_CAP for b in labels):
            rejections += 1
            continue
        y0, x0, cov = coverage(cls_id, cx, cy, w, h, S)
        region = img[:, y0:y0 + cov.shape[0], x0:x0 + cov.shape[1]]
        color = rng.uniform(0, 1, size=3)
        local = region.mean(axis=(1, 2))
        if np.abs(color - local).mean() < 0.25:
            color = np.clip(1.0 - local + rng.uniform(-0.1, 0.1, size=3), 0, 1)
        region *= 1 - cov[None]
        region += color[:, None, None] * cov[None]
        labels.append(BoxLabel(cls_id, cx, cy, w, h))
        if return_masks:
            masks.append((y0, x0, cov))
    image = np.clip(img, 0, 1).astype(np.float32)
    if return_masks:
        return image, labels, masks, rejections
    return image, labels, rejections


def gen_dataset(spec: DatasetSpec, out_dir, ppm: bool = False) -> dict:
    """Write ``num_images`` train + ``num_val`` val images and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ppm:
        (out / "ppm").mkdir(exist_ok=True)
    entries = []
    short = 0
    total = spec.num_images + spec.num_val
    for i in range(total):
        image, labels, _ = render_image(spec, i)
        rel = f"images/{i:05d}.prnt"
        write_tensor(out / rel, image[None])
        if ppm:
            export_ppm(image, out / "ppm" / f"{i:05d}.ppm")
        entries.append({
            "image": rel,
            "split": "train" if i < spec.num_images else "val",
            "labels": [{"class": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in labels],
        })
        lo_count = spec.objects_per_image[0]
        if len(labels) < lo_count:
            short += 1
    if short:
        log.warning("gen_dataset: %d image(s) hold fewer objects than requested", short)
    manifest = {"version": MANIFEST_VERSION, "spec": spec.to_dict(), "images": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """A generated dataset directory with an in-memory image cache."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(path.read_text())
        except FileNotFoundError:
            raise TensorFileError(f"{path}: file not found (byte offset 0)") from None
        except json.JSONDecodeError as e:
            raise TensorFileError(f"{path}: invalid JSON at byte offset {e.pos}") from None
        self.spec = DatasetSpec.from_dict(self.manifest["spec"])
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.manifest["images"])

    @property
    def image_size(self) -> int:
        return self.spec.image_size

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, e in enumerate(self.manifest["images"]) if split is None or e.get("split") == split]

    def labels(self, i: int) -> list[BoxLabel]:
        return [BoxLabel(d["class"], d["cx"], d["cy"], d["w"], d["h"]) for d in self.manifest["images"][i]["labels"]]

    def image(self, i: int) -> np.ndarray:
        if not 0 <= i < len(self):
            raise IndexError(f"image index {i} out of range for {len(self)} image(s)")
        if i not in self._cache:
            arr = read_tensor(self.root / self.manifest["images"][i]["image"])
            self._cache[i] = arr[0]
        return self._cache[i]

    def load_batch(self, indices) -> tuple[Tensor, list[list[BoxLabel]]]:
        return load_batch(self, indices)


def load_batch(dataset: Dataset, indices) -> tuple[Tensor, list[list[BoxLabel]]]:
    """Stack images into N x 3 x H x W and group labels per image."""
    indices = list(indices)
    for i in indices:
        if not 0 <= i < len(dataset):
            raise IndexError(f"image index {i} out of range for {len(dataset)} image(s)")
    images = np.stack([dataset.image(i) for i in indices]) if indices else np.zeros(
        (0, 3, dataset.image_size, dataset.image_size), np.float32)
    return Tensor(images), [dataset.labels(i) for i in indices]


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_ppm(image: np.ndarray, path) -> None:
    """Binary P6 from a (3, H, W) array in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    _, H, W = img.shape
    payload = _quantize(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + payload)


def export_pgm(gray: np.ndarray, path) -> None:
    """Binary P5 from an (H, W) array in [0, 1]."""
    g = np.asarray(gray)
    H, W = g.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + _quantize(g).tobytes())


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1] from a binary P6 file."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise TensorFileError(f"{path}: expected an 8-bit P6 header at byte offset 0")
    W, H = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, np.uint8, count=3 * H * W, offset=pos + 1)
    return (data.reshape(H, W, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)
