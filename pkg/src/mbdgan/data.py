"""Image datasets: directory loading, synthetic shapes, resize pipeline, object matching."""

from __future__ import annotations

import json
import logging
import queue
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor

log = logging.getLogger(__name__)

BACKGROUND = np.array([0.0, 0.0, 0.0], dtype=np.float32)
MASK_THRESHOLD = 0.2
MIN_COMPONENT_AREA = 6


# ---------------------------------------------------------------------------
# pixel encoding
# ---------------------------------------------------------------------------


def to_unit(u8: np.ndarray) -> np.ndarray:
    """uint8 HWC/CHW values -> float32 in [-1, 1]."""
    return np.asarray(u8, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_png(path, side: int | None = None) -> np.ndarray:
    """Decode to CHW float32 in [-1, 1], optionally resized to side x side."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        arr = np.asarray(im)
    return to_unit(arr).transpose(2, 0, 1)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def save_grid(path, rows: Sequence[np.ndarray], pad: int = 2) -> None:
    """Write a grid of CHW images; ``rows`` is a list of (n, C, H, W) stacks."""
    nrow, ncol = len(rows), max(len(r) for r in rows)
    c, h, w = rows[0].shape[1:]
    canvas = np.ones((c, nrow * (h + pad) + pad, ncol * (w + pad) + pad), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[:, y : y + h, x : x + w] = img
    write_png(path, canvas)


# ---------------------------------------------------------------------------
# directory datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    root: str
    class_names: list[str] | None = None
    image_side: int = 64
    split: tuple[float, float] = (0.8, 0.2)
    seed: int = 0


@dataclass
class LabeledImages:
    class_names: list[str]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_paths: list[str] = field(default_factory=list)
    test_paths: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def load_dataset(spec: DatasetSpec) -> LabeledImages:
    root = Path(spec.root)
    names = list(spec.class_names) if spec.class_names else sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate class names: {names}")
    if len(names) < 2:
        raise ConfigurationError(f"need at least 2 classes under {root}, found {names}")
    rng = np.random.default_rng(spec.seed)
    frac = spec.split[0] / (spec.split[0] + spec.split[1])
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for label, name in enumerate(names):
        d = root / name
        files = list_images(d) if d.is_dir() else []
        images, paths = [], []
        for f in files:
            try:
                images.append(read_png(f, spec.image_side))
                paths.append(str(f))
            except (OSError, ValueError) as exc:
                warnings.warn(f"skipping unreadable image {f}: {exc}")
        if not images:
            raise ConfigurationError(f"class {name!r} has no readable images in {d}")
        order = rng.permutation(len(images))
        n_train = int(round(frac * len(images)))
        for part, idx in (("train", order[:n_train]), ("test", order[n_train:])):
            xs, ys, ps = parts[part]
            for i in sorted(idx):
                xs.append(images[i])
                ys.append(label)
                ps.append(paths[i])

    def stack(xs):
        return np.stack(xs).astype(np.float32) if xs else np.zeros((0, 3, spec.image_side, spec.image_side), np.float32)

    tr, te = parts["train"], parts["test"]
    return LabeledImages(names, stack(tr[0]), np.array(tr[1], np.int64), stack(te[0]), np.array(te[1], np.int64),
                         tr[2], te[2])


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("disc", "triangle", "star")
PALETTES = {
    "disc": (0.85, -0.55, -0.55),
    "triangle": (-0.55, 0.85, -0.55),
    "star": (-0.55, -0.55, 0.85),
}


@dataclass
class SyntheticSpec:
    shapes: tuple[str, ...] = SHAPES
    image_side: int = 64
    max_objects: int = 3
    radius: tuple[float, float] = (6.0, 9.0)
    margin: float = 4.0
    noise: float = 0.03
    color_jitter: float = 0.1

    @property
    def num_classes(self) -> int:
        return len(self.shapes)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    images: np.ndarray
    labels: np.ndarray
    annotations: list[dict]

    def split(self, train_fraction: float, seed: int = 0) -> tuple[SyntheticDataset, SyntheticDataset]:
        order = np.random.default_rng(seed).permutation(len(self.labels))
        cut = int(round(train_fraction * len(order)))
        a, b = np.sort(order[:cut]), np.sort(order[cut:])
        return self.subset(a), self.subset(b)

    def subset(self, idx) -> SyntheticDataset:
        return SyntheticDataset(self.spec, self.images[idx], self.labels[idx], [self.annotations[i] for i in idx])


def _polygon(center, radius, rotation, shape) -> np.ndarray:
    if shape == "triangle":
        ang = rotation + np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        rad = np.full(3, radius)
    else:
        ang = rotation + np.pi / 2 + np.pi * np.arange(10) / 5
        rad = np.where(np.arange(10) % 2 == 0, radius, 0.45 * radius)
    return np.stack([center[0] + rad * np.cos(ang), center[1] - rad * np.sin(ang)], axis=1)


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorised over pixels."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x0 - x1) / (y0 - y1)
        inside ^= crosses & (px < xint)
        x0, y0 = x1, y1
    return inside


def shape_mask(shape: str, center, radius: float, rotation: float, side: int) -> np.ndarray:
    """Boolean side x side mask; pixel (row, col) has centre (x=col, y=row)."""
    py, px = np.mgrid[0:side, 0:side].astype(np.float64)
    if shape == "disc":
        return (px - center[0]) ** 2 + (py - center[1]) ** 2 <= radius**2
    return _inside_polygon(px, py, _polygon(center, radius, rotation, shape))


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    py, px = np.nonzero(mask)
    return float(px.mean()), float(py.mean())


def _place_objects(rng, spec: SyntheticSpec, count: int) -> list[tuple[tuple[float, float], float]]:
    side = spec.image_side
    for _ in range(1000):
        placed = []
        for _ in range(count):
            for _ in range(200):
                r = rng.uniform(*spec.radius)
                lo, hi = r + spec.margin, side - 1 - r - spec.margin
                c = (rng.uniform(lo, hi), rng.uniform(lo, hi))
                if all(np.hypot(c[0] - q[0], c[1] - q[1]) > r + s + 4 for q, s in placed):
                    placed.append((c, r))
                    break
        if len(placed) == count:
            return placed
    raise RuntimeError("could not place objects without overlap")


def render_image(rng, spec: SyntheticSpec, label: int, n_objects: int) -> tuple[np.ndarray, dict]:
    side = spec.image_side
    shape = spec.shapes[label]
    img = np.broadcast_to(BACKGROUND[:, None, None], (3, side, side)).astype(np.float64).copy()
    base = np.array(PALETTES.get(shape, (0.8, 0.8, 0.8)))
    centers, radii = [], []
    for center, radius in _place_objects(rng, spec, n_objects):
        rot = rng.uniform(0, 2 * np.pi)
        color = np.clip(base + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), -1, 1)
        m = shape_mask(shape, center, radius, rot, side)
        img[:, m] = color[:, None]
        centers.append([round(center[0], 4), round(center[1], 4)])
        radii.append(round(radius, 4))
    if spec.noise > 0:
        img += rng.normal(0, spec.noise, img.shape)
    ann = {"class": shape, "label": int(label), "centers": centers, "radii": radii, "count": len(centers)}
    return np.clip(img, -1, 1).astype(np.float32), ann


def synth_generate(spec: SyntheticSpec, count: int, seed: int = 0) -> SyntheticDataset:
    """Balanced dataset: image i has class i mod K and 1..max_objects objects."""
    k = spec.num_classes
    if count < k:
        raise ValueError(f"count {count} must be at least the number of classes {k}")
    rng = np.random.default_rng(seed)
    images, labels, anns = [], [], []
    for i in range(count):
        label = i % k
        img, ann = render_image(rng, spec, label, int(rng.integers(1, spec.max_objects + 1)))
        images.append(img)
        labels.append(label)
        anns.append(ann)
    return SyntheticDataset(spec, np.stack(images), np.array(labels, dtype=np.int64), anns)


def write_synthetic(ds: SyntheticDataset, root) -> Path:
    """Write class-per-directory PNGs plus ``annotations.jsonl``."""
    root = Path(root)
    for name in ds.spec.shapes:
        (root / name).mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for i, (img, ann) in enumerate(zip(ds.images, ds.annotations)):
            rel = f"{ann['class']}/img_{i:05d}.png"
            write_png(root / rel, img)
            fh.write(json.dumps({"path": rel, "class": ann["class"], "centers": ann["centers"], "count": ann["count"]}) + "\n")
    return root


def read_annotations(root) -> dict[str, dict]:
    path = Path(root) / "annotations.jsonl"
    if not path.exists():
        return {}
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[str(Path(root) / rec["path"])] = rec
    return out


# ---------------------------------------------------------------------------
# nearest-neighbour pipeline for refiner pairs
# ---------------------------------------------------------------------------


def nearest_resize(img, to_side: int):
    """src index = floor(dst * src_side / dst_side) on both spatial axes."""
    if to_side < 1:
        raise ValueError("to_side must be positive")
    if isinstance(img, Tensor):
        return ad.nearest_resize(img, to_side)
    arr = np.asarray(img)
    h, w = arr.shape[-2:]
    return arr[..., ad.nearest_index(h, to_side), :][..., ad.nearest_index(w, to_side)]


def degrade(images: np.ndarray, low_side: int) -> np.ndarray:
    side = images.shape[-1]
    return nearest_resize(nearest_resize(images, low_side), side)


def make_refiner_pairs(images: np.ndarray, low_side: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """(degraded, original) where degraded = up(down(original))."""
    return degrade(images, low_side), np.asarray(images)


# ---------------------------------------------------------------------------
# object matching
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    displacement: float  # mean over matched objects, in pixels; inf on failure
    per_object: list[float]
    count: int
    expected: int
    failure: bool = False

    @property
    def count_match(self) -> bool:
        return not self.failure and self.count == self.expected


def foreground_mask(img: np.ndarray, background=BACKGROUND, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    dev = np.abs(np.asarray(img) - np.asarray(background).reshape(-1, 1, 1))
    return dev.max(axis=0) > threshold


def component_centroids(mask: np.ndarray, min_area: int = MIN_COMPONENT_AREA) -> list[tuple[float, float]]:
    lab, n = ndimage.label(mask)
    out = []
    for i in range(1, n + 1):
        comp = lab == i
        if comp.sum() >= min_area:
            out.append(mask_centroid(comp))
    return out


def centroid_match(annotation: dict, image: np.ndarray, background=BACKGROUND, threshold: float = MASK_THRESHOLD) -> MatchResult:
    """Compare object centres in ``image`` (connected components) with ``annotation``."""
    expected = [tuple(c) for c in annotation["centers"]]
    found = component_centroids(foreground_mask(image, background, threshold))
    if not found:
        return MatchResult(float("inf"), [], 0, len(expected), failure=True)
    cost = np.array([[np.hypot(e[0] - f[0], e[1] - f[1]) for f in found] for e in expected])
    rows, cols = linear_sum_assignment(cost)
    per = [float(cost[r, c]) for r, c in zip(rows, cols)]
    return MatchResult(float(np.mean(per)), per, len(found), len(expected))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def iterate_batches(n: int, batch_size: int, order: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class Prefetcher:
    """Run ``source`` in a worker thread behind a bounded queue.

    The producer blocks once ``depth`` items are waiting, so memory stays
    bounded; items arrive in the original order.
    """

    _DONE = object()

    def __init__(self, source: Iterable, depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._err: BaseException | None = None
        self._thread = threading.Thread(target=self._run, args=(iter(source),), daemon=True)
        self._thread.start()

    def _run(self, it):
        try:
            for item in it:
                self._q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            self._err = exc
        finally:
            self._q.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                if self._err is not None:
                    raise self._err
                return
            yield item
