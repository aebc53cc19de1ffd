"""Deterministic synthetic scenes: shapes on textured backgrounds with object masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .config import SHAPE_KINDS
from .tensor import RngState

# base colours per shape kind; objects jitter around these
_KIND_COLORS = {
    "disk": (0.85, 0.30, 0.25),
    "rectangle": (0.25, 0.45, 0.85),
    "triangle": (0.30, 0.75, 0.30),
}


class GenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    kinds: tuple = SHAPE_KINDS
    min_objects: int = 1
    max_objects: int = 3
    min_object_size: int = 12
    max_object_size: int = 28
    texture: float = 0.08
    jitter: float = 0.08
    seed_size: int = 4
    max_tries: int = 200

    def validate(self):
        if self.height % self.seed_size or self.width % self.seed_size:
            raise ValueError(f"image {self.height}x{self.width} not divisible by seed size {self.seed_size}")
        if self.min_object_size <= self.seed_size:
            raise ValueError(f"min object size {self.min_object_size} must exceed seed size {self.seed_size}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.min_object_size > self.max_object_size:
            raise ValueError("min_object_size exceeds max_object_size")
        if self.max_object_size + 2 > min(self.height, self.width):
            raise ValueError("objects cannot fit inside the image")
        return self

    @property
    def n_classes(self):
        """Segmentation classes: background plus one per kind."""
        return len(self.kinds) + 1


@dataclass
class LabeledScene:
    image: np.ndarray          # H x W x 3 in [0, 1]
    label: int                 # kind id of the largest object (0 when empty)
    mask: np.ndarray           # H x W int class ids, 0 = background
    objects: list = field(default_factory=list)   # H x W bool masks
    kinds: list = field(default_factory=list)     # class id per object
    params: list = field(default_factory=list)    # raster parameters per object

    def instance_mask(self):
        out = np.zeros(self.mask.shape, dtype=np.uint8)
        for i, m in enumerate(self.objects, 1):
            out[m] = i
        return out


def _value_noise(rng, h, w, cell=8):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(-1.0, 1.0, (gh, gw))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _pixel_centers(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def raster_disk(h, w, cy, cx, r):
    yy, xx = _pixel_centers(h, w)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def raster_rectangle(h, w, top, left, rh, rw):
    m = np.zeros((h, w), dtype=bool)
    m[top:top + rh, left:left + rw] = True
    return m


def raster_triangle(h, w, pts):
    """Pixels whose centres lie inside the triangle ``pts`` ((y, x) triples)."""
    yy, xx = _pixel_centers(h, w)
    (y1, x1), (y2, x2), (y3, x3) = pts

    def side(ya, xa, yb, xb):
        return (xx - xa) * (yb - ya) - (yy - ya) * (xb - xa)

    d1 = side(y1, x1, y2, x2)
    d2 = side(y2, x2, y3, x3)
    d3 = side(y3, x3, y1, x1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _draw(rng, spec, kind, size):
    h, w = spec.height, spec.width
    if kind == "disk":
        r = size / 2.0
        cy = rng.uniform(r + 1, h - r - 1)
        cx = rng.uniform(r + 1, w - r - 1)
        return raster_disk(h, w, cy, cx, r), {"cy": cy, "cx": cx, "r": r}
    if kind == "rectangle":
        lo = spec.seed_size + 1
        rh = int(rng.integers(max(lo, int(size * 0.6)), size + 1))
        rw = int(rng.integers(max(lo, int(size * 0.6)), size + 1))
        top = int(rng.integers(1, h - rh))
        left = int(rng.integers(1, w - rw))
        return raster_rectangle(h, w, top, left, rh, rw), {"top": top, "left": left, "h": rh, "w": rw}
    if kind == "triangle":
        top = rng.uniform(1, h - size - 1)
        left = rng.uniform(1, w - size - 1)
        apex = left + rng.uniform(0.2, 0.8) * size
        pts = ((top, apex), (top + size, left + size), (top + size, left))
        return raster_triangle(h, w, pts), {"pts": pts}
    raise ValueError(f"unknown shape kind {kind!r}")


def _bbox_ok(mask, seed_size):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return False
    return ys.max() - ys.min() + 1 > seed_size and xs.max() - xs.min() + 1 > seed_size


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= out[:, :-1].copy()
    out[:, :-1] |= out[:, 1:].copy()
    return out


def generate_scene(rng: RngState, spec: SceneSpec) -> LabeledScene:
    """Draw one scene; the first object drawn is the largest and sets the label."""
    spec.validate()
    h, w = spec.height, spec.width
    base = rng.uniform(0.35, 0.6, 3)
    image = base[None, None, :] + spec.texture * _value_noise(rng, h, w)[:, :, None]
    mask = np.zeros((h, w), dtype=np.int64)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects, kinds, params = [], [], []
    occupied = np.zeros((h, w), dtype=bool)
    mid = (spec.min_object_size + spec.max_object_size) // 2
    for i in range(n):
        kind_idx = int(rng.integers(0, len(spec.kinds)))
        kind = spec.kinds[kind_idx]
        for _ in range(spec.max_tries):
            if i == 0:
                size = int(rng.integers(mid, spec.max_object_size + 1))
            else:
                size = int(rng.integers(spec.min_object_size, max(spec.min_object_size, mid - 2) + 1))
            m, p = _draw(rng, spec, kind, size)
            if not _bbox_ok(m, spec.seed_size):
                continue
            if (m & occupied).any():
                continue
            if objects and m.sum() >= objects[0].sum():
                continue
            break
        else:
            raise GenerationError(f"could not place object {i} ({kind}) after {spec.max_tries} tries")
        occupied |= _dilate(m)
        color = np.asarray(_KIND_COLORS.get(kind, (0.5, 0.5, 0.5))) + rng.uniform(-spec.jitter, spec.jitter, 3)
        image[m] = color[None, :] + 0.5 * (image[m] - base[None, :])
        mask[m] = kind_idx + 1
        objects.append(m)
        kinds.append(kind_idx + 1)
        params.append(p)
    label = largest_object_kind(objects, kinds)
    return LabeledScene(np.clip(image, 0.0, 1.0), label, mask, objects, kinds, params)


def largest_object_kind(objects, kinds):
    """Class id of the largest object; earliest wins ties; 0 for no objects."""
    best, best_area = 0, -1
    for m, k in zip(objects, kinds):
        area = int(m.sum())
        if area > best_area:
            best, best_area = k, area
    return best


@dataclass
class Dataset:
    images: np.ndarray      # n x 3 x H x W
    labels: np.ndarray      # n
    masks: np.ndarray       # n x H x W
    objects: np.ndarray | None = None  # n x H x W instance ids (0 = none)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.masks[idx],
                       None if self.objects is None else self.objects[idx])


def make_scenes(count, spec, seed):
    root = RngState(seed)
    return [generate_scene(root.spawn(i), spec) for i in range(count)]


def scenes_to_dataset(scenes, quantized=True) -> Dataset:
    imgs = []
    for s in scenes:
        img = netpbm.dequantize(netpbm.quantize(s.image)) if quantized else s.image
        imgs.append(img.transpose(2, 0, 1))
    return Dataset(np.stack(imgs), np.array([s.label for s in scenes], dtype=np.int64),
                   np.stack([s.mask for s in scenes]), np.stack([s.instance_mask() for s in scenes]))


def make_dataset(count, spec, seed) -> Dataset:
    """In-memory dataset identical to what :func:`write_dataset` + :func:`load_manifest` yield."""
    return scenes_to_dataset(make_scenes(count, spec, seed))


def write_dataset(directory, count, spec, seed):
    """Write ``images/``, ``masks/``, ``objects/`` and ``manifest.csv``; return manifest rows."""
    directory = Path(directory)
    for sub in ("images", "masks", "objects"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, scene in enumerate(make_scenes(count, spec, seed)):
        name = f"{i:04d}"
        img, msk = f"images/{name}.ppm", f"masks/{name}.pgm"
        netpbm.write_ppm(directory / img, netpbm.quantize(scene.image))
        netpbm.write_pgm(directory / msk, scene.mask.astype(np.uint8))
        netpbm.write_pgm(directory / f"objects/{name}.pgm", scene.instance_mask())
        rows.append((img, scene.label, msk))
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "label", "mask"])
        writer.writerows(rows)
    return rows


def load_manifest(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != ["image", "label", "mask"]:
        raise ManifestError(f"{path}:1: expected header 'image,label,mask'")
    images, labels, masks, objects = [], [], [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = [c.strip() for c in line.split(",")]
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        img, label, msk = parts
        try:
            label = int(label)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: label {label!r} is not an integer") from None
        for rel in (img, msk):
            if not (root / rel).is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {root / rel}")
        try:
            pix = netpbm.read_ppm(root / img)
            m = netpbm.read_pgm(root / msk)
        except netpbm.NetpbmError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        images.append(netpbm.dequantize(pix).transpose(2, 0, 1))
        labels.append(label)
        masks.append(m.astype(np.int64))
        inst = root / "objects" / Path(img).with_suffix(".pgm").name
        objects.append(netpbm.read_pgm(inst) if inst.is_file() else None)
    if not images:
        raise ManifestError(f"{path}: no records")
    obj = np.stack(objects) if all(o is not None for o in objects) else None
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), np.stack(masks), obj)

