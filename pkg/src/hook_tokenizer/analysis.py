"""Token regions, cover/overlap predicates and the four token-object scenarios.

A token's region is the set of pixels whose seed gives that token the largest
attention weight (ties go to the lowest token id). Regions of all tokens
partition the image.
"""

from __future__ import annotations

import colorsys
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .tensor import ContractError, DimensionError, Tensor


class Scenario(str, enum.Enum):
    SAME_OBJECT_SAME_TOKEN = "SameObjectSameToken"
    SAME_OBJECT_MULTIPLE_TOKENS = "SameObjectMultipleTokens"
    SAME_TOKEN_MULTIPLE_OBJECTS = "SameTokenMultipleObjects"
    MULTIPLE_TOKENS_MULTIPLE_OBJECTS = "MultipleTokensMultipleObjects"
    UNCLASSIFIED = "Unclassified"


@dataclass
class RegionAssignment:
    seed_tokens: np.ndarray   # rows x cols token id per seed
    n_tokens: int
    seed_size: int

    @property
    def pixel_labels(self) -> np.ndarray:
        s = self.seed_size
        return np.repeat(np.repeat(self.seed_tokens, s, axis=0), s, axis=1)

    def masks(self) -> list:
        labels = self.pixel_labels
        return [labels == t for t in range(self.n_tokens)]

    def pixel_counts(self) -> np.ndarray:
        return np.bincount(self.pixel_labels.reshape(-1), minlength=self.n_tokens)


def region_of_token(amap, rows, cols, seed_size) -> RegionAssignment:
    """Hard-assign each seed to the token with the largest attention weight."""
    a = amap.data if isinstance(amap, Tensor) else np.asarray(amap, dtype=float)
    if a.ndim != 2 or a.shape[1] != rows * cols:
        raise DimensionError(f"attention map {a.shape} does not match a {rows}x{cols} seed grid")
    return RegionAssignment(a.argmax(axis=0).reshape(rows, cols), a.shape[0], seed_size)


def _check(region, obj):
    region = np.asarray(region, dtype=bool)
    obj = np.asarray(obj, dtype=bool)
    if region.shape != obj.shape:
        raise DimensionError(f"mask extents differ: {region.shape} vs {obj.shape}")
    return region, obj


def covers(region, obj) -> bool:
    """The object lies entirely inside the region."""
    region, obj = _check(region, obj)
    return not (obj & ~region).any()


def overlaps(region, obj) -> bool:
    """The region and the object share at least one pixel."""
    region, obj = _check(region, obj)
    return bool((region & obj).any())


def relation_tables(regions, objects):
    """Boolean ``cover`` and ``overlap`` matrices, regions x objects."""
    n, k = len(regions), len(objects)
    cov = np.zeros((n, k), dtype=bool)
    ov = np.zeros((n, k), dtype=bool)
    for i, r in enumerate(regions):
        for j, o in enumerate(objects):
            cov[i, j] = covers(r, o)
            ov[i, j] = overlaps(r, o)
    return cov, ov


def background_tokens(regions, objects) -> list:
    """Tokens whose region overlaps no object."""
    _, ov = relation_tables(regions, objects)
    return [i for i in range(len(regions)) if not ov[i].any()]


def scenario_matches(regions, objects) -> dict:
    """Evaluate each of the four scenario definitions independently."""
    if len(objects) == 0:
        raise ContractError("scenario classification needs at least one object")
    cov, ov = relation_tables(regions, objects)
    foreground = ov.any(axis=1)
    n_cov = cov.sum(axis=1)
    n_ov = ov.sum(axis=1)
    fg_cov = n_cov[foreground]
    return {
        # excluding background tokens, every region covers exactly one object
        Scenario.SAME_OBJECT_SAME_TOKEN: bool(fg_cov.size and (fg_cov == 1).all()),
        # no region covers an object and each region overlaps at most one
        Scenario.SAME_OBJECT_MULTIPLE_TOKENS: bool(not cov.any() and (n_ov <= 1).all()),
        # excluding background tokens, every region covers at least two objects
        Scenario.SAME_TOKEN_MULTIPLE_OBJECTS: bool(fg_cov.size and (fg_cov >= 2).all()),
        # some region overlaps two or more objects while covering at most one
        Scenario.MULTIPLE_TOKENS_MULTIPLE_OBJECTS: bool(((n_ov >= 2) & (n_cov <= 1)).any()),
    }


def classify_scenario(regions, objects) -> Scenario:
    """The single matching scenario, or ``UNCLASSIFIED`` when zero or several match."""
    hits = [s for s, ok in scenario_matches(regions, objects).items() if ok]
    return hits[0] if len(hits) == 1 else Scenario.UNCLASSIFIED


@dataclass
class HomogeneityScores:
    fragmentation: list       # per object: foreground regions overlapping it
    purity: dict              # per foreground region id: largest single-object share
    mean_fragmentation: float
    mean_inverse_fragmentation: float
    mean_purity: float


def homogeneity_score(regions, objects) -> HomogeneityScores:
    frag = []
    for o in objects:
        frag.append(sum(1 for r in regions if overlaps(r, o)))
    purity = {}
    for i, r in enumerate(regions):
        areas = [int((r & np.asarray(o, dtype=bool)).sum()) for o in objects]
        total = sum(areas)
        if total:
            purity[i] = max(areas) / total
    f = np.array(frag, dtype=float)
    return HomogeneityScores(
        frag,
        purity,
        float(f.mean()) if f.size else 0.0,
        float((1.0 / f[f > 0]).mean()) if (f > 0).any() else 0.0,
        float(np.mean(list(purity.values()))) if purity else 0.0,
    )


def objects_from_instance_mask(instance) -> list:
    """Split an instance-id mask (0 = none) into boolean object masks ordered by id."""
    instance = np.asarray(instance)
    return [instance == i for i in np.unique(instance) if i != 0]


# --------------------------------------------------------------- rendering


def _make_palette(n=64):
    colors = []
    for i in range(n):
        hue = (i * 0.618033988749895) % 1.0
        sat = (0.55, 0.85, 0.7, 1.0)[i % 4]
        val = (0.95, 0.7, 0.85, 0.55)[(i // 4) % 4]
        colors.append(tuple(int(round(c * 255)) for c in colorsys.hsv_to_rgb(hue, sat, val)))
    return np.array(colors, dtype=np.uint8)


PALETTE = _make_palette()


def render_region_map(assignment: RegionAssignment, palette=PALETTE):
    """Colour each pixel by its token; returns ``(P6 bytes, legend text)``.

    Token ids beyond the palette size cycle through it.
    """
    palette = np.asarray(palette, dtype=np.uint8)
    labels = assignment.pixel_labels
    image = palette[labels % len(palette)]
    legend = "".join(
        "{},{},{},{}\n".format(t, *palette[t % len(palette)].tolist()) for t in range(assignment.n_tokens))
    return netpbm.encode_ppm(image), legend


def legend_path(map_path) -> Path:
    p = Path(map_path)
    return p.with_name(p.stem + ".legend.txt")


def write_region_map(path, assignment: RegionAssignment, palette=PALETTE):
    data, legend = render_region_map(assignment, palette)
    Path(path).write_bytes(data)
    legend_path(path).write_text(legend)
    return legend_path(path)


def format_report(label: Scenario, scores: HomogeneityScores) -> str:
    lines = [f"scenario: {label.value}"]
    lines += [f"object {j} fragmentation: {f}" for j, f in enumerate(scores.fragmentation)]
    lines += [f"region {i} purity: {p!r}" for i, p in sorted(scores.purity.items())]
    lines.append(f"mean fragmentation: {scores.mean_fragmentation!r}")
    lines.append(f"mean inverse fragmentation: {scores.mean_inverse_fragmentation!r}")
    lines.append(f"mean purity: {scores.mean_purity!r}")
    return "\n".join(lines) + "\n"
