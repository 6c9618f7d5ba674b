"""Region algebra: anchors, IoU, NMS, clipping and bilinear crop-resize."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in full-image pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise RegionError(f"degenerate region {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def full_image(cls, width: float, height: float) -> "Region":
        return cls(0.0, 0.0, float(width), float(height))


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor pyramid layout.

    ``levels`` holds (feature-map side, anchor scale in pixels), finest map
    first; ``ratios`` holds (width, height) pairs applied at constant area
    scale**2.
    """

    input_size: int
    levels: tuple[tuple[int, float], ...]
    ratios: tuple[tuple[float, float], ...] = ((1, 1), (3, 2), (2, 3))

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple((int(s), float(c)) for s, c in self.levels))
        object.__setattr__(self, "ratios", tuple((float(w), float(h)) for w, h in self.ratios))
        if not self.levels or not self.ratios:
            raise ValueError("anchor spec needs at least one level and one ratio")
        sides = [s for s, _ in self.levels]
        if sides != sorted(sides, reverse=True) or len(set(sides)) != len(sides):
            raise ValueError(f"levels must have strictly descending map sides, got {sides}")
        for side, scale in self.levels:
            if side <= 0 or scale <= 0:
                raise ValueError("map sides and scales must be positive")
            if self.input_size % side:
                raise ValueError(f"map side {side} does not divide input size {self.input_size}")
        for w, h in self.ratios:
            if w <= 0 or h <= 0:
                raise ValueError("ratios must be positive")

    @property
    def sides(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.levels)

    @property
    def count(self) -> int:
        return sum(s * s for s in self.sides) * len(self.ratios)

    def stride(self, side: int) -> float:
        return self.input_size / side


PAPER_ANCHORS = AnchorSpec(448, ((14, 48), (7, 96), (4, 192)))
# Reference desk layout (252 anchors); same maps as DESK_ANCHORS, smaller scales.
DESK_ANCHORS_SMALL = AnchorSpec(64, ((8, 8), (4, 16), (2, 32)))
# Training default at desk scale; scales sized to the 16 px informative patch.
DESK_ANCHORS = AnchorSpec(64, ((8, 16), (4, 24), (2, 40)))


@dataclass
class AnchorSet:
    """Enumerated anchors as an (A, 4) array plus bookkeeping."""

    boxes: np.ndarray
    # index into the full (level, row, col, ratio) enumeration for each kept box
    slots: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.boxes)

    def region(self, i: int) -> Region:
        return Region(*map(float, self.boxes[i]))

    def regions(self) -> list[Region]:
        return [self.region(i) for i in range(len(self))]


def generate_anchors(spec: AnchorSpec) -> AnchorSet:
    """Enumerate anchors in (level, row, column, ratio) order, clipped to the image.

    Centers sit at ((col + 0.5) * stride, (row + 0.5) * stride). Anchors that
    clip to zero area are dropped and counted in ``dropped``.
    """
    boxes = []
    size = float(spec.input_size)
    for side, scale in spec.levels:
        stride = spec.stride(side)
        centers = (np.arange(side) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        for_level = []
        for rw, rh in spec.ratios:
            w = scale * math.sqrt(rw / rh)
            h = scale * math.sqrt(rh / rw)
            for_level.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1))
        # (side, side, ratios, 4) -> level-major, row, col, ratio
        boxes.append(np.stack(for_level, axis=2).reshape(-1, 4))
    allb = np.concatenate(boxes)
    allb[:, [0, 2]] = np.clip(allb[:, [0, 2]], 0, size)
    allb[:, [1, 3]] = np.clip(allb[:, [1, 3]], 0, size)
    keep = (allb[:, 2] > allb[:, 0]) & (allb[:, 3] > allb[:, 1])
    slots = np.nonzero(keep)[0]
    return AnchorSet(allb[keep], slots, int((~keep).sum()))


def iou(a: Region, b: Region) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class Proposal:
    region: Region
    informativeness: float
    anchor_index: int
    confidence: float | None = field(default=None)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS over arrays; returns kept row indices, best first.

    Order is descending score with ties to the lower index. A box is
    discarded when its IoU with an already-kept box exceeds ``threshold``.
    Stops early once ``max_keep`` boxes survive (the result is then a prefix
    of the full NMS output).
    """
    if not 0 < threshold < 1:
        raise ValueError(f"NMS threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.lexsort((np.arange(n), -scores.astype(np.float64)))
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(n, dtype=bool)
    keep = []
    limit = n if max_keep is None else max_keep
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(i)
        if len(keep) >= limit:
            break
        rest = order[pos + 1 :]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ious = inter / (areas[i] + areas[rest] - inter)
        alive[pos + 1 :] &= ious <= threshold
    return np.asarray(keep, dtype=np.intp)


def nms(proposals: Sequence[Proposal], threshold: float = 0.25) -> list[Proposal]:
    """Greedy informativeness-ordered NMS over :class:`Proposal` objects."""
    if not proposals:
        if not 0 < threshold < 1:
            raise ValueError(f"NMS threshold must lie in (0, 1), got {threshold}")
        return []
    order = sorted(range(len(proposals)), key=lambda i: proposals[i].anchor_index)
    props = [proposals[i] for i in order]
    boxes = np.array([p.region.as_tuple() for p in props])
    scores = np.array([p.informativeness for p in props])
    return [props[i] for i in nms_indices(boxes, scores, threshold)]


def clip_region(region: Region | Sequence[float], width: float, height: float) -> Region:
    x0, y0, x1, y1 = region.as_tuple() if isinstance(region, Region) else region
    cx0, cx1 = min(max(x0, 0.0), width), min(max(x1, 0.0), width)
    cy0, cy1 = min(max(y0, 0.0), height), min(max(y1, 0.0), height)
    if not (cx0 < cx1 and cy0 < cy1):
        raise RegionError(f"region {(x0, y0, x1, y1)} lies outside the {width}x{height} image")
    return Region(float(cx0), float(cy0), float(cx1), float(cy1))


def _sample_grid(lo: np.ndarray, hi: np.ndarray, out: int, limit: int):
    """Corner-aligned sample positions over pixel span [lo, hi) for each row."""
    # the first and last output samples land on the centres of the first and
    # last covered pixels: lo and hi - 1 in index space
    # k * span / (out - 1) rather than linspace * span: exact for aligned crops
    span = np.maximum(hi - lo - 1.0, 0.0)
    pos = lo[:, None] + np.arange(out)[None, :] * span[:, None] / (out - 1)
    pos = np.clip(pos, 0.0, limit - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, limit - 1)
    frac = pos - i0
    return i0, i1, frac


def crop_resize_batch(image: np.ndarray, boxes: np.ndarray, out_side: int) -> np.ndarray:
    """Bilinear crop of each (x0, y0, x1, y1) row of ``boxes`` from an HxWxC image.

    Returns (n, out_side, out_side, C) in the image dtype.
    """
    if out_side < 2:
        raise ValueError("output side must be at least 2")
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, out_side, out_side, img.shape[2]), dtype=img.dtype)
    bad = (boxes[:, 0] >= w) | (boxes[:, 1] >= h) | (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0) | (
        boxes[:, 2] <= boxes[:, 0]
    ) | (boxes[:, 3] <= boxes[:, 1])
    if bad.any():
        raise RegionError(f"region {tuple(boxes[np.argmax(bad)])} lies outside the {w}x{h} image")
    boxes = boxes.copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    xi0, xi1, fx = _sample_grid(boxes[:, 0], boxes[:, 2], out_side, w)
    yi0, yi1, fy = _sample_grid(boxes[:, 1], boxes[:, 3], out_side, h)
    data = img.astype(np.float64)
    r0 = data[yi0[:, :, None], xi0[:, None, :]]
    r1 = data[yi0[:, :, None], xi1[:, None, :]]
    r2 = data[yi1[:, :, None], xi0[:, None, :]]
    r3 = data[yi1[:, :, None], xi1[:, None, :]]
    ax = fx[:, None, :, None]
    ay = fy[:, :, None, None]
    top = r0 + (r1 - r0) * ax
    bottom = r2 + (r3 - r2) * ax
    return (top + (bottom - top) * ay).astype(img.dtype)


def crop_resize(image: np.ndarray, region: Region, out_side: int) -> np.ndarray:
    """Bilinear, corner-aligned resample of ``region`` to out_side x out_side.

    The crop is taken from an HxWxC array and carries no gradient with
    respect to the region coordinates.
    """
    return crop_resize_batch(image, np.array([region.as_tuple()]), out_side)[0]


PROPOSAL_CSV_HEADER = ("anchor_index", "x_min", "y_min", "x_max", "y_max", "informativeness", "confidence")


def proposals_to_csv(proposals: Iterable[Proposal]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PROPOSAL_CSV_HEADER)
    for p in proposals:
        r = p.region
        writer.writerow(
            [
                p.anchor_index,
                repr(float(r.x_min)),
                repr(float(r.y_min)),
                repr(float(r.x_max)),
                repr(float(r.y_max)),
                repr(float(p.informativeness)),
                "" if p.confidence is None else repr(float(p.confidence)),
            ]
        )
    return buf.getvalue()


def proposals_from_csv(text: str) -> list[Proposal]:
    rows = csv.DictReader(io.StringIO(text))
    if tuple(rows.fieldnames or ()) != PROPOSAL_CSV_HEADER:
        raise ValueError(f"unexpected proposal CSV header {rows.fieldnames}")
    out = []
    for row in rows:
        region = Region(float(row["x_min"]), float(row["y_min"]), float(row["x_max"]), float(row["y_max"]))
        conf = row["confidence"]
        out.append(
            Proposal(region, float(row["informativeness"]), int(row["anchor_index"]), float(conf) if conf else None)
        )
    return out
