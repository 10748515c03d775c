"""Boxes, overlap regions, rasterization and occlusion-level binning.

All boxes use integer pixel coordinates with a half-open convention: a box
``(x_min, y_min, x_max, y_max)`` covers pixel ``(row, col)`` iff
``x_min <= col < x_max`` and ``y_min <= row < y_max``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def valid(self) -> bool:
        return self.x_min < self.x_max and self.y_min < self.y_max

    @property
    def width(self) -> int:
        return max(self.x_max - self.x_min, 0)

    @property
    def height(self) -> int:
        return max(self.y_max - self.y_min, 0)

    @property
    def area(self) -> int:
        return self.width * self.height

    def clip(self, h: int, w: int) -> "Box":
        return Box(
            min(max(self.x_min, 0), w),
            min(max(self.y_min, 0), h),
            min(max(self.x_max, 0), w),
            min(max(self.y_max, 0), h),
        )

    def contains(self, row: int, col: int) -> bool:
        return self.x_min <= col < self.x_max and self.y_min <= row < self.y_max

    def contains_box(self, other: "Box") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and other.x_max <= self.x_max and other.y_max <= self.y_max)

    def center(self) -> tuple[float, float]:
        """(x, y) center in pixel-index coordinates (pixel k has center k)."""
        return ((self.x_min + self.x_max - 1) / 2.0,
                (self.y_min + self.y_max - 1) / 2.0)

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "Box":
        if len(values) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(int(v) for v in values))


def pairwise_overlap(b_i: Box, b_j: Box) -> Optional[Box]:
    """Intersection of two boxes, or ``None`` when it has zero area.

    Touching boxes (shared edge) do not overlap.
    """
    r = Box(max(b_i.x_min, b_j.x_min), max(b_i.y_min, b_j.y_min),
            min(b_i.x_max, b_j.x_max), min(b_i.y_max, b_j.y_max))
    return r if r.valid else None


def envelope_overlap_region(i: int, boxes: Sequence[Box]) -> Optional[Box]:
    """Tightest box covering every valid overlap of ``boxes[i]`` with the others.

    ``boxes`` are the amodal boxes of all instances in a scene. Returns
    ``None`` when instance ``i`` overlaps nobody.
    """
    if not 0 <= i < len(boxes):
        raise IndexError(f"instance index {i} out of range for {len(boxes)} boxes")
    parts = [pairwise_overlap(boxes[i], b) for j, b in enumerate(boxes) if j != i]
    parts = [r for r in parts if r is not None]
    if not parts:
        return None
    return Box(min(r.x_min for r in parts), min(r.y_min for r in parts),
               max(r.x_max for r in parts), max(r.y_max for r in parts))


def rasterize_box(b: Optional[Box], h: int, w: int) -> np.ndarray:
    """Boolean ``(h, w)`` bitmask of ``b`` clipped to the image. ``None`` gives zeros."""
    if h <= 0 or w <= 0:
        raise ValueError(f"grid size must be positive, got {h}x{w}")
    out = np.zeros((h, w), dtype=bool)
    if b is None:
        return out
    c = b.clip(h, w)
    if c.valid:
        out[c.y_min:c.y_max, c.x_min:c.x_max] = True
    return out


def tight_box(mask: np.ndarray) -> Optional[Box]:
    """Tight half-open bounding box of the nonzero pixels of ``mask``."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass(frozen=True)
class OcclusionLevel:
    """An occlusion bucket covering ratios in ``(lo, hi]``; ``lo == hi == 0`` is exact zero."""

    name: str
    lo: float
    hi: float

    def contains(self, ratio: float) -> bool:
        if self.hi == 0.0:
            return ratio == 0.0
        return self.lo < ratio <= self.hi


KINS_BINS: tuple[OcclusionLevel, ...] = (
    OcclusionLevel("FG-0", 0.0, 0.0),
    OcclusionLevel("FG-1", 0.0, 0.3),
    OcclusionLevel("FG-2", 0.3, 0.6),
    OcclusionLevel("FG-3", 0.6, 0.9),
)

COCOA_BINS: tuple[OcclusionLevel, ...] = (
    OcclusionLevel("FG-0", 0.0, 0.0),
    OcclusionLevel("FG-1", 0.0, 0.2),
    OcclusionLevel("FG-2", 0.2, 0.4),
    OcclusionLevel("FG-3", 0.4, 0.7),
)


def validate_bins(bins: Sequence[OcclusionLevel]) -> None:
    if not bins:
        raise ValueError("at least one occlusion bin is required")
    if bins[0].lo != 0.0 or bins[0].hi != 0.0:
        raise ValueError("the first bin must be the exact-zero bin")
    for prev, cur in zip(bins, bins[1:]):
        if cur.lo != prev.hi or not cur.lo < cur.hi:
            raise ValueError(f"bins {prev.name} and {cur.name} are not contiguous and ordered")


def level_for_ratio(ratio: float, bins: Sequence[OcclusionLevel] = KINS_BINS) -> OcclusionLevel:
    """Bin containing ``ratio``; ratios above the top bin clamp into it."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"occlusion ratio {ratio} outside [0, 1]")
    for b in bins:
        if b.contains(ratio):
            return b
    if ratio > bins[-1].hi:
        return bins[-1]
    raise ValueError(f"ratio {ratio} falls in no bin")


def occlusion_ratio(visible_gt: np.ndarray, amodal_gt: np.ndarray) -> float:
    visible_gt = np.asarray(visible_gt, dtype=bool)
    amodal_gt = np.asarray(amodal_gt, dtype=bool)
    if visible_gt.shape != amodal_gt.shape:
        raise ValueError(f"shape mismatch {visible_gt.shape} vs {amodal_gt.shape}")
    n_amodal = int(amodal_gt.sum())
    if n_amodal == 0:
        raise ValueError("amodal mask is empty")
    if np.any(visible_gt & ~amodal_gt):
        raise ValueError("visible mask has pixels outside the amodal mask")
    n_visible = int(visible_gt.sum())
    return (n_amodal - n_visible) / n_amodal


def occlusion_level(visible_gt: np.ndarray, amodal_gt: np.ndarray,
                    bins: Sequence[OcclusionLevel] = KINS_BINS) -> OcclusionLevel:
    return level_for_ratio(occlusion_ratio(visible_gt, amodal_gt), bins)


def level_by_name(name: str, bins: Sequence[OcclusionLevel] = KINS_BINS) -> OcclusionLevel:
    for b in bins:
        if b.name == name:
            return b
    raise KeyError(f"unknown occlusion level {name!r}")
