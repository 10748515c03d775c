"""Synthetic occluded scenes with paired visible/amodal annotations.

Instances are placed front to back: each new instance sits behind all
previously placed ones, so its occlusion ratio is fixed at placement time and
can be resampled until it lands in a target bin. Rendering then paints the
instances back to front.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    KINS_BINS,
    Box,
    OcclusionLevel,
    envelope_overlap_region,
    level_for_ratio,
    occlusion_ratio,
    rasterize_box,
    tight_box,
    validate_bins,
)

SHAPES = ("ellipse", "rectangle", "polygon", "vehicle")


@dataclass
class InstanceAnnotation:
    class_label: int
    visible_box: Box
    amodal_box: Box
    visible_mask: np.ndarray
    amodal_mask: np.ndarray
    occlusion_level: OcclusionLevel
    occlusion_ratio: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, InstanceAnnotation):
            return NotImplemented
        return (self.class_label == other.class_label
                and self.visible_box == other.visible_box
                and self.amodal_box == other.amodal_box
                and self.occlusion_level == other.occlusion_level
                and np.array_equal(self.visible_mask, other.visible_mask)
                and np.array_equal(self.amodal_mask, other.amodal_mask))


@dataclass
class SceneAnnotation:
    image_id: str
    height: int
    width: int
    instances: list[InstanceAnnotation] = field(default_factory=list)

    def amodal_boxes(self) -> list[Box]:
        return [inst.amodal_box for inst in self.instances]


@dataclass
class GenConfig:
    height: int = 64
    width: int = 64
    instances_min: int = 2
    instances_max: int = 4
    shape_weights: dict = field(default_factory=lambda: {s: 1.0 for s in SHAPES})
    level_distribution: tuple = (0.4, 0.2, 0.2, 0.2)
    bins: tuple = KINS_BINS
    size_min: int = 16
    size_max: int = 30
    color_noise: float = 0.02
    background_noise: float = 0.02
    min_color_distance: float = 0.35
    min_visible_pixels: int = 12
    max_attempts: int = 50
    n_distractors: int = 0
    seed: int = 0

    def __post_init__(self):
        self.level_distribution = tuple(float(p) for p in self.level_distribution)
        self.bins = tuple(b if isinstance(b, OcclusionLevel) else OcclusionLevel(*b) for b in self.bins)
        validate_bins(self.bins)
        if len(self.level_distribution) != len(self.bins):
            raise ValueError("level_distribution needs one entry per occlusion bin")
        if abs(sum(self.level_distribution) - 1.0) > 1e-9 or min(self.level_distribution) < 0:
            raise ValueError("level_distribution must be a probability vector")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ValueError("need 1 <= instances_min <= instances_max")
        if not 4 <= self.size_min <= self.size_max <= min(self.height, self.width):
            raise ValueError("object size range must fit the image")
        unknown = set(self.shape_weights) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        if sum(self.shape_weights.values()) <= 0:
            raise ValueError("shape_weights must have positive mass")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bins"] = [[b.name, b.lo, b.hi] for b in self.bins]
        d["level_distribution"] = list(self.level_distribution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "bins" in d:
            d["bins"] = tuple(OcclusionLevel(*b) for b in d["bins"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def behind_distribution(self) -> np.ndarray:
        """Target-level distribution for non-front instances.

        The front instance of every scene is necessarily unoccluded, so the
        zero-occlusion mass is reduced to keep the overall histogram on target.
        """
        n = np.arange(self.instances_min, self.instances_max + 1)
        front_share = 1.0 / n.mean()
        p = np.asarray(self.level_distribution)
        if front_share >= 1.0:
            return p.copy()
        q = p / (1.0 - front_share)
        q[0] = max(p[0] - front_share, 0.0) / (1.0 - front_share)
        return q / q.sum()


# ---------------------------------------------------------------------------
# shape rasterization
# ---------------------------------------------------------------------------

def _grid(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _ellipse(h, w, cx, cy, rx, ry, theta):
    yy, xx = _grid(h, w)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _convex_polygon(h, w, pts):
    """Pixels whose centers lie inside the counter-clockwise convex polygon ``pts``."""
    yy, xx = _grid(h, w)
    inside = np.ones((h, w), dtype=bool)
    for (x1, y1), (x2, y2) in zip(pts, np.roll(pts, -1, axis=0)):
        inside &= (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1) >= 0
    return inside


def _ccw(pts):
    pts = np.asarray(pts, dtype=np.float64)
    area = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    return pts if area > 0 else pts[::-1]


def draw_shape(kind: str, h: int, w: int, cx: float, cy: float, size: float,
               rng: np.random.Generator) -> np.ndarray:
    """Rasterize one shape of roughly ``size`` pixels across centered at (cx, cy)."""
    half = size / 2.0
    if kind == "ellipse":
        aspect = rng.uniform(0.55, 1.0)
        return _ellipse(h, w, cx, cy, half, half * aspect, rng.uniform(0, math.pi))
    if kind == "rectangle":
        aspect = rng.uniform(0.5, 1.0)
        if rng.random() < 0.5:
            rx, ry = half, half * aspect
        else:
            rx, ry = half * aspect, half
        yy, xx = _grid(h, w)
        return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
    if kind == "polygon":
        k = int(rng.integers(5, 8))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radii = half * rng.uniform(0.75, 1.0, size=k)
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        return _convex_polygon(h, w, _ccw(pts))
    if kind == "vehicle":
        # body box, a cabin trapezoid on top and two wheels
        bw, bh = half, half * 0.42
        body_top = cy - bh * 0.4
        yy, xx = _grid(h, w)
        body = (np.abs(xx - cx) <= bw) & (yy >= body_top) & (yy <= body_top + 2 * bh * 0.7)
        shift = rng.uniform(-0.15, 0.15) * bw
        cab = _ccw([(cx - 0.6 * bw + shift, body_top), (cx + 0.6 * bw + shift, body_top),
                    (cx + 0.35 * bw + shift, body_top - 1.1 * bh),
                    (cx - 0.35 * bw + shift, body_top - 1.1 * bh)])
        wheel_r = bh * 0.55
        wy = body_top + 2 * bh * 0.7
        wheels = ((xx - (cx - 0.55 * bw)) ** 2 + (yy - wy) ** 2 <= wheel_r ** 2) | \
                 ((xx - (cx + 0.55 * bw)) ** 2 + (yy - wy) ** 2 <= wheel_r ** 2)
        return body | _convex_polygon(h, w, cab) | wheels
    raise ValueError(f"unknown shape {kind!r}")


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _sample_colors(rng, n, min_dist, background):
    colors = []
    for _ in range(n):
        best, best_d = None, -1.0
        for _ in range(200):
            c = rng.uniform(0.05, 0.95, size=3)
            d = min(np.linalg.norm(c - o) for o in colors + [background])
            if d >= min_dist:
                best = c
                break
            if d > best_d:
                best, best_d = c, d
        colors.append(best)
    return colors


def _placement(rng, cfg: GenConfig, kind: str, occluders: list, union: np.ndarray,
               target: OcclusionLevel):
    """One candidate (mask, ratio) for an instance behind ``union``; None if it
    does not fit in the image."""
    h, w = cfg.height, cfg.width
    if target.hi == 0.0 or not occluders:
        size = rng.uniform(cfg.size_min, cfg.size_max)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    else:
        anchor_mask, anchor_size = occluders[int(rng.integers(len(occluders)))]
        mid = 0.5 * (target.lo + min(target.hi, 1.0))
        # heavier occlusion needs a smaller object close to its occluder
        size = rng.uniform(cfg.size_min, cfg.size_max) * (1.0 - 0.5 * mid)
        ys, xs = np.nonzero(anchor_mask)
        ax, ay = xs.mean(), ys.mean()
        reach = 0.5 * (anchor_size + size)
        dist = reach * rng.uniform(0.0, 1.0) * (1.0 - mid) ** 0.7
        ang = rng.uniform(0, 2 * math.pi)
        cx, cy = ax + dist * math.cos(ang), ay + dist * math.sin(ang)
    mask = draw_shape(kind, h, w, cx, cy, size, rng)
    if mask.sum() < cfg.min_visible_pixels * 3:
        return None
    # whole object must be inside the image; reject touching the border
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        return None
    n = int(mask.sum())
    visible = mask & ~union
    if int(visible.sum()) < cfg.min_visible_pixels:
        return None
    return mask, (n - int(visible.sum())) / n, size


def _bin_distance(ratio: float, b: OcclusionLevel) -> float:
    if b.contains(ratio):
        return 0.0
    if b.hi == 0.0:
        return ratio
    return min(abs(ratio - b.lo), abs(ratio - b.hi)) + (1e-9 if ratio == b.lo else 0.0)


def generate_scene(cfg: GenConfig, seed: int, image_id: Optional[str] = None,
                   index: int = 0) -> tuple[np.ndarray, SceneAnnotation]:
    """Render one scene; returns an ``(H, W, 3)`` uint8 image and its annotation.

    The RNG stream is derived from ``(seed, index)`` only, so scenes can be
    generated in any order or in parallel.
    """
    rng = scene_rng(seed, index)
    h, w = cfg.height, cfg.width
    image_id = image_id or f"scene_{index:06d}"
    kinds = list(cfg.shape_weights)
    kind_p = np.array([cfg.shape_weights[k] for k in kinds], dtype=np.float64)
    kind_p /= kind_p.sum()
    behind_p = cfg.behind_distribution()

    n_inst = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    placed: list[tuple[str, np.ndarray]] = []
    occluders: list[tuple[np.ndarray, float]] = []
    union = np.zeros((h, w), dtype=bool)
    for k in range(n_inst):
        kind = kinds[int(rng.choice(len(kinds), p=kind_p))]
        target = cfg.bins[0] if k == 0 else cfg.bins[int(rng.choice(len(cfg.bins), p=behind_p))]
        best = None
        best_d = math.inf
        for _ in range(cfg.max_attempts):
            cand = _placement(rng, cfg, kind, occluders, union, target)
            if cand is None:
                continue
            d = _bin_distance(cand[1], target)
            if d < best_d:
                best, best_d = cand, d
            if d == 0.0:
                break
        if best is None:
            continue
        mask, _, size = best
        placed.append((kind, mask))
        occluders.append((mask, size))
        union |= mask

    distractors = []
    for _ in range(cfg.n_distractors):
        kind = kinds[int(rng.choice(len(kinds), p=kind_p))]
        size = rng.uniform(cfg.size_min, cfg.size_max) * 0.6
        distractors.append(draw_shape(kind, h, w, rng.uniform(0, w), rng.uniform(0, h), size, rng))

    background = rng.uniform(0.05, 0.95, size=3)
    colors = _sample_colors(rng, len(placed) + len(distractors), cfg.min_color_distance, background)
    img = background + rng.normal(0.0, cfg.background_noise, size=(h, w, 3))
    # back to front
    for (kind, mask), color in reversed(list(zip(placed, colors))):
        img[mask] = color + rng.normal(0.0, cfg.color_noise, size=(int(mask.sum()), 3))
    front_extra = np.zeros((h, w), dtype=bool)
    for mask, color in zip(distractors, colors[len(placed):]):
        img[mask] = color + rng.normal(0.0, cfg.color_noise, size=(int(mask.sum()), 3))
        front_extra |= mask
    image = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    ann = SceneAnnotation(image_id=image_id, height=h, width=w)
    in_front = front_extra.copy()
    order = []
    for kind, amodal in placed:
        visible = amodal & ~in_front
        in_front |= amodal
        if not visible.any():
            continue
        order.append((kind, amodal, visible))
    for kind, amodal, visible in order:
        ratio = occlusion_ratio(visible, amodal)
        ann.instances.append(InstanceAnnotation(
            class_label=SHAPES.index(kind),
            visible_box=tight_box(visible),
            amodal_box=tight_box(amodal),
            visible_mask=visible,
            amodal_mask=amodal.copy(),
            occlusion_level=level_for_ratio(ratio, cfg.bins),
            occlusion_ratio=ratio,
        ))
    return image, ann


def generate_dataset(cfg: GenConfig, n_scenes: int, start: int = 0):
    return [generate_scene(cfg, cfg.seed, index=start + k) for k in range(n_scenes)]


# ---------------------------------------------------------------------------
# integrity checks
# ---------------------------------------------------------------------------

def scene_problems(ann: SceneAnnotation, bins: Sequence[OcclusionLevel] = KINS_BINS,
                   annotated_occluders: bool = True) -> list[str]:
    """Every violated annotation invariant, as human-readable strings."""
    problems = []
    boxes = ann.amodal_boxes()
    for k, inst in enumerate(ann.instances):
        tag = f"{ann.image_id}#{k}"
        if tight_box(inst.visible_mask) != inst.visible_box:
            problems.append(f"{tag}: visible box not tight")
        if tight_box(inst.amodal_mask) != inst.amodal_box:
            problems.append(f"{tag}: amodal box not tight")
        if np.any(inst.visible_mask & ~inst.amodal_mask):
            problems.append(f"{tag}: visible pixels outside amodal mask")
            continue  # the occlusion ratio is undefined from here on
        ratio = occlusion_ratio(inst.visible_mask, inst.amodal_mask)
        if level_for_ratio(ratio, bins) != inst.occlusion_level:
            problems.append(f"{tag}: recorded level disagrees with masks")
        if inst.occlusion_level.hi == 0.0 and not np.array_equal(inst.visible_mask, inst.amodal_mask):
            problems.append(f"{tag}: FG-0 instance with occluded pixels")
        hidden = inst.amodal_mask & ~inst.visible_mask
        if annotated_occluders and hidden.any():
            region = envelope_overlap_region(k, boxes)
            if region is None:
                problems.append(f"{tag}: occluded but no overlap region")
            elif np.any(hidden & ~rasterize_box(region, ann.height, ann.width)):
                problems.append(f"{tag}: occluded pixels outside the overlap region")
    return problems
