"""Training losses for the visible, amodal and region branches.

Every loss takes probability grids (values in [0, 1]) shaped ``(H, W)`` or
``(N, H, W)`` and returns one value per leading index, so a single instance
gives a 0-d tensor and a batch gives a length-``N`` vector. Boxes may be given
as :class:`~boxamodal.geometry.Box` objects or as boolean box bitmasks with
the same shape as the mask grid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .geometry import Box, rasterize_box

BoxLike = Union[Box, torch.Tensor, np.ndarray]
Pixel = tuple[int, int]

# Canonical half of the 8-neighborhood; the other four directions are the
# same unordered pairs seen from the other endpoint.
HALF_DIRECTIONS: tuple[Pixel, ...] = ((0, 1), (1, 0), (1, 1), (1, -1))


# Which neighbor pairs the pairwise term sees: both pixels inside the box, or
# any pair touching it (so background just outside the box can pull
# same-colored pixels inside the box toward 0).
PAIRWISE_EDGES = ("inside", "touching")


@dataclass
class LossConfig:
    alpha1_a: float = 2.0
    alpha2_a: float = 1.0
    alpha3_a: float = 1.0
    alpha_r: float = 1.0
    K: float = 1.0
    t: float = 0.5
    neighbor_gap: int = 1
    pairwise_similarity_threshold: float = 0.3
    pairwise_sigma: float = 0.1
    pairwise_dilation: int = 1
    pairwise_edges: str = "inside"
    dice_smooth: float = 1e-6
    epsilon: float = 1e-6
    enable_uniform: bool = True
    enable_neighbor: bool = True
    enable_fusion: bool = True

    def __post_init__(self):
        for name in ("alpha1_a", "alpha2_a", "alpha3_a", "alpha_r", "K"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.t < 1.0:
            raise ValueError("t must lie in (0, 1)")
        if not 0.0 < self.pairwise_similarity_threshold < 1.0:
            raise ValueError("pairwise_similarity_threshold must lie in (0, 1)")
        if self.neighbor_gap < 1 or self.pairwise_dilation < 1:
            raise ValueError("neighbor_gap and pairwise_dilation must be >= 1")
        if self.pairwise_edges not in PAIRWISE_EDGES:
            raise ValueError(f"pairwise_edges must be one of {PAIRWISE_EDGES}")
        if not 0.0 < self.epsilon < 0.5 or self.pairwise_sigma <= 0 or self.dice_smooth <= 0:
            raise ValueError("epsilon, pairwise_sigma and dice_smooth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PixelEdgeSet:
    """Undirected pixel pairs around the predicted-overlapping-visible set.

    ``gt_consistency[k]`` is 1 when both endpoints of ``edges[k]`` share the
    same box label (both inside or both outside the amodal box).
    """

    edges: list[tuple[Pixel, Pixel]] = field(default_factory=list)
    gt_consistency: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.edges)


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def box_mask(box: BoxLike, like: torch.Tensor) -> torch.Tensor:
    """Boolean box bitmask broadcastable against ``like``."""
    h, w = like.shape[-2:]
    if isinstance(box, Box):
        return torch.from_numpy(rasterize_box(box, h, w)).to(like.device)
    mask = torch.as_tensor(box, device=like.device).bool()
    if mask.shape[-2:] != (h, w):
        raise ValueError(f"box mask shape {tuple(mask.shape)} does not match grid {(h, w)}")
    return mask


def pair_slices(h: int, w: int, di: int, dj: int):
    """Slices selecting the first and second endpoints of all in-image pairs
    ``((i, j), (i + di, j + dj))`` with ``di >= 0``."""
    r1 = slice(0, h - di)
    r2 = slice(di, h)
    if dj >= 0:
        c1, c2 = slice(0, w - dj), slice(dj, w)
    else:
        c1, c2 = slice(-dj, w), slice(0, w + dj)
    return (r1, c1), (r2, c2)


def _bce(p: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    p = p.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def same_label_prob(a1: torch.Tensor, a2: torch.Tensor) -> torch.Tensor:
    return a1 * a2 + (1.0 - a1) * (1.0 - a2)


# ---------------------------------------------------------------------------
# region branch
# ---------------------------------------------------------------------------

def region_loss(pred: torch.Tensor, gt, alpha_r: float = 1.0, eps: float = 1e-6) -> torch.Tensor:
    """Pixel BCE averaged over every pixel of the grid, scaled by ``alpha_r``."""
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    _check_same_shape(pred, gt)
    return alpha_r * _bce(pred, gt, eps).mean(dim=(-2, -1))


# ---------------------------------------------------------------------------
# connectivity loss
# ---------------------------------------------------------------------------

def pov_mask(m_v: torch.Tensor, region, t: float) -> torch.Tensor:
    region = torch.as_tensor(region, device=m_v.device).bool()
    _check_same_shape(m_v, region)
    return region & (m_v.detach() > t)


def build_pov_set(m_v, region, t: float) -> set[Pixel]:
    """Pixels inside ``region`` whose visible score is strictly above ``t``."""
    mask = pov_mask(torch.as_tensor(m_v), region, t)
    if mask.dim() != 2:
        raise ValueError("build_pov_set expects a single (H, W) grid")
    return {(int(i), int(j)) for i, j in torch.nonzero(mask).tolist()}


def build_edge_set(pov: Iterable[Pixel], gap: int, h: int, w: int, amodal_box: Box) -> PixelEdgeSet:
    if gap < 1:
        raise ValueError("gap must be >= 1")
    d = gap + 1
    seen: set[tuple[Pixel, Pixel]] = set()
    out = PixelEdgeSet()
    for (i, j) in sorted(pov):
        for di, dj in HALF_DIRECTIONS:
            for s in (1, -1):
                q = (i + s * di * d, j + s * dj * d)
                if not (0 <= q[0] < h and 0 <= q[1] < w):
                    continue
                key = ((i, j), q) if (i, j) < q else (q, (i, j))
                if key in seen:
                    continue
                seen.add(key)
                same = amodal_box.contains(*key[0]) == amodal_box.contains(*key[1])
                out.edges.append(key)
                out.gt_consistency.append(int(same))
    return out


def pred_consistency(m_a: torch.Tensor, edge: tuple[Pixel, Pixel]) -> torch.Tensor:
    (i1, j1), (i2, j2) = edge
    return same_label_prob(m_a[..., i1, j1], m_a[..., i2, j2])


def neighbor_loss(m_a: torch.Tensor, edges: PixelEdgeSet, eps: float = 1e-6) -> torch.Tensor:
    """Mean BCE between predicted and box-derived edge consistency; 0 for no edges."""
    if len(edges) == 0:
        return m_a.sum() * 0.0
    idx = torch.tensor(edges.edges, device=m_a.device)
    a1 = m_a[idx[:, 0, 0], idx[:, 0, 1]]
    a2 = m_a[idx[:, 1, 0], idx[:, 1, 1]]
    c = torch.tensor(edges.gt_consistency, dtype=m_a.dtype, device=m_a.device)
    return _bce(same_label_prob(a1, a2), c, eps).mean()


def dense_neighbor_loss(m_a: torch.Tensor, pov: torch.Tensor, amodal_box: BoxLike,
                        gap: int = 1, eps: float = 1e-6) -> torch.Tensor:
    """Batched neighbor loss computed over shifted grids instead of an edge list.

    Enumerates exactly the edges :func:`build_edge_set` produces: every
    in-image pair at offset ``gap + 1`` along the 8 directions with at least
    one endpoint in ``pov``.
    """
    _check_same_shape(m_a, pov)
    inside = box_mask(amodal_box, m_a).expand_as(m_a)
    h, w = m_a.shape[-2:]
    d = gap + 1
    total = m_a.new_zeros(m_a.shape[:-2])
    count = m_a.new_zeros(m_a.shape[:-2])
    for di, dj in HALF_DIRECTIONS:
        if d * di >= h or d * abs(dj) >= w:
            continue
        s1, s2 = pair_slices(h, w, d * di, d * dj)
        sel = (pov[..., s1[0], s1[1]] | pov[..., s2[0], s2[1]]).to(m_a.dtype)
        c = (inside[..., s1[0], s1[1]] == inside[..., s2[0], s2[1]]).to(m_a.dtype)
        p = same_label_prob(m_a[..., s1[0], s1[1]], m_a[..., s2[0], s2[1]])
        total = total + (sel * _bce(p, c, eps)).sum(dim=(-2, -1))
        count = count + sel.sum(dim=(-2, -1))
    return total / count.clamp(min=1.0)


def uniform_loss(m_a: torch.Tensor, m_v: torch.Tensor, region, K: float = 1.0) -> torch.Tensor:
    """Mean shortfall of ``m_a`` below ``m_v`` over region pixels, scaled by ``K``."""
    region = torch.as_tensor(region, device=m_a.device)
    _check_same_shape(m_a, m_v, region)
    r = region.to(m_a.dtype)
    shortfall = torch.relu(m_v - m_a) * r
    n = r.sum(dim=(-2, -1))
    return K * shortfall.sum(dim=(-2, -1)) / n.clamp(min=1.0)


def connectivity_terms(m_a: torch.Tensor, m_v: torch.Tensor, region, amodal_box: BoxLike,
                       cfg: LossConfig) -> dict[str, torch.Tensor]:
    region = torch.as_tensor(region, device=m_a.device).bool()
    m_v = m_v.detach()
    zero = m_a.new_zeros(m_a.shape[:-2])
    ne = zero
    un = zero
    if cfg.enable_neighbor:
        pov = pov_mask(m_v, region, cfg.t)
        ne = dense_neighbor_loss(m_a, pov, amodal_box, cfg.neighbor_gap, cfg.epsilon)
    if cfg.enable_uniform:
        un = uniform_loss(m_a, m_v, region, cfg.K)
    return {"neighbor": ne, "uniform": un}


def connectivity_loss(m_a: torch.Tensor, m_v: torch.Tensor, region, amodal_box: BoxLike,
                      cfg: LossConfig) -> torch.Tensor:
    """Neighbor plus uniform term; ``m_v`` is treated as a constant."""
    terms = connectivity_terms(m_a, m_v, region, amodal_box, cfg)
    return terms["neighbor"] + terms["uniform"]


# ---------------------------------------------------------------------------
# box-supervised terms
# ---------------------------------------------------------------------------

def _smooth_dice(x: torch.Tensor, target: torch.Tensor, smooth: float) -> torch.Tensor:
    inter = (x * target).sum(dim=-1)
    denom = (x * x).sum(dim=-1) + (target * target).sum(dim=-1)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def projection_loss(m: torch.Tensor, box: BoxLike, smooth: float = 1e-6) -> torch.Tensor:
    """Mean of the dice losses between the axis max-projections of ``m`` and of the box."""
    if isinstance(box, Box) and not box.valid:
        raise ValueError(f"degenerate box {box}")
    target = box_mask(box, m).to(m.dtype).expand_as(m)
    if torch.any(target.sum(dim=(-2, -1)) == 0):
        raise ValueError("box covers no pixel of the grid")
    loss_x = _smooth_dice(m.amax(dim=-2), target.amax(dim=-2), smooth)
    loss_y = _smooth_dice(m.amax(dim=-1), target.amax(dim=-1), smooth)
    return 0.5 * (loss_x + loss_y)


def color_similarity(image: torch.Tensor, sigma: float, dilation: int = 1) -> torch.Tensor:
    """Similarity ``exp(-||c1 - c2|| / sigma)`` for the four canonical directions.

    ``image`` is ``(3, H, W)`` or ``(N, 3, H, W)`` in [0, 1]. Returns
    ``(4, H, W)`` (or ``(N, 4, H, W)``) where entry ``[k, i, j]`` describes the
    pair ``((i, j), (i, j) + dilation * HALF_DIRECTIONS[k])``; pairs leaving the
    image get similarity 0.
    """
    h, w = image.shape[-2:]
    out = image.new_zeros(image.shape[:-3] + (4, h, w))
    for k, (di, dj) in enumerate(HALF_DIRECTIONS):
        di, dj = di * dilation, dj * dilation
        if di >= h or abs(dj) >= w:
            continue
        s1, s2 = pair_slices(h, w, di, dj)
        diff = image[..., :, s1[0], s1[1]] - image[..., :, s2[0], s2[1]]
        out[..., k, s1[0], s1[1]] = torch.exp(-torch.linalg.vector_norm(diff, dim=-3) / sigma)
    return out


def pairwise_loss(m: torch.Tensor, image: Optional[torch.Tensor], box: BoxLike,
                  threshold: float = 0.3, sigma: float = 0.1, eps: float = 1e-6,
                  dilation: int = 1, similarity: Optional[torch.Tensor] = None,
                  edges: str = "inside") -> torch.Tensor:
    """Mean ``-log P(same label)`` over color-similar neighbor pairs inside the box.

    With ``edges="touching"`` a pair qualifies when either pixel is inside the
    box, which lets pairs straddling the box border take part. Pass a precomputed ``similarity`` from :func:`color_similarity` to skip the
    image pass; ``image`` is then ignored.
    """
    if similarity is None:
        if image is None:
            raise ValueError("either image or similarity is required")
        if image.shape[-2:] != m.shape[-2:]:
            raise ValueError(f"image {tuple(image.shape)} and mask {tuple(m.shape)} differ spatially")
        similarity = color_similarity(image.to(m.dtype), sigma, dilation)
    inside = box_mask(box, m).expand_as(m)
    h, w = m.shape[-2:]
    total = m.new_zeros(m.shape[:-2])
    count = m.new_zeros(m.shape[:-2])
    for k, (di, dj) in enumerate(HALF_DIRECTIONS):
        di, dj = di * dilation, dj * dilation
        if di >= h or abs(dj) >= w:
            continue
        s1, s2 = pair_slices(h, w, di, dj)
        sim = similarity[..., k, s1[0], s1[1]]
        a, b = inside[..., s1[0], s1[1]], inside[..., s2[0], s2[1]]
        sel = ((sim > threshold) & ((a | b) if edges == "touching" else (a & b))).to(m.dtype)
        p = same_label_prob(m[..., s1[0], s1[1]], m[..., s2[0], s2[1]]).clamp(eps, 1.0 - eps)
        total = total - (sel * torch.log(p)).sum(dim=(-2, -1))
        count = count + sel.sum(dim=(-2, -1))
    return total / count.clamp(min=1.0)


def _pairwise(m, image, box, cfg: LossConfig, similarity=None):
    return pairwise_loss(m, image, box, cfg.pairwise_similarity_threshold, cfg.pairwise_sigma,
                         cfg.epsilon, cfg.pairwise_dilation, similarity, cfg.pairwise_edges)


def amodal_branch_terms(m_a, m_v, image, amodal_box: BoxLike, region, cfg: LossConfig,
                        similarity=None) -> dict[str, torch.Tensor]:
    """Weighted components of the amodal-branch objective."""
    return {
        "amodal_proj": cfg.alpha1_a * projection_loss(m_a, amodal_box, cfg.dice_smooth),
        "amodal_pair": cfg.alpha2_a * _pairwise(m_a, image, amodal_box, cfg, similarity),
        "amodal_con": cfg.alpha3_a * connectivity_loss(m_a, m_v, region, amodal_box, cfg),
    }


def amodal_branch_loss(m_a, m_v, image, amodal_box: BoxLike, region, cfg: LossConfig,
                       similarity=None) -> torch.Tensor:
    return sum(amodal_branch_terms(m_a, m_v, image, amodal_box, region, cfg, similarity).values())


def visible_branch_terms(m_v, image, visible_box: BoxLike, cfg: LossConfig,
                         similarity=None) -> dict[str, torch.Tensor]:
    return {
        "visible_proj": projection_loss(m_v, visible_box, cfg.dice_smooth),
        "visible_pair": _pairwise(m_v, image, visible_box, cfg, similarity),
    }


def visible_branch_loss(m_v, image, visible_box: BoxLike, cfg: LossConfig,
                        similarity=None) -> torch.Tensor:
    return sum(visible_branch_terms(m_v, image, visible_box, cfg, similarity).values())


DIFFERENTIABLE_LOSSES: Sequence[str] = (
    "region", "neighbor", "uniform", "connectivity", "projection", "pairwise",
    "amodal_branch", "visible_branch",
)
