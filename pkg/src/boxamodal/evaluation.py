"""Fusion of the three branch outputs and per-occlusion-level mean IoU."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import KINS_BINS, OcclusionLevel


@dataclass
class EvalConfig:
    enable_fusion: bool = True
    region_threshold: float = 0.5
    mask_threshold: float = 0.5
    soft_fusion: bool = False


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def fuse(m_v, m_a, m_r, enable_fusion: bool = True, region_threshold: float = 0.5,
         soft: bool = False, mask_threshold: float = 0.5) -> np.ndarray:
    """Binary amodal mask: amodal prediction inside the predicted overlap region,
    visible prediction elsewhere. With fusion disabled the amodal prediction is
    used everywhere. ``soft`` blends the probabilities before thresholding."""
    m_v, m_a, m_r = _np(m_v), _np(m_a), _np(m_r)
    if not m_v.shape == m_a.shape == m_r.shape:
        raise ValueError(f"shape mismatch: {m_v.shape}, {m_a.shape}, {m_r.shape}")
    if not enable_fusion:
        return m_a > mask_threshold
    if soft:
        return m_a * m_r + m_v * (1.0 - m_r) > mask_threshold
    r = m_r > region_threshold
    return np.where(r, m_a > mask_threshold, m_v > mask_threshold)


def iou(pred, gt) -> float:
    pred = _np(pred).astype(bool)
    gt = _np(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise ValueError("ground-truth mask is empty")
    return np.count_nonzero(pred & gt) / np.count_nonzero(pred | gt)


def format_percent(value: float) -> str:
    """Percent value rounded half-up to one decimal (73.35 -> '73.4')."""
    d = Decimal(repr(round(float(value), 9)))
    return str(d.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def mean_over_levels(per_level: dict) -> float:
    vals = [v for v in per_level.values() if v is not None]
    if not vals:
        raise ValueError("no occlusion level has any instance")
    return float(sum(vals) / len(vals))


@dataclass
class EvalReport:
    per_level_miou: dict
    mean_miou: float
    counts: dict
    baseline_per_level: dict = field(default_factory=dict)
    baseline_mean: Optional[float] = None
    empty_levels: list = field(default_factory=list)
    fingerprint: str = ""
    method: str = "fused"

    @classmethod
    def from_level_means(cls, per_level: dict, counts: Optional[dict] = None, **kw) -> "EvalReport":
        """Aggregate already-computed per-level means (values in percent or fractions)."""
        empty = [k for k, v in per_level.items() if v is None]
        return cls(per_level_miou=dict(per_level), mean_miou=mean_over_levels(per_level),
                   counts=counts or {k: None for k in per_level}, empty_levels=empty, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table_rows(self, scale: float = 100.0) -> list[list[str]]:
        """Rows ``[method, level..., Mean]`` rendered at one decimal in percent."""
        levels = list(self.per_level_miou)

        def row(name, per_level, mean):
            cells = ["-" if per_level.get(k) is None else format_percent(per_level[k] * scale)
                     for k in levels]
            return [name] + cells + [format_percent(mean * scale)]

        rows = [["method"] + levels + ["Mean"], row(self.method, self.per_level_miou, self.mean_miou)]
        if self.baseline_mean is not None:
            rows.append(row("visible-only", self.baseline_per_level, self.baseline_mean))
        return rows


def write_table(path, rows: Sequence[Sequence[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    return path


def evaluate(predictions, scenes, cfg: Optional[EvalConfig] = None,
             bins: Sequence[OcclusionLevel] = KINS_BINS, fingerprint: str = "") -> EvalReport:
    """Score per-instance predictions against ground-truth amodal masks.

    ``predictions[s][k]`` holds ``(m_v, m_a, m_r)`` arrays for instance ``k`` of
    ``scenes[s]``; ``scenes`` are ``(image, SceneAnnotation)`` pairs or bare
    annotations. Levels without instances are reported as ``None``, listed in
    ``empty_levels`` and left out of the mean.
    """
    cfg = cfg or EvalConfig()
    fused_by_level = defaultdict(list)
    base_by_level = defaultdict(list)
    for pred_scene, scene in zip(predictions, scenes, strict=True):
        ann = scene[1] if isinstance(scene, tuple) else scene
        if len(pred_scene) != len(ann.instances):
            raise ValueError(f"{ann.image_id}: {len(pred_scene)} predictions for "
                             f"{len(ann.instances)} instances")
        for (m_v, m_a, m_r), inst in zip(pred_scene, ann.instances):
            fused = fuse(m_v, m_a, m_r, cfg.enable_fusion, cfg.region_threshold, cfg.soft_fusion,
                         cfg.mask_threshold)
            name = inst.occlusion_level.name
            fused_by_level[name].append(iou(fused, inst.amodal_mask))
            base_by_level[name].append(iou(_np(m_v) > cfg.mask_threshold, inst.amodal_mask))
    # fsum keeps the per-level means independent of instance order
    per_level = {b.name: (math.fsum(fused_by_level[b.name]) / len(fused_by_level[b.name])
                          if fused_by_level[b.name] else None) for b in bins}
    baseline = {b.name: (math.fsum(base_by_level[b.name]) / len(base_by_level[b.name])
                         if base_by_level[b.name] else None) for b in bins}
    counts = {b.name: len(fused_by_level[b.name]) for b in bins}
    return EvalReport(
        per_level_miou=per_level,
        mean_miou=mean_over_levels(per_level),
        counts=counts,
        baseline_per_level=baseline,
        baseline_mean=mean_over_levels(baseline),
        empty_levels=[k for k, v in per_level.items() if v is None],
        fingerprint=fingerprint,
        method="fused" if cfg.enable_fusion else "amodal-branch",
    )


@torch.no_grad()
def predict(model, scenes, batch_size: int = 16) -> list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Run ``model`` on every instance, querying with its visible box."""
    from .model import InstanceQuery, image_to_tensor

    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = torch.stack([image_to_tensor(img) for img, _ in chunk])
        index, queries = [], []
        for s, (_, ann) in enumerate(chunk):
            for inst in ann.instances:
                index.append(s)
                queries.append(InstanceQuery(inst.visible_box, inst.class_label))
        res = model(images, index, queries) if queries else None
        k = 0
        for _, ann in chunk:
            per = []
            for _ in ann.instances:
                per.append((res.m_v[k].numpy(), res.m_a[k].numpy(), res.m_r[k].numpy()))
                k += 1
            out.append(per)
    model.train(was_training)
    return out


def evaluate_model(model, scenes, cfg: Optional[EvalConfig] = None,
                   bins: Sequence[OcclusionLevel] = KINS_BINS, batch_size: int = 16) -> EvalReport:
    return evaluate(predict(model, scenes, batch_size), scenes, cfg, bins,
                    fingerprint=model.cfg.fingerprint())


def save_predictions(root, predictions, scenes) -> Path:
    """One ``<image_id>.npz`` per scene with stacked ``m_v``, ``m_a``, ``m_r``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for pred, scene in zip(predictions, scenes, strict=True):
        ann = scene[1] if isinstance(scene, tuple) else scene
        arrays = {k: np.stack([p[j] for p in pred]).astype(np.float32) if pred
                  else np.zeros((0, ann.height, ann.width), np.float32)
                  for j, k in enumerate(("m_v", "m_a", "m_r"))}
        np.savez_compressed(root / f"{ann.image_id}.npz", **arrays)
    return root


def load_predictions(root, scenes):
    root = Path(root)
    out = []
    for scene in scenes:
        ann = scene[1] if isinstance(scene, tuple) else scene
        path = root / f"{ann.image_id}.npz"
        if not path.is_file():
            raise FileNotFoundError(f"no predictions for {ann.image_id} in {root}")
        with np.load(path) as z:
            out.append(list(zip(z["m_v"], z["m_a"], z["m_r"])))
    return out
