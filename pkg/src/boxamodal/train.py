"""Joint training of the three branches under box-level supervision.

Only boxes and class labels are read from the annotations; the ground-truth
masks are left untouched until evaluation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import TrainConfig, save_config
from .geometry import Box
from .losses import (
    amodal_branch_terms,
    color_similarity,
    region_loss,
    visible_branch_terms,
)
from .model import AmodalNet, InstanceQuery, image_to_tensor, save_checkpoint, training_targets

log = logging.getLogger(__name__)

TERM_NAMES = ("visible_proj", "visible_pair", "amodal_proj", "amodal_pair", "amodal_con", "region")


class NumericError(RuntimeError):
    def __init__(self, term: str, iteration: int):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
        self.term = term
        self.iteration = iteration


@dataclass
class RunRecord:
    iteration: int
    lr: float
    total: float
    terms: dict
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Staged schedule: ``base_lr * gamma**k`` after the k-th milestone, with an
    optional linear warmup over the first ``warmup_iterations``."""
    frac = iteration / cfg.total_iterations
    drops = sum(frac >= m for m in cfg.milestones)
    lr = cfg.base_lr * cfg.lr_gamma ** drops
    if iteration < cfg.warmup_iterations:
        lr *= (iteration + 1) / cfg.warmup_iterations
    return lr


def _flip_box(b: Box, w: int) -> Box:
    return Box(w - b.x_max, b.y_min, w - b.x_min, b.y_max)


class TrainingSet:
    """Scenes reduced to what box supervision allows: image, class labels,
    visible/amodal boxes and the box-derived overlap region."""

    def __init__(self, scenes):
        self.items = []
        for image, ann in scenes:
            if not ann.instances:
                continue
            targets = training_targets(ann)
            self.items.append({
                "image": image_to_tensor(image),
                "labels": [inst.class_label for inst in ann.instances],
                "visible_boxes": [t[0] for t in targets],
                "amodal_boxes": [t[1] for t in targets],
                "regions": torch.from_numpy(np.stack([t[2] for t in targets])),
            })
        if not self.items:
            raise ValueError("dataset has no annotated instances")

    def __len__(self):
        return len(self.items)

    def batch(self, indices: Sequence[int], flips: Sequence[bool]):
        images, index, queries, vis, amo, regions = [], [], [], [], [], []
        for s, (i, flip) in enumerate(zip(indices, flips)):
            item = self.items[i]
            img = item["image"]
            h, w = img.shape[-2:]
            reg = item["regions"]
            vboxes, aboxes = item["visible_boxes"], item["amodal_boxes"]
            if flip:
                img = img.flip(-1)
                reg = reg.flip(-1)
                vboxes = [_flip_box(b, w) for b in vboxes]
                aboxes = [_flip_box(b, w) for b in aboxes]
            images.append(img)
            for k, label in enumerate(item["labels"]):
                index.append(s)
                queries.append(InstanceQuery(vboxes[k], label))
                vis.append(_box_mask(vboxes[k], h, w))
                amo.append(_box_mask(aboxes[k], h, w))
            regions.append(reg)
        return (torch.stack(images), index, queries, torch.stack(vis), torch.stack(amo),
                torch.cat(regions))


def _box_mask(b: Box, h: int, w: int) -> torch.Tensor:
    m = torch.zeros(h, w, dtype=torch.bool)
    m[b.y_min:b.y_max, b.x_min:b.x_max] = True
    return m


def pairwise_ramp(iteration: int, cfg: TrainConfig) -> float:
    """Linear ramp of the pairwise terms over the first ``pairwise_warmup``
    fraction of training; keeps the all-background solution from winning early."""
    n = cfg.pairwise_warmup * cfg.total_iterations
    return 1.0 if n <= 0 else min((iteration + 1) / n, 1.0)


def compute_losses(model: AmodalNet, batch, cfg: TrainConfig,
                   pair_scale: float = 1.0) -> tuple[torch.Tensor, dict]:
    """Total loss and its weighted, instance-reduced components (which sum to the total)."""
    images, index, queries, vis, amo, regions = batch
    out = model(images, index, queries)
    lc = cfg.loss
    sim = color_similarity(images, lc.pairwise_sigma, lc.pairwise_dilation)[torch.as_tensor(index)]
    per = {}
    per.update({k: cfg.visible_weight * v for k, v in
                visible_branch_terms(out.m_v, None, vis, lc, similarity=sim).items()})
    per.update({k: cfg.amodal_weight * v for k, v in
                amodal_branch_terms(out.m_a, out.m_v, None, amo, regions, lc, similarity=sim).items()})
    if lc.enable_fusion:
        per["region"] = cfg.region_weight * region_loss(out.m_r, regions, lc.alpha_r, lc.epsilon)
    else:
        per["region"] = out.m_r.new_zeros(len(queries))
    per["visible_pair"] = pair_scale * per["visible_pair"]
    per["amodal_pair"] = pair_scale * per["amodal_pair"]
    reduce = torch.mean if cfg.loss_reduction == "mean" else torch.sum
    terms = {k: reduce(v) for k, v in per.items()}
    total = sum(terms.values())
    return total, terms


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def train(cfg: TrainConfig, scenes=None, log_path=None, quiet: bool = False):
    """Train a model; returns ``(model, records)``.

    ``scenes`` defaults to reading ``cfg.dataset``. Checkpoints go to
    ``cfg.output_dir`` every ``checkpoint_every`` iterations and at the end; a
    line-delimited JSON log of :class:`RunRecord` goes to ``log_path`` (default
    ``<output_dir>/train_log.jsonl``). Pass ``cfg.output_dir=None``-like empty
    string to skip all file output.
    """
    if scenes is None:
        from .dataset_io import read_dataset
        if not cfg.dataset:
            raise ValueError("no dataset given")
        scenes = read_dataset(cfg.dataset)
    data = TrainingSet(scenes)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = AmodalNet(cfg.model)
    model.train()
    opt = _make_optimizer(model, cfg)

    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.yaml")
        log_file = open(log_path or out_dir / "train_log.jsonl", "w")
    elif log_path is not None:
        log_file = open(log_path, "w")

    records: list[RunRecord] = []
    start = time.perf_counter()
    bs = min(cfg.batch_size, len(data))
    try:
        for it in range(cfg.total_iterations):
            lr = lr_at(it, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = rng.choice(len(data), size=bs, replace=False)
            flips = rng.random(bs) < 0.5 if cfg.hflip else np.zeros(bs, dtype=bool)
            total, terms = compute_losses(model, data.batch(idx.tolist(), flips.tolist()), cfg,
                                          pairwise_ramp(it, cfg))
            for name, value in terms.items():
                if not torch.isfinite(value):
                    raise NumericError(name, it)
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            if (it + 1) % cfg.log_interval == 0:
                rec = RunRecord(it, lr, float(total.detach()),
                                {k: float(v.detach()) for k, v in terms.items()},
                                time.perf_counter() - start)
                records.append(rec)
                if log_file:
                    log_file.write(rec.to_json() + "\n")
                if not quiet and (it + 1) % max(cfg.log_interval, 100) == 0:
                    log.info("iter %d lr %.5f loss %.4f (%.1fs)", it + 1, lr, rec.total, rec.wall_time)
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 \
                    and it + 1 < cfg.total_iterations:
                save_checkpoint(out_dir / f"checkpoint_{it + 1:06d}.pt", model,
                                {"iteration": it + 1, "train_config": cfg.to_dict()})
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "model_final.pt", model,
                        {"iteration": cfg.total_iterations, "train_config": cfg.to_dict()})
    model.eval()
    return model, records


def read_log(path) -> list[RunRecord]:
    with open(path) as f:
        return [RunRecord(**json.loads(line)) for line in f if line.strip()]
