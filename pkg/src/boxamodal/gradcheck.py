"""Finite-difference check of every differentiable loss.

Each loss is evaluated in float64 on random 8x8 inputs whose mask values stay
in [0.05, 0.95], well away from the probability clamp. The analytic gradient
with respect to the mask is compared against central differences and the
largest error is reported relative to the largest numerical gradient entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import Box
from .losses import (
    DIFFERENTIABLE_LOSSES,
    LossConfig,
    amodal_branch_loss,
    connectivity_loss,
    dense_neighbor_loss,
    pairwise_loss,
    pov_mask,
    projection_loss,
    region_loss,
    uniform_loss,
    visible_branch_loss,
)

STEP = 1e-4
TOLERANCE = 1e-3


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    passed: bool


def _instance(rng: np.random.Generator, n: int = 8):
    m_a = rng.uniform(0.05, 0.95, (n, n))
    m_v = rng.uniform(0.05, 0.95, (n, n))
    region = np.zeros((n, n), bool)
    region[1:6, 2:7] = True
    image = np.empty((n, n, 3))
    image[:, : n // 2] = rng.uniform(0, 1, 3)
    image[:, n // 2:] = rng.uniform(0, 1, 3)
    image += rng.normal(0, 0.01, image.shape)
    return m_a, m_v, region, Box(1, 1, 7, 7), torch.from_numpy(image).permute(2, 0, 1)


def loss_functions(rng: np.random.Generator) -> dict[str, Callable[[torch.Tensor], torch.Tensor]]:
    """Each differentiable loss as a function of one (8, 8) float64 mask."""
    m_a, m_v, region, box, image = _instance(rng)
    mv = torch.from_numpy(m_v)
    cfg = LossConfig()
    pov = pov_mask(mv, region, cfg.t)
    fns = {
        "region": lambda x: region_loss(x, region, cfg.alpha_r, cfg.epsilon),
        "neighbor": lambda x: dense_neighbor_loss(x, pov, box, cfg.neighbor_gap, cfg.epsilon),
        "uniform": lambda x: uniform_loss(x, mv, region, cfg.K),
        "connectivity": lambda x: connectivity_loss(x, mv, region, box, cfg),
        "projection": lambda x: projection_loss(x, box, cfg.dice_smooth),
        "pairwise": lambda x: pairwise_loss(x, image, box, cfg.pairwise_similarity_threshold,
                                            cfg.pairwise_sigma, cfg.epsilon),
        "amodal_branch": lambda x: amodal_branch_loss(x, mv, image, box, region, cfg),
        "visible_branch": lambda x: visible_branch_loss(x, image, box, cfg),
    }
    assert set(fns) == set(DIFFERENTIABLE_LOSSES)
    return {name: (fns[name], m_a) for name in DIFFERENTIABLE_LOSSES}


def relative_error(fn, x0: np.ndarray, step: float = STEP) -> float:
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    fn(x).backward()
    analytic = x.grad.numpy()
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += step
        xm[idx] -= step
        with torch.no_grad():
            numeric[idx] = (fn(torch.from_numpy(xp)).item() - fn(torch.from_numpy(xm)).item()) / (2 * step)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def run(seed: int = 0, trials: int = 3, tolerance: float = TOLERANCE) -> list[GradResult]:
    """Worst relative error per loss over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in DIFFERENTIABLE_LOSSES}
    for _ in range(trials):
        for name, (fn, x0) in loss_functions(rng).items():
            worst[name] = max(worst[name], relative_error(fn, x0))
    return [GradResult(n, e, e < tolerance) for n, e in worst.items()]
