"""Three-branch network with per-instance dynamic mask heads.

A small strided encoder produces a two-level feature pyramid (strides 4 and 8)
and a mask-feature map at ``mask_stride``. For each instance query a controller
reads pyramid features at the visible-box center and emits the parameters of
three tiny 1x1-conv heads (visible, amodal, region). Each head runs over the
mask features concatenated with relative coordinates; the amodal head also
receives the visible head's (detached) probability map as an extra channel.
"""

from __future__ import annotations

import hashlib
import json
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, envelope_overlap_region, rasterize_box

BRANCHES = ("visible", "amodal", "region")


@dataclass
class ModelConfig:
    channels: int = 32
    strides: tuple = (4, 8)
    mask_stride: int = 2
    mask_channels: int = 8
    head_width: int = 8
    head_layers: int = 3
    num_classes: int = 4
    class_embed_dim: int = 8
    use_class: bool = True
    amodal_uses_visible: bool = True
    controller_hidden: int = 128

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if list(self.strides) != [4, 8]:
            raise ValueError("the encoder is built for pyramid strides (4, 8)")
        if self.mask_stride not in (1, 2, 4):
            raise ValueError("mask_stride must be 1, 2 or 4")
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def head_inputs(self, branch: str) -> int:
        extra = 1 if branch == "amodal" else 0
        return self.mask_channels + 2 + extra

    def head_shapes(self, branch: str) -> list[tuple[int, int]]:
        """(out, in) of each dynamic 1x1 layer."""
        dims = [self.head_inputs(branch)] + [self.head_width] * (self.head_layers - 1) + [1]
        return [(dims[k + 1], dims[k]) for k in range(self.head_layers)]

    def head_param_count(self, branch: str) -> int:
        return sum(o * i + o for o, i in self.head_shapes(branch))


@dataclass
class FeaturePyramid:
    levels: list  # [(stride, (N, C, h, w) tensor)]
    mask_features: torch.Tensor  # (N, mask_channels, H / mask_stride, W / mask_stride)
    image_size: tuple

    def level(self, stride: int) -> torch.Tensor:
        for s, grid in self.levels:
            if s == stride:
                return grid
        raise KeyError(stride)


@dataclass(frozen=True)
class InstanceQuery:
    visible_box: Box
    class_label: int = 0

    @property
    def center(self) -> tuple[float, float]:
        return self.visible_box.center()

    @property
    def normalizer(self) -> float:
        return 0.5 * math.hypot(self.visible_box.width, self.visible_box.height)


@dataclass
class HeadParams:
    visible: torch.Tensor
    amodal: torch.Tensor
    region: torch.Tensor

    def __getitem__(self, branch: str) -> torch.Tensor:
        return getattr(self, branch)


@dataclass
class BranchOutputs:
    m_v: torch.Tensor
    m_a: torch.Tensor
    m_r: torch.Tensor

    def __post_init__(self):
        if not self.m_v.shape == self.m_a.shape == self.m_r.shape:
            raise ValueError("branch outputs must share shape")

    def detach(self) -> "BranchOutputs":
        return BranchOutputs(self.m_v.detach(), self.m_a.detach(), self.m_r.detach())

    def __getitem__(self, k) -> "BranchOutputs":
        return BranchOutputs(self.m_v[k], self.m_a[k], self.m_r[k])


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 to ``(3, H, W)`` float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0


def coord_map(query: InstanceQuery, stride: int, h: int, w: int, dtype=torch.float32,
              device=None) -> torch.Tensor:
    """``(2, h, w)`` offsets of each grid cell center from the query center,
    divided by half the visible-box diagonal. Channel 0 is x, channel 1 is y."""
    cx, cy = query.center
    norm = max(query.normalizer, 1.0)
    off = (stride - 1) / 2.0
    xs = torch.arange(w, dtype=dtype, device=device) * stride + off
    ys = torch.arange(h, dtype=dtype, device=device) * stride + off
    gx = ((xs - cx) / norm).expand(h, w)
    gy = ((ys - cy) / norm)[:, None].expand(h, w)
    return torch.stack([gx, gy])


def _conv(cin, cout, stride=1, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.stem = nn.Sequential(_conv(3, c, 2), _conv(c, c))
        self.down4 = nn.Sequential(_conv(c, c, 2), _conv(c, c))
        self.down8 = nn.Sequential(_conv(c, c, 2), _conv(c, c))
        self.lat4 = nn.Conv2d(c, c, 1)
        self.lat8 = nn.Conv2d(c, c, 1)
        self.smooth4 = _conv(c, c)
        self.mask_lat = nn.Conv2d(c, c, 1)
        self.mask_tower = nn.Sequential(_conv(c, c), _conv(c, c), nn.Conv2d(c, cfg.mask_channels, 1))

    def forward(self, x: torch.Tensor):
        f2 = self.stem(x)
        f4 = self.down4(f2)
        f8 = self.down8(f4)
        p8 = self.lat8(f8)
        p4 = self.smooth4(self.lat4(f4) + F.interpolate(p8, size=f4.shape[-2:], mode="nearest"))
        ms = self.cfg.mask_stride
        if ms == 4:
            base = p4
        else:
            base = self.mask_lat(f2) + F.interpolate(p4, size=f2.shape[-2:], mode="bilinear",
                                                      align_corners=False)
            if ms == 1:
                base = F.interpolate(base, scale_factor=2, mode="bilinear", align_corners=False)
        return p4, p8, self.mask_tower(base)


class AmodalNet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = Encoder(cfg)
        self.class_embed = nn.Embedding(cfg.num_classes, cfg.class_embed_dim)
        # center features of both levels, box-pooled stride-4 features, box geometry
        ctrl_in = 3 * cfg.channels + 2 + (cfg.class_embed_dim if cfg.use_class else 0)
        self.param_counts = [cfg.head_param_count(b) for b in BRANCHES]
        self.controller = nn.Sequential(
            nn.Linear(ctrl_in, cfg.controller_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.controller_hidden, sum(self.param_counts)),
        )
        nn.init.normal_(self.controller[-1].weight, std=0.01)
        nn.init.zeros_(self.controller[-1].bias)

    # -- features ---------------------------------------------------------

    def extract_features(self, image: torch.Tensor) -> FeaturePyramid:
        """Features for ``(3, H, W)`` or ``(N, 3, H, W)`` images with values in [0, 1]."""
        if image.dim() == 3:
            image = image[None]
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-1] == 0 or image.shape[-2] == 0:
            raise ValueError(f"expected (N, 3, H, W) image batch, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        top = max(self.cfg.strides)
        ph, pw = (-H) % top, (-W) % top
        x = (image - 0.5) / 0.25
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        p4, p8, mf = self.encoder(x)
        ms = self.cfg.mask_stride
        levels = [
            (4, p4[..., :math.ceil(H / 4), :math.ceil(W / 4)]),
            (8, p8[..., :math.ceil(H / 8), :math.ceil(W / 8)]),
        ]
        return FeaturePyramid(levels, mf[..., :math.ceil(H / ms), :math.ceil(W / ms)], (H, W))

    # -- controller -------------------------------------------------------

    def _controller_input(self, feats: FeaturePyramid, image_index: torch.Tensor,
                          queries: Sequence[InstanceQuery]) -> torch.Tensor:
        H, W = feats.image_size
        dev = feats.mask_features.device
        dtype = feats.mask_features.dtype
        centers = torch.tensor([q.center for q in queries], dtype=dtype, device=dev)
        for q in queries:
            cx, cy = q.center
            if not (0 <= cx <= W - 1 and 0 <= cy <= H - 1):
                raise ValueError(f"query center {(cx, cy)} outside the {H}x{W} image")
        parts = []
        for stride, grid in feats.levels:
            g = grid[image_index]
            h, w = g.shape[-2:]
            # pixel-index coordinates to normalized [-1, 1] with align_corners=False
            gx = (centers[:, 0] + 0.5) / (w * stride) * 2 - 1
            gy = (centers[:, 1] + 0.5) / (h * stride) * 2 - 1
            loc = torch.stack([gx, gy], dim=-1)[:, None, None, :]
            parts.append(F.grid_sample(g, loc, mode="bilinear", align_corners=False)[:, :, 0, 0])
        p4 = feats.level(4)[image_index]
        pooled = []
        for k, q in enumerate(queries):
            b = q.visible_box
            y0, x0 = b.y_min // 4, b.x_min // 4
            y1, x1 = max(math.ceil(b.y_max / 4), y0 + 1), max(math.ceil(b.x_max / 4), x0 + 1)
            pooled.append(p4[k, :, y0:y1, x0:x1].mean(dim=(-2, -1)))
        parts.append(torch.stack(pooled))
        geom = torch.tensor([[q.visible_box.width / W, q.visible_box.height / H] for q in queries],
                            dtype=dtype, device=dev)
        parts.append(geom)
        if self.cfg.use_class:
            labels = torch.tensor([q.class_label for q in queries], dtype=torch.long, device=dev)
            parts.append(self.class_embed(labels))
        return torch.cat(parts, dim=1)

    def generate_head_params(self, query, features: FeaturePyramid, image_index=None) -> HeadParams:
        """Per-instance head parameters. ``query`` may be a single query or a list;
        ``image_index`` picks each query's image in a batched pyramid (default 0)."""
        single = isinstance(query, InstanceQuery)
        queries = [query] if single else list(query)
        if image_index is None:
            image_index = [0] * len(queries)
        idx = torch.as_tensor(image_index, dtype=torch.long, device=features.mask_features.device)
        flat = self.controller(self._controller_input(features, idx, queries))
        chunks = torch.split(flat, self.param_counts, dim=1)
        if single:
            chunks = [c[0] for c in chunks]
        return HeadParams(*chunks)

    # -- heads ------------------------------------------------------------

    def _run_head(self, branch: str, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """``x``: (N, C_in, P) -> logits (N, 1, P)."""
        n = x.shape[0]
        offset = 0
        shapes = self.cfg.head_shapes(branch)
        for k, (o, i) in enumerate(shapes):
            weight = params[:, offset:offset + o * i].reshape(n, o, i)
            offset += o * i
            bias = params[:, offset:offset + o].reshape(n, o, 1)
            offset += o
            x = torch.baddbmm(bias, weight, x)
            if k < len(shapes) - 1:
                x = F.relu(x)
        return x

    def heads(self, features: FeaturePyramid, image_index, queries: Sequence[InstanceQuery],
              params: HeadParams) -> BranchOutputs:
        mf = features.mask_features
        idx = torch.as_tensor(image_index, dtype=torch.long, device=mf.device)
        ms = self.cfg.mask_stride
        h, w = mf.shape[-2:]
        H, W = features.image_size
        coords = torch.stack([coord_map(q, ms, h, w, mf.dtype, mf.device) for q in queries])
        base = torch.cat([mf[idx], coords], dim=1).flatten(2)
        n = base.shape[0]
        v_logit = self._run_head("visible", params.visible, base)
        mv_low = torch.sigmoid(v_logit).detach()
        if not self.cfg.amodal_uses_visible:
            mv_low = torch.zeros_like(mv_low)
        a_logit = self._run_head("amodal", params.amodal, torch.cat([base, mv_low], dim=1))
        r_logit = self._run_head("region", params.region, base)
        logits = torch.cat([v_logit, a_logit, r_logit], dim=1).reshape(n, 3, h, w)
        if (h, w) != (H, W):
            logits = F.interpolate(logits, scale_factor=ms, mode="bilinear", align_corners=False)
            logits = logits[..., :H, :W]
        probs = torch.sigmoid(logits)
        return BranchOutputs(probs[:, 0], probs[:, 1], probs[:, 2])

    def forward_instance(self, image: torch.Tensor, query: InstanceQuery,
                         params: Optional[HeadParams] = None) -> BranchOutputs:
        """Masks of one instance at image resolution, each ``(H, W)``."""
        feats = self.extract_features(image)
        if params is None:
            params = self.generate_head_params(query, feats)
        batched = HeadParams(params.visible[None], params.amodal[None], params.region[None])
        return self.heads(feats, [0], [query], batched)[0]

    def forward(self, images: torch.Tensor, image_index: Sequence[int],
                queries: Sequence[InstanceQuery]) -> BranchOutputs:
        """Batched masks ``(N, H, W)``; ``queries[k]`` belongs to ``images[image_index[k]]``."""
        feats = self.extract_features(images)
        params = self.generate_head_params(list(queries), feats, image_index)
        return self.heads(feats, image_index, queries, params)


def training_targets(scene, h: Optional[int] = None, w: Optional[int] = None):
    """Per-instance ``(visible_box, amodal_box, region_bitmask)`` from boxes alone."""
    h = h or scene.height
    w = w or scene.width
    boxes = scene.amodal_boxes()
    out = []
    for i, inst in enumerate(scene.instances):
        region = rasterize_box(envelope_overlap_region(i, boxes), h, w)
        out.append((inst.visible_box, inst.amodal_box, region))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: AmodalNet, extra: Optional[dict] = None) -> Path:
    """Single-file archive: ``state_dict`` (parameter names as in the module
    tree), ``model_config``, ``fingerprint`` and free-form ``extra``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "fingerprint": model.cfg.fingerprint(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[AmodalNet, dict]:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "model_config" not in blob or "state_dict" not in blob:
        raise CheckpointError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**blob["model_config"])
    if cfg.fingerprint() != blob.get("fingerprint"):
        raise CheckpointError("checkpoint fingerprint does not match its stored config")
    if expected is not None and expected.fingerprint() != cfg.fingerprint():
        raise CheckpointError("checkpoint was trained with a different model config")
    model = AmodalNet(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
