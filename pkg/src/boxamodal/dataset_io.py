"""On-disk dataset layout.

::

    <root>/manifest.json           schema_version, config hash, scene ids
    <root>/images/<id>.png         lossless RGB image
    <root>/annotations/<id>.json   one SceneAnnotation, masks run-length encoded

Masks are encoded row-major as alternating run lengths starting with a run of
zeros (possibly of length 0).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .datagen import GenConfig, InstanceAnnotation, SceneAnnotation
from .geometry import KINS_BINS, Box, OcclusionLevel, level_by_name

SCHEMA_VERSION = 1


class DatasetError(Exception):
    pass


class SchemaVersionError(DatasetError):
    pass


def encode_rle(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    h, w = mask.shape
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode_rle(rle: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed RLE record: {exc}") from exc
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise DatasetError(f"corrupt RLE: counts sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


def annotation_to_dict(ann: SceneAnnotation) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "image_id": ann.image_id,
        "height": ann.height,
        "width": ann.width,
        "instances": [
            {
                "class_label": int(inst.class_label),
                "visible_box": inst.visible_box.as_list(),
                "amodal_box": inst.amodal_box.as_list(),
                "visible_mask": encode_rle(inst.visible_mask),
                "amodal_mask": encode_rle(inst.amodal_mask),
                "occlusion_level": inst.occlusion_level.name,
                "occlusion_ratio": float(inst.occlusion_ratio),
            }
            for inst in ann.instances
        ],
    }


def annotation_from_dict(d: dict, bins: Sequence[OcclusionLevel] = KINS_BINS) -> SceneAnnotation:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"annotation schema_version {version!r}, expected {SCHEMA_VERSION}")
    try:
        ann = SceneAnnotation(image_id=str(d["image_id"]), height=int(d["height"]), width=int(d["width"]))
        for rec in d["instances"]:
            vis = decode_rle(rec["visible_mask"])
            amo = decode_rle(rec["amodal_mask"])
            if vis.shape != (ann.height, ann.width) or amo.shape != (ann.height, ann.width):
                raise DatasetError(f"{ann.image_id}: mask size does not match the image")
            ann.instances.append(InstanceAnnotation(
                class_label=int(rec["class_label"]),
                visible_box=Box.from_list(rec["visible_box"]),
                amodal_box=Box.from_list(rec["amodal_box"]),
                visible_mask=vis,
                amodal_mask=amo,
                occlusion_level=level_by_name(rec["occlusion_level"], bins),
                occlusion_ratio=float(rec.get("occlusion_ratio", 0.0)),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed annotation: {exc}") from exc
    return ann


def write_dataset(scenes: Iterable[tuple[np.ndarray, SceneAnnotation]], root,
                  gen_config: Optional[GenConfig] = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    ids = []
    for image, ann in scenes:
        Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(
            root / "images" / f"{ann.image_id}.png", optimize=False)
        with open(root / "annotations" / f"{ann.image_id}.json", "w") as f:
            json.dump(annotation_to_dict(ann), f, sort_keys=True, separators=(",", ":"))
        ids.append(ann.image_id)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenes": ids,
        "config_hash": gen_config.fingerprint() if gen_config else None,
        "generator_config": gen_config.to_dict() if gen_config else None,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"dataset schema_version {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return manifest


def read_dataset(root) -> list[tuple[np.ndarray, SceneAnnotation]]:
    root = Path(root)
    manifest = read_manifest(root)
    bins = KINS_BINS
    if manifest.get("generator_config"):
        bins = GenConfig.from_dict(manifest["generator_config"]).bins
    scenes = []
    for image_id in manifest["scenes"]:
        img_path = root / "images" / f"{image_id}.png"
        ann_path = root / "annotations" / f"{image_id}.json"
        if not img_path.is_file() or not ann_path.is_file():
            raise DatasetError(f"missing files for scene {image_id}")
        with Image.open(img_path) as im:
            image = np.array(im.convert("RGB"))
        try:
            ann = annotation_from_dict(json.loads(ann_path.read_text()), bins)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"unreadable annotation {ann_path}: {exc}") from exc
        if image.shape[:2] != (ann.height, ann.width):
            raise DatasetError(f"{image_id}: image size {image.shape[:2]} disagrees with annotation")
        scenes.append((image, ann))
    return scenes
