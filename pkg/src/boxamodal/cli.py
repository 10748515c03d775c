"""Command-line entry point: ``boxamodal {generate,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 2 configuration or usage error, 3 dataset or
checkpoint error, 4 numeric failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck as gradcheck_mod
from .config import ConfigError, TrainConfig, load_config
from .dataset_io import DatasetError, read_dataset, write_dataset
from .datagen import GenConfig, generate_dataset, scene_problems
from .evaluation import EvalConfig, evaluate, fuse, predict, write_table
from .model import CheckpointError, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("boxamodal")


def _parse_set(items) -> dict:
    """``["loss.K=2", "hflip=false"]`` -> ``{"loss.K": 2, "hflip": False}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _train_overrides(args) -> dict:
    overrides = _parse_set(args.set)
    for flag, key in (("dataset", "dataset"), ("output_dir", "output_dir"),
                      ("iterations", "total_iterations"), ("batch_size", "batch_size"),
                      ("lr", "base_lr"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    data = {}
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    data.update(_parse_set(args.set))
    for key in ("height", "width", "seed"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    try:
        cfg = GenConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator config: {exc}") from exc
    scenes = generate_dataset(cfg, args.n, start=args.start)
    annotated = cfg.n_distractors == 0
    bad = [(ann.image_id, p) for _, ann in scenes
           for p in scene_problems(ann, cfg.bins, annotated_occluders=annotated)]
    if bad:
        for image_id, problem in bad[:10]:
            log.error("%s: %s", image_id, problem)
        raise DatasetError(f"{len(bad)} invariant violations in generated scenes")
    write_dataset(scenes, args.out, cfg)
    levels = [inst.occlusion_level.name for _, ann in scenes for inst in ann.instances]
    names, counts = np.unique(levels, return_counts=True)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    print("  " + "  ".join(f"{n}: {c}" for n, c in zip(names, counts)))
    return EXIT_OK


def _run_training(cfg: TrainConfig, scenes=None):
    from .plotting import loss_curves
    from .train import train

    model, records = train(cfg, scenes)
    if cfg.output_dir and records:
        loss_curves(records, Path(cfg.output_dir) / "loss_curves.png")
    return model, records


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    if not cfg.dataset:
        raise ConfigError("no dataset: pass --dataset, set it in the config, or set BOXAMODAL_DATA_ROOT")
    scenes = read_dataset(cfg.dataset)
    _, records = _run_training(cfg, scenes)
    last = records[-1] if records else None
    print(f"trained {cfg.total_iterations} iterations; final loss "
          f"{last.total:.4f}" if last else "trained")
    print(f"checkpoint: {Path(cfg.output_dir) / 'model_final.pt'}")
    return EXIT_OK


def _qualitative(preds, scenes, cfg: EvalConfig, n: int):
    """Scenes with the most occluded ground truth come first."""
    order = sorted(range(len(scenes)),
                   key=lambda s: -sum(i.occlusion_ratio for i in scenes[s][1].instances))
    for s in order[:n]:
        image, ann = scenes[s]
        rows = []
        for (m_v, m_a, m_r), inst in zip(preds[s], ann.instances):
            rows.append({
                "gt": inst.amodal_mask, "m_v": m_v, "m_a": m_a, "m_r": m_r,
                "fused": fuse(m_v, m_a, m_r, cfg.enable_fusion, cfg.region_threshold,
                              cfg.soft_fusion, cfg.mask_threshold),
                "title": f"{inst.occlusion_level.name} ({inst.occlusion_ratio:.2f})",
            })
        yield ann.image_id, image, rows


def cmd_eval(args) -> int:
    from .plotting import level_bars, loss_curves, mask_panels
    from .train import read_log

    model, _ = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.dataset)
    cfg = EvalConfig(enable_fusion=not args.no_fusion, soft_fusion=args.soft_fusion,
                     region_threshold=args.region_threshold, mask_threshold=args.mask_threshold)
    preds = predict(model, scenes)
    report = evaluate(preds, scenes, cfg, fingerprint=model.cfg.fingerprint())
    out = Path(args.out)
    report.save(out / "report.json")
    rows = report.table_rows()
    write_table(out / "table.csv", rows)
    level_bars({report.method: report.per_level_miou, "visible-only": report.baseline_per_level},
               out / "levels.png")
    for image_id, image, panel in _qualitative(preds, scenes, cfg, args.panels):
        mask_panels(image, panel, out / f"panels_{image_id}.png")
    train_log = Path(args.checkpoint).parent / "train_log.jsonl"
    if train_log.is_file():
        loss_curves(read_log(train_log), out / "loss_curves.png")
    for row in rows:
        print(",".join(row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run(seed=args.seed, trials=args.trials, tolerance=args.tolerance)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


ABLATION_GRID = list(itertools.product((False, True), repeat=3))  # (UN, NE, FS)


def ablation_label(un: bool, ne: bool, fs: bool) -> str:
    parts = [name for name, on in (("UN", un), ("NE", ne), ("FS", fs)) if on]
    return "+".join(parts) if parts else "none"


def cmd_ablate(args) -> int:
    from .plotting import ablation_chart

    base = load_config(args.config, _train_overrides(args))
    if not base.dataset:
        raise ConfigError("no training dataset given")
    train_scenes = read_dataset(base.dataset)
    test_scenes = read_dataset(args.eval_dataset)
    out = Path(args.out)
    header = ["UN", "NE", "FS"]
    table, chart = [], []
    for un, ne, fs in ABLATION_GRID:
        label = ablation_label(un, ne, fs)
        cfg = base.replace(
            output_dir=str(out / f"run_{label}"),
            loss={**base.loss.to_dict(), "enable_uniform": un, "enable_neighbor": ne, "enable_fusion": fs},
            eval={**asdict(base.eval), "enable_fusion": fs},
        )
        log.info("ablation row %s", label)
        model, _ = _run_training(cfg, train_scenes)
        report = evaluate(predict(model, test_scenes), test_scenes, cfg.eval,
                          fingerprint=model.cfg.fingerprint())
        report.save(out / f"run_{label}" / "report.json")
        levels = report.table_rows()[0][1:-1]
        if not table:
            table.append(header + levels + ["Mean"])
        table.append(["x" if v else "" for v in (un, ne, fs)] + report.table_rows()[1][1:])
        chart.append({"label": label, "mean": report.mean_miou, "FG-3": report.per_level_miou.get("FG-3")})
    write_table(out / "ablation.csv", table)
    ablation_chart(chart, out / "ablation.png")
    for row in table:
        print(",".join(row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="YAML training config")
    p.add_argument("--dataset", help="training dataset directory")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. loss.enable_neighbor=false (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxamodal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic occlusion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--start", type=int, default=0, help="index of the first scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--config", help="YAML generator config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from box annotations")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report.json, table.csv and figures")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-fusion", action="store_true", help="score the amodal branch directly")
    p.add_argument("--soft-fusion", action="store_true")
    p.add_argument("--region-threshold", type=float, default=0.5)
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--panels", type=int, default=3, help="number of qualitative scene figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=gradcheck_mod.TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the 8 UN/NE/FS toggle combinations")
    _add_train_flags(p)
    p.add_argument("--eval-dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import NumericError

    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
