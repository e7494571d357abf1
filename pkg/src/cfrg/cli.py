"""Command-line entry point: preprocess, train, eval, infer, ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import ast
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATION_VARIANTS, Config, apply_overrides, desk_config, load_config, save_config
from .dataset import load_sample, preprocess_tree, scan_layout
from .errors import CFRGError, ConfigError
from .infer import read_prediction, write_prediction
from .metrics import MetricsReport, evaluate_category, mean_report

log = logging.getLogger("cfrg")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def build_config(args: argparse.Namespace) -> Config:
    """Config file, then the desk preset, then --seed/--category/--data-root, then --set."""
    cfg = load_config(args.config) if args.config else Config()
    if args.desk_scale:
        cfg = desk_config(cfg)
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.category:
        overrides["train.categories"] = list(args.category)
    if args.data_root:
        overrides["train.data_root"] = args.data_root
    overrides.update(_parse_set(args.set))
    return apply_overrides(cfg, overrides) if overrides else cfg


def _categories(cfg: Config) -> list[str]:
    if not cfg.train.categories:
        raise ConfigError("no categories given; pass --category or set train.categories")
    return list(cfg.train.categories)


def _checkpoint_for(path: Path, category: str) -> Path:
    return path if path.is_file() else path / category / "last.pt"


def _write_reports(reports: list[MetricsReport], out: Path | None) -> None:
    for r in reports:
        print(r.to_json())
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps([r.as_row() for r in reports], indent=2))
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(reports[0].as_row()))
        writer.writeheader()
        for r in reports:
            writer.writerow(r.as_row())


# --------------------------------------------------------------------------- subcommands


def cmd_preprocess(args, cfg: Config) -> None:
    manifest = preprocess_tree(args.input, args.output, cfg.tile)
    log.info("wrote %d tiles to %s", len(manifest), args.output)


def cmd_train(args, cfg: Config) -> None:
    from .train import train

    categories = _categories(cfg)
    # fail fast on any malformed category before training the first one
    indices = {c: scan_layout(cfg.train.data_root, c) for c in categories}
    root = Path(args.output_dir or cfg.train.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, root / "config.json")
    for c in categories:
        result = train(cfg, c, root / c, index=indices[c], resume=args.resume)
        log.info("%s: checkpoint %s", c, result.checkpoint)


def cmd_infer(args, cfg: Config) -> None:
    from .train import load_checkpoint, predict

    out = Path(args.output)
    for c in _categories(cfg):
        model, _ = load_checkpoint(_checkpoint_for(Path(args.checkpoint), c), cfg, allow_mismatch=args.force)
        index = scan_layout(cfg.train.data_root, c)
        preds = predict(model, index.split(args.split), cfg)
        for sid, smap in zip(preds.source_ids, preds.maps):
            write_prediction(out / c, sid, smap)
        log.info("%s: wrote %d predictions to %s", c, len(preds.maps), out / c)


def _report_from_dumps(cfg: Config, category: str, pred_dir: Path) -> MetricsReport:
    index = scan_layout(cfg.train.data_root, category)
    maps, masks, scores, labels = [], [], [], []
    for entry in index.split("test"):
        smap = read_prediction(pred_dir, entry.source_id)
        h, w = smap.pixel_scores.shape
        sample = load_sample(entry, resolution=h, normalize=False)
        maps.append(smap.pixel_scores)
        masks.append(sample.mask if sample.mask is not None else np.zeros((h, w), np.uint8))
        scores.append(smap.image_score)
        labels.append(sample.label)
    return evaluate_category(
        maps, masks, scores, labels, category,
        cfg.metrics.pro_fpr_limit, cfg.metrics.pool_pixels, cfg.metrics.pro_max_thresholds,
    )


def cmd_eval(args, cfg: Config) -> None:
    from .train import evaluate, load_checkpoint

    if bool(args.checkpoint) == bool(args.predictions):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")
    reports = []
    for c in _categories(cfg):
        if args.predictions:
            reports.append(_report_from_dumps(cfg, c, Path(args.predictions) / c))
        else:
            model, _ = load_checkpoint(_checkpoint_for(Path(args.checkpoint), c), cfg, allow_mismatch=args.force)
            reports.append(evaluate(model, cfg, c))
    reports.append(mean_report(reports))
    _write_reports(reports, Path(args.output) if args.output else None)


def cmd_ablate(args, cfg: Config) -> None:
    from .train import ablation_matrix, ablation_table

    out = Path(args.output) if args.output else None
    table_rows = []
    for c in _categories(cfg):
        rows = ablation_matrix(cfg, c, args.variants, args.seeds, out_dir=None if out is None else out / c)
        for row in ablation_table(rows):
            table_rows.append({"category": c, **row})
    for row in table_rows:
        print(json.dumps(row))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["category", "variant", *MetricsReport.METRICS])
            writer.writeheader()
            writer.writerows(table_rows)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. train.epochs=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--category", action="append", help="repeatable; overrides train.categories")
    common.add_argument("--data-root")
    common.add_argument("--desk-scale", action="store_true", help="tiny CPU backbones and short schedule")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="cfrg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="tile oversized images")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one model per category")
    p.add_argument("--output-dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="write anomaly maps for a split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training output dir")
    p.add_argument("--output", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--force", action="store_true", help="accept a config-hash mismatch")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="metrics per category plus the mean row")
    p.add_argument("--checkpoint", help="checkpoint file or training output dir")
    p.add_argument("--predictions", help="directory written by infer")
    p.add_argument("--output", help="directory for metrics.json and metrics.csv")
    p.add_argument("--force", action="store_true", help="accept a config-hash mismatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation variants")
    p.add_argument("--variants", nargs="+", default=list(ABLATION_VARIANTS), choices=ABLATION_VARIANTS)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--output")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        args.func(args, cfg)
    except CFRGError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
