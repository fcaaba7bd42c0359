"""Command-line entry point: generate-data, train, eval, predict, visualize.

Every leaf of the run configuration is also a flag (``--train.weights.target 5``).
Failures print one JSON line to stderr and exit with 2 (config), 3 (data)
or 4 (numerical divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig, build_config, leaf_keys, load_config_file, parse_flag_value
from .data import (DataError, Domain, load_dataset, load_depth_png, load_eval_depth, load_image_png,
                   save_depth_png, save_image_png)
from .evaluation import EvaluationError, colorize_depth, evaluate_dataset, evaluate_predictions, predict_depth
from .networks import CheckpointError
from .synthetic import GenerationError, generate_synthetic_datasets
from .trainer import DivergenceError, adapt, depth_net_from_checkpoint, pretrain

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

logger = logging.getLogger("desc_depth")


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same single-line JSON as every other failure."""

    def error(self, message):
        self.exit(EXIT_CONFIG, json.dumps({"error": "config", "exit_code": EXIT_CONFIG, "message": message}) + "\n")


def _config_parent() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="alias of the top-level seed key")
    group = p.add_argument_group("configuration keys")
    for key in leaf_keys():
        if key == "seed":
            continue
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = _Parser(prog="desc-depth", description=__doc__.splitlines()[0])
    parser.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("generate-data", parents=[parent], help="render the synthetic source/target datasets")

    p = sub.add_parser("train", parents=[parent], help="run the pretrain or adapt phase")
    p.add_argument("--phase", choices=("pretrain", "adapt"), help="alias of train.phase")
    p.add_argument("--checkpoint", help="pretrain checkpoint (required for adapt, or to resume)")

    p = sub.add_parser("eval", parents=[parent], help="evaluate a checkpoint or a directory of depth PNGs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of <id>.png depth maps")
    p.add_argument("--out", help="report directory (default <output_dir>/eval)")

    p = sub.add_parser("predict", parents=[parent], help="write depth PNGs for input images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory of PNGs")
    p.add_argument("--out", help="output directory (default <output_dir>/predictions)")

    p = sub.add_parser("visualize", parents=[parent], help="colorize depth PNGs")
    p.add_argument("--input", required=True, help="depth PNG or directory of depth PNGs")
    p.add_argument("--out", help="output directory (default <output_dir>/visualize)")
    p.add_argument("--range", nargs=2, type=float, metavar=("MIN", "MAX"))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_data = load_config_file(args.config) if args.config else {}
    overrides = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            overrides[dest[4:]] = parse_flag_value(value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "phase", None) is not None:
        overrides["train.phase"] = args.phase
    return build_config(file_data, overrides)


def _image_paths(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.png"))
    if not path.exists():
        raise DataError(f"{path} not found")
    return [path]


def cmd_generate_data(cfg: RunConfig, args) -> dict:
    root = cfgmod.resolve_output(cfg.data.root)
    out = generate_synthetic_datasets(cfg.generator, root, cfg.seed)
    return {"root": str(root), "source": len(out.source_specs), "target": len(out.target_specs)}


def cmd_train(cfg: RunConfig, args) -> dict:
    tc = cfg.train_config()
    out_dir = cfg.output_path()
    root = cfgmod.resolve_output(cfg.data.root)
    if tc.phase == "adapt":
        if not args.checkpoint:
            raise ConfigError("train.phase=adapt requires --checkpoint pointing to a pretrain checkpoint")
        if not Path(args.checkpoint).exists():
            raise ConfigError(f"checkpoint {args.checkpoint} not found")
        ckpt = adapt(root, args.checkpoint, tc, out_dir)
    else:
        ckpt = pretrain(root, tc, out_dir, resume=args.checkpoint)
    return {"checkpoint": str(ckpt), "log": str(out_dir / f"{tc.phase}_log.jsonl")}


def cmd_eval(cfg: RunConfig, args) -> dict:
    root = cfgmod.resolve_output(cfg.data.root)
    out_dir = Path(args.out) if args.out else cfg.output_path("eval")
    if args.checkpoint:
        report = evaluate_dataset(args.checkpoint, root, cfg.data.eval_split, cfg.data.eval_domain,
                                  cfg.eval, out_dir)
    else:
        ds = load_dataset(root, cfg.data.eval_domain, cfg.data.eval_split)
        pred_dir = Path(args.predictions)
        preds, gts = {}, {}
        for s in ds:
            f = pred_dir / f"{s.id}.png"
            if not f.exists():
                raise DataError(f"missing prediction {f}")
            preds[s.id] = load_depth_png(f).values
            gts[s.id] = load_eval_depth(root, s.id) if Domain(cfg.data.eval_domain) is Domain.TARGET else s.depth
        report = evaluate_predictions(preds, gts, cfg.eval)
        report.write(out_dir)
    return {"report": str(out_dir / "report.json"), **report.to_dict()}


def _pad_to(image: np.ndarray, divisor: int) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = -h % divisor, -w % divisor
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")


def cmd_predict(cfg: RunConfig, args) -> dict:
    net = depth_net_from_checkpoint(args.checkpoint)
    out_dir = Path(args.out) if args.out else cfg.output_path("predictions")
    written = []
    for path in _image_paths(Path(args.input)):
        image = load_image_png(path)
        h, w = image.shape[:2]
        depth = predict_depth(net, _pad_to(image, net.divisor)[None])[0][:h, :w]
        target = out_dir / f"{path.stem}.png"
        save_depth_png(depth, target)
        written.append(str(target))
    return {"written": written}


def cmd_visualize(cfg: RunConfig, args) -> dict:
    out_dir = Path(args.out) if args.out else cfg.output_path("visualize")
    written = []
    for path in _image_paths(Path(args.input)):
        depth = load_depth_png(path)
        values = np.where(depth.valid_mask, depth.values, 0.0)
        target = out_dir / f"{path.stem}.png"
        save_image_png(colorize_depth(values, tuple(args.range) if args.range else None) / 255.0, target)
        written.append(str(target))
    return {"written": written}


COMMANDS = {"generate-data": cmd_generate_data, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "visualize": cmd_visualize}


def _fail(code: int, kind: str, message: str, details: Optional[list] = None) -> int:
    rec = {"error": kind, "exit_code": code, "message": message}
    if details:
        rec["details"] = details
    sys.stderr.write(json.dumps(rec) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error already reported
        return int(exc.code or 0)
    if args.print_schema:
        print(json.dumps(cfgmod.json_schema(), indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_CONFIG, "config", "no command given")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e), e.errors)
    except DivergenceError as e:
        return _fail(EXIT_DIVERGENCE, "divergence", str(e), [e.term])
    except (DataError, GenerationError, CheckpointError, EvaluationError, FileNotFoundError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    print(json.dumps({"command": args.command, **result}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
