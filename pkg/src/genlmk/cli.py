"""``genlmk`` command line: synthetic data, training, inference, overlays, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import FrameIOError, GenlmkError, ParamError

log = logging.getLogger("genlmk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONFINITE = 0, 2, 3, 4


def load_config(path) -> dict:
    """YAML or JSON mapping (JSON is a YAML subset)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FrameIOError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParamError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ParamError(f"config {path} must be a mapping")
    return doc


def apply_override(doc: dict, item: str) -> None:
    """``a.b=value``; the value is parsed as YAML so numbers and lists work."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ParamError(f"override must look like key=value, got {item!r}")
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ParamError(f"cannot set {key}: {p} is not a mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def _frame_ids(paths) -> np.ndarray:
    try:
        return np.array([int(p.stem) for p in paths], dtype=np.int64)
    except ValueError:
        return np.arange(len(paths))


def _frames(directory):
    from .data import list_frames

    paths = list_frames(directory)
    if not paths:
        raise FrameIOError(f"no frames in {directory}")
    return paths


def cmd_synth(args) -> int:
    from .data import SynthConfig, synth_generate

    cfg = SynthConfig.from_dict(load_config(args.config) if args.config else {})
    manifest = synth_generate(cfg, args.out)
    print(f"wrote {args.out}: {json.dumps(manifest['counts'])}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, fit

    doc = load_config(args.config)
    for item in args.set or []:
        apply_override(doc, item)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.steps is not None:
        doc["steps"] = args.steps
    cfg = TrainConfig.from_dict(doc)
    ckpt = fit(cfg, args.out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import LandmarkTrack
    from .training import Predictor

    paths = _frames(args.frames)
    points, _ = Predictor.from_checkpoint(args.ckpt).predict_frames(paths)
    LandmarkTrack(_frame_ids(paths), points).to_jsonl(args.out)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    from .data import read_frame
    from .renderer import overlay_export
    from .training import Predictor

    paths = _frames(args.frames)
    predictor = Predictor.from_checkpoint(args.ckpt)
    points, sizes = predictor.predict_frames(paths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, pts, (h, w) in zip(paths, points, sizes):
        image, _ = read_frame(path)
        overlay_export(pts / np.array([w, h]), image, out / f"{path.stem}.png", template=predictor.template)
    print(f"wrote {len(paths)} overlays to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import run_eval, summary

    report = run_eval(args.ckpt, args.data, args.out)
    print(summary(report))
    return EXIT_OK


def cmd_template_validate(args) -> int:
    from .template import load_template, validate_template

    t = load_template(args.file)
    problems = validate_template(t)
    for v in problems:
        print(f"{v.code}: {v.message}")
    if problems:
        return EXIT_DATA
    print(f"ok: {t.n_landmarks} landmarks, {len(t.lines)} lines, {len(t.springs)} springs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genlmk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic marked/unmarked dataset or motion sequence")
    p.add_argument("--config", help="SynthConfig as YAML/JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a TrainConfig file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint root directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. gan.ngf=32")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict landmarks for a directory of frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="landmarks.jsonl")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("overlay", help="draw predicted landmarks onto frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("eval", help="landmark error (and jitter for sequences) against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory with unmarked/ and gt/landmarks.jsonl")
    p.add_argument("--out", required=True, help="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("template", help="template utilities")
    tsub = p.add_subparsers(dest="template_command", required=True)
    v = tsub.add_parser("validate", help="check a template file")
    v.add_argument("file")
    v.set_defaults(func=cmd_template_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GenlmkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: E_IO: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
