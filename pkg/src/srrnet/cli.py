"""Command-line surface: synth, train, infer, eval, trace-score, gradcheck, params.

All randomness is governed by ``--seed``. A flat ``key=value`` config file can
supply any long-option default; explicit flags win. Exit codes: 0 success,
1 numeric/runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_sequence, load_static_pool, load_video_dataset
from .gradcheck import gradcheck_model
from .metrics import evaluate_dataset, format_report_table, write_report_csv
from .model import FULL_SCALE_REFERENCE_PARAMS, build_model, preset_config
from .nn import count_parameters, load_checkpoint
from .pipeline import (
    REFERENCE_MODES,
    TrainSchedule,
    infer_sequence,
    train,
    write_score_trace,
)
from .pnm import write_error_map, write_mask
from .synth import SynthParams, generate_sequence, generate_static_pool
from .attention import ATTENTION_MODES


def _read_config_file(path: str) -> dict:
    """Parse a flat key=value file into an argparse defaults dict."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=str, default=None,
                        help="flat key=value config file; flags override it")


def _add_model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", choices=("desk", "full"), default="desk")
    parser.add_argument("--attention-mode", choices=ATTENTION_MODES, default="rma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srrnet",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic camouflage sequence")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--contrast", type=float, default=0.35)
    p.add_argument("--texture-grain", type=int, default=8)
    p.add_argument("--motion-amplitude", type=float, default=3.0)
    p.add_argument("--occlusion-prob", type=float, default=0.0)
    p.add_argument("--static-pool", type=int, default=0, metavar="N",
                   help="instead generate a static pretraining pool of N images")

    p = sub.add_parser("train", help="train a model on dataset directories")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--video-data", type=str, default=None)
    p.add_argument("--static-data", type=str, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--static-iterations", type=int, default=0)
    p.add_argument("--video-iterations", type=int, default=0)
    p.add_argument("--static-lr", type=float, default=6e-5)
    p.add_argument("--video-lr", type=float, default=1e-5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--error-target", choices=("absolute", "signed"), default="absolute")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--mask-dropout", type=float, default=0.0,
                   help="probability of zeroing each mask input channel per sample")
    p.add_argument("--checkpoint", type=str, default=None,
                   help="resume from an existing checkpoint")

    p = sub.add_parser("infer", help="sequential inference over a sequence directory")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference-mode", choices=REFERENCE_MODES, default="scored")

    p = sub.add_parser("eval", help="evaluate prediction masks against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", type=str, default=None, help="CSV output path")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--flat", action="store_true",
                   help="average per frame instead of per sequence")

    p = sub.add_parser("trace-score", help="score trace CSV with true MAE column")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", required=True, help="sequence directory with masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference-mode", choices=REFERENCE_MODES, default="scored")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--samples-per-param", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=1.0)

    p = sub.add_parser("params", help="parameter count per preset")
    _add_common(p)
    _add_model_flags(p)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # Pre-scan for --config so file values become defaults before final parsing.
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        values = _read_config_file(pre.config)
        known = {a.dest for sp in parser._subparsers._group_actions
                 for a in sp.choices[pre.command]._actions}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[pre.command]
        typed = {}
        for action in sub._actions:
            if action.dest in values:
                raw = values[action.dest]
                if action.type is not None:
                    typed[action.dest] = action.type(raw)
                elif isinstance(action, argparse._StoreTrueAction):
                    typed[action.dest] = raw.lower() in ("1", "true", "yes")
                else:
                    typed[action.dest] = raw
        sub.set_defaults(**typed)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# command implementations


def _cmd_synth(args) -> int:
    if args.static_pool:
        out = generate_static_pool(args.seed, args.static_pool, args.size, args.out)
        print(f"wrote static pool of {args.static_pool} images to {out}")
        return 0
    params = SynthParams(seed=args.seed, frames=args.frames, size=args.size,
                         texture_grain=args.texture_grain, contrast=args.contrast,
                         motion_amplitude=args.motion_amplitude,
                         occlusion_prob=args.occlusion_prob)
    out = generate_sequence(params, args.out)
    print(f"wrote {args.frames} frames to {out}")
    return 0


def _cmd_train(args) -> int:
    model = build_model(args.preset, attention_mode=args.attention_mode,
                        seed=args.seed, error_activation=(
                            "tanh" if args.error_target == "signed" else "sigmoid"))
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    schedule = TrainSchedule(
        static_iterations=args.static_iterations,
        video_iterations=args.video_iterations,
        static_lr=args.static_lr, video_lr=args.video_lr,
        gamma=args.gamma, error_target=args.error_target,
        seed=args.seed, flip=not args.no_flip, crop=args.crop,
        mask_dropout=args.mask_dropout)
    video = load_video_dataset(args.video_data) if args.video_data else None
    static = load_static_pool(args.static_data) if args.static_data else None

    def progress(it, parts):
        print(f"iter {it}: bce={parts['bce']:.5f} mse={parts['mse']:.5f} "
              f"total={parts['total']:.5f}")

    result = train(model, schedule, video_sequences=video, static_pool=static,
                   out_dir=args.out, progress=progress)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss trace: {result.csv_path}")
    return 0


def _load_model_for_inference(args):
    model = build_model(args.preset, attention_mode=args.attention_mode,
                        seed=args.seed)
    load_checkpoint(args.checkpoint, model)
    return model


def _cmd_infer(args) -> int:
    model = _load_model_for_inference(args)
    record = load_sequence(args.data, require_masks=False)
    results = infer_sequence(model, record.frames,
                             reference_mode=args.reference_mode, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        write_mask(out / f"{res.frame_index:05d}.pgm", res.o_msk)
        write_error_map(out / f"{res.frame_index:05d}_err.pgm", res.o_err)
    gts = record.masks if len(record.masks) == len(record.frames) else None
    write_score_trace(out / "scores.csv", results, gts)
    print(f"wrote {len(results)} masks to {out}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate_dataset(args.pred, args.gt, allow_missing=args.allow_missing,
                              flat=args.flat)
    print(format_report_table(report))
    if args.out:
        write_report_csv(args.out, report)
        print(f"csv: {args.out}")
    return 0


def _cmd_trace_score(args) -> int:
    model = _load_model_for_inference(args)
    record = load_sequence(args.data, require_masks=True)
    results = infer_sequence(model, record.frames,
                             reference_mode=args.reference_mode, seed=args.seed)
    write_score_trace(args.out, results, record.masks)
    print(f"score trace: {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    model = build_model(args.preset, attention_mode=args.attention_mode,
                        seed=args.seed)
    report = gradcheck_model(model, size=args.size,
                             samples_per_param=args.samples_per_param,
                             tol=args.tol, seed=args.seed, gamma=args.gamma)
    worst = report.worst()
    print(f"checked {len(report.checks)} parameter tensors; "
          f"max relative error {report.max_rel_err:.3e} "
          f"(worst: {worst.name if worst else 'n/a'}), tolerance {report.tol:.1e}")
    if not report.passed:
        print("GRADCHECK FAILED", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def _cmd_params(args) -> int:
    model = build_model(args.preset, attention_mode=args.attention_mode,
                        seed=args.seed)
    total = count_parameters(model)
    print(f"preset {args.preset}: {total:,} parameters ({total / 1e6:.2f}M)")
    if args.preset == "full":
        ratio = total / FULL_SCALE_REFERENCE_PARAMS
        print(f"reference full-scale count: {FULL_SCALE_REFERENCE_PARAMS / 1e6:.2f}M "
              f"(this preset is {ratio:.2%} of it)")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "trace-score": _cmd_trace_score,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, sys.argv[1:] if argv is None else list(argv))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
