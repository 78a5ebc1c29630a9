"""Command-line front door: synthesize data, generate masks, train,
stylize and evaluate stability.

Every command is deterministic given its flags, config and seed, and
echoes its effective configuration (into the output directory when the
command has one, otherwise to stdout). Exit codes: 0 success, 1 usage
error, 2 data or parse error, 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .coherence import sequence_stability
from .groundtruth import occlusion_mask, synth_clip
from .io import (
    FileFormatError,
    load_bundle,
    load_clip,
    read_flo,
    read_image,
    read_mask,
    save_bundle,
    save_clip,
    write_flo,
    write_image,
    write_mask,
)
from .models import SPLIT_LAYERS
from .pipeline import (
    NumericError,
    history_lines,
    stylize_video,
    stylize_video_baseline,
    train,
)
from .tensor import ShapeError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")


def _velocity(text: str) -> tuple[float, float]:
    try:
        dx, dy = text.split(",")
        return float(dx), float(dy)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DX,DY, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stylewarp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic clip with ground truth")
    p.add_argument("--out", required=True, help="output directory for the clip")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=_size, default=(48, 48), metavar="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0, help="gaussian pixel noise sigma")
    p.add_argument("--brightness-jitter", type=float, default=0.0)
    p.add_argument("--camera", type=_velocity, default=None, metavar="DX,DY",
                   help="fixed camera velocity (default: random per clip)")
    p.add_argument("--camera-speed", type=float, default=1.0)
    p.add_argument("--max-speed", type=float, default=3.0)
    p.add_argument("--integer-velocities", action="store_true")
    p.add_argument("--write-forward", action="store_true",
                   help="also write forward flows for cross-checking")

    p = sub.add_parser("gen-masks", help="occlusion mask from a bidirectional flow pair")
    p.add_argument("--fwd", required=True, help="forward flow file")
    p.add_argument("--bwd", required=True, help="backward flow file")
    p.add_argument("--out", required=True, help="output mask file (PGM)")
    p.add_argument("--cross-check-coeff", type=float, default=None)
    p.add_argument("--cross-check-bias", type=float, default=None)
    p.add_argument("--boundary-coeff", type=float, default=None)
    p.add_argument("--boundary-bias", type=float, default=None)

    p = sub.add_parser("train", help="train the flow and mask networks")
    p.add_argument("--data", action="append", required=True, metavar="DIR",
                   help="clip directory with a manifest (repeatable)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split-layer", choices=SPLIT_LAYERS, default=None)
    p.add_argument("--flow-warmup", type=int, default=None, dest="flow_warmup_iters")
    p.add_argument("--freeze-flow", action="store_const", const=True, default=None)

    p = sub.add_parser("stylize", help="stylize a directory of frames")
    p.add_argument("--model", required=True, help="weight archive")
    p.add_argument("--frames", required=True, help="directory of PPM frames")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("coherent", "baseline"), default="coherent")
    p.add_argument("--debug", action="store_true",
                   help="also dump predicted flows and masks per frame")

    p = sub.add_parser("eval", help="stability report over stylized frame directories")
    p.add_argument("--a", required=True, help="stylized frames directory")
    p.add_argument("--b", default=None, help="optional second directory to compare")
    p.add_argument("--flows", required=True, help="directory of ground-truth backward flows")
    p.add_argument("--masks", required=True, help="directory of ground-truth masks")
    p.add_argument("--out", default=None, help="optional report directory")
    return parser


def _echo(values: dict, out_dir: Path | None) -> None:
    text = cfgmod.format_effective(values)
    if out_dir is None:
        sys.stdout.write(text)
    else:
        (out_dir / "effective_config.txt").write_text(text)


def _sorted_files(directory, pattern: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileFormatError(d, None, "not a directory")
    files = sorted(d.glob(pattern))
    if not files:
        raise FileFormatError(d, None, f"no files matching {pattern}")
    return files


def cmd_synth(args) -> int:
    values = cfgmod.resolve(
        {},
        {
            "frames": args.frames,
            "height": args.size[0],
            "width": args.size[1],
            "seed": args.seed,
            "objects": args.objects,
            "noise_sigma": args.noise,
            "brightness_jitter": args.brightness_jitter,
            "camera_velocity": args.camera,
            "camera_speed": args.camera_speed,
            "max_speed": args.max_speed,
            "integer_velocities": args.integer_velocities or None,
        },
    )
    clip = synth_clip(cfgmod.synth_config(values), seed=args.seed)
    out = Path(args.out)
    save_clip(clip, out, include_forward=args.write_forward)
    _echo(values, out)
    print(f"wrote {len(clip.frames)} frames to {out}")
    return 0


def cmd_gen_masks(args) -> int:
    overrides = {
        "cross_check_coeff": args.cross_check_coeff,
        "cross_check_bias": args.cross_check_bias,
        "boundary_coeff": args.boundary_coeff,
        "boundary_bias": args.boundary_bias,
    }
    values = cfgmod.resolve({}, overrides)
    fwd = read_flo(args.fwd)
    bwd = read_flo(args.bwd)
    mask = occlusion_mask(fwd, bwd, cfgmod.occlusion_params(values))
    write_mask(mask, args.out)
    _echo({k: values[k] for k in overrides}, None)
    print(f"wrote mask to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_values = cfgmod.load_config(args.config) if args.config else {}
    values = cfgmod.resolve(
        file_values,
        {
            "iterations": args.iterations,
            "batch": args.batch,
            "lr": args.lr,
            "seed": args.seed,
            "split_layer": args.split_layer,
            "flow_warmup_iters": args.flow_warmup_iters,
            "freeze_flow": args.freeze_flow,
        },
    )
    clips = [load_clip(d) for d in args.data]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(values, out)
    bundle = cfgmod.build_bundle(values)
    cfg = cfgmod.train_config(values)
    bundle, history = train(bundle, clips, cfg, checkpoint_dir=out / "checkpoints")
    save_bundle(bundle, out / "model.swb")
    (out / "history.txt").write_text("\n".join(history_lines(history)) + "\n")
    summary = {
        "iterations": len(history),
        "final": history[-1] if history else None,
        "model": "model.swb",
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if history:
        print(history_lines(history)[-1])
    print(f"saved model to {out / 'model.swb'}")
    return 0


def cmd_stylize(args) -> int:
    bundle = load_bundle(args.model)
    frame_paths = _sorted_files(args.frames, "*.ppm")
    frames = [read_image(p) for p in frame_paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(
        {
            "model": str(args.model),
            "mode": args.mode,
            "frames": str(args.frames),
            "count": len(frames),
        },
        out,
    )
    if args.mode == "baseline":
        outputs = stylize_video_baseline(bundle, frames)
        masks, flows = [], []
    else:
        outputs, masks, flows = stylize_video(bundle, frames)
    for t, image in enumerate(outputs):
        write_image(image, out / f"out_{t:04d}.ppm")
    if args.debug:
        for t, (mask, flow) in enumerate(zip(masks, flows)):
            write_mask(mask, out / f"mask_{t:04d}.pgm")
            write_flo(flow, out / f"flow_{t:04d}.flo")
    print(f"wrote {len(outputs)} stylized frames to {out}")
    return 0


def _load_eval_dir(frames_dir, flows_dir, masks_dir):
    frames = [read_image(p) for p in _sorted_files(frames_dir, "*.ppm")]
    flows = [read_flo(p) for p in _sorted_files(flows_dir, "*.flo")]
    masks = [read_mask(p) for p in _sorted_files(masks_dir, "*.pgm")]
    return frames, flows, masks


def cmd_eval(args) -> int:
    frames_a, flows, masks = _load_eval_dir(args.a, args.flows, args.masks)
    per_a, mean_a = sequence_stability(frames_a, flows, masks)
    lines = [f"pair={i} a={err:.12g}" for i, err in enumerate(per_a)]
    summary = {"a": {"per_pair": per_a, "mean": mean_a}}
    if args.b is not None:
        frames_b = [read_image(p) for p in _sorted_files(args.b, "*.ppm")]
        per_b, mean_b = sequence_stability(frames_b, flows, masks)
        lines = [
            f"pair={i} a={ea:.12g} b={eb:.12g}" for i, (ea, eb) in enumerate(zip(per_a, per_b))
        ]
        lines.append(f"mean a={mean_a:.12g} b={mean_b:.12g}")
        summary["b"] = {"per_pair": per_b, "mean": mean_b}
    else:
        lines.append(f"mean a={mean_a:.12g}")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report)
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "gen-masks": cmd_gen_masks,
    "train": cmd_train,
    "stylize": cmd_stylize,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return 3
    except (FileFormatError, ConfigError, ShapeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
