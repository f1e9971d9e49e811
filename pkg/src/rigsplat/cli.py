"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, bad
indices, bad config), 3 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import sceneio as sio
from . import synth
from . import trainer as tr
from .errors import DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliParser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage problems; we want 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def load_config(args):
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}", code="unreadable")
        except json.JSONDecodeError as exc:
            raise DataError(f"config is not valid JSON: {exc}", code="parse")
        return tr.TrainConfig.from_dict(doc)
    if getattr(args, "desk", False):
        return tr.TrainConfig.desk_profile()
    return tr.TrainConfig()


def apply_overrides(config, args):
    for name in ("seed", "sh_degree", "binding", "iterations"):
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "iterations":
            config.total_iterations = value
            config.densify_until = min(config.densify_until, value)
        else:
            setattr(config, name, value)
    return config


def frame_record(dataset, index):
    if not 0 <= index < len(dataset):
        raise DataError(
            f"frame index {index} out of range [0, {len(dataset) - 1}]",
            code="frame_range",
        )
    return dataset.frames[index]


def write_render(bundle, out_path, alpha_path=None):
    sio.write_image(out_path, bundle.pred)
    if alpha_path:
        sio.write_alpha_map(alpha_path, bundle.out.alpha)


def cmd_init(args):
    dataset = sio.load_manifest(args.manifest)
    config = apply_overrides(load_config(args), args)
    state = tr.init_state(dataset, config)
    tr.save_state(args.checkpoint, state, config)
    print(f"initialized {len(state.cloud)} gaussians -> {args.checkpoint}")
    return EXIT_OK


def cmd_train(args):
    dataset = sio.load_manifest(args.manifest)
    state = None
    if args.resume and os.path.exists(args.checkpoint):
        state, config = tr.load_state(args.checkpoint, dataset)
        config = apply_overrides(config, args)
    else:
        config = apply_overrides(load_config(args), args)
    state, rows = tr.train(dataset, config, state=state, log_path=args.log,
                           checkpoint_path=args.checkpoint)
    last = rows[-1] if rows else {"total": float("nan")}
    print(f"trained to iteration {state.iteration} "
          f"({len(state.cloud)} gaussians, loss {last['total']:.5f}) "
          f"-> {args.checkpoint}")
    return EXIT_OK


def cmd_render(args):
    dataset = sio.load_manifest(args.manifest)
    state, config = tr.load_state(args.checkpoint, dataset)
    frame = frame_record(dataset, args.frame)
    condition = frame.condition
    if args.conditions:
        stream = sio.read_condition_stream(args.conditions)
        if not 0 <= args.condition_index < stream.shape[0]:
            raise DataError(
                f"condition index {args.condition_index} out of range",
                code="frame_range",
            )
        condition = stream[args.condition_index]
    bundle = tr.render_frame(state.cloud, state.mlp, frame.vertices,
                             condition, dataset.camera,
                             tile_size=config.tile_size,
                             use_deformer=config.use_deformer)
    write_render(bundle, args.out, args.alpha)
    print(f"rendered frame {args.frame} -> {args.out}")
    return EXIT_OK


def cmd_novel_view(args):
    dataset = sio.load_manifest(args.manifest)
    state, config = tr.load_state(args.checkpoint, dataset)
    frame = frame_record(dataset, args.frame)
    pivot = frame.vertices.mean(axis=0)
    cam = dataset.camera.orbited(np.deg2rad(args.azimuth),
                                 np.deg2rad(args.elevation), pivot)
    bundle = tr.render_frame(state.cloud, state.mlp, frame.vertices,
                             frame.condition, cam,
                             tile_size=config.tile_size,
                             use_deformer=config.use_deformer)
    write_render(bundle, args.out, args.alpha)
    print(f"rendered frame {args.frame} at azimuth {args.azimuth} "
          f"elevation {args.elevation} -> {args.out}")
    return EXIT_OK


def cmd_reenact(args):
    dataset = sio.load_manifest(args.manifest)
    state, config = tr.load_state(args.checkpoint, dataset)
    stream = sio.read_condition_stream(args.conditions)
    if stream.shape[1] != dataset.cond_dim:
        raise DataError(
            f"condition stream has dimension {stream.shape[1]}, "
            f"avatar expects {dataset.cond_dim}",
            code="cond_dim",
        )
    os.makedirs(args.out_dir, exist_ok=True)
    for t in range(stream.shape[0]):
        frame = dataset.frames[t % len(dataset)]
        bundle = tr.render_frame(state.cloud, state.mlp, frame.vertices,
                                 stream[t], dataset.camera,
                                 tile_size=config.tile_size,
                                 use_deformer=config.use_deformer)
        sio.write_image(
            os.path.join(args.out_dir, f"reenact_{t:04d}.png"), bundle.pred)
    print(f"reenacted {stream.shape[0]} frames -> {args.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    dataset = sio.load_manifest(args.manifest)
    state, config = tr.load_state(args.checkpoint, dataset)
    train_idx, held_idx = tr.split_frames(len(dataset), config.holdout_every)
    chosen = {"train": train_idx, "held": held_idx,
              "all": np.arange(len(dataset))}[args.split]
    table = tr.evaluate(state, dataset, chosen, config)
    if args.json:
        print(json.dumps(table))
    else:
        print("frame   psnr    ssim")
        for i, (p, s) in enumerate(zip(table["psnr"], table["ssim"])):
            print(f"{int(chosen[i]):5d}  {p:6.2f}  {s:6.4f}")
        print(f" mean  {table['mean_psnr']:6.2f}  {table['mean_ssim']:6.4f}")
    return EXIT_OK


def cmd_selftest(args):
    import pytest

    here = os.path.dirname(os.path.abspath(__file__))
    tests = os.path.normpath(os.path.join(here, "..", "..", "tests"))
    if not os.path.isdir(tests):
        raise DataError(f"test suite not found at {tests}", code="unreadable")
    argv = [tests, "-q"]
    if args.fast:
        argv += ["--ignore", os.path.join(tests, "test_acceptance.py")]
    if args.keyword:
        argv += ["-k", args.keyword]
    code = pytest.main(argv)
    return EXIT_OK if code == 0 else EXIT_NUMERIC


def cmd_synth(args):
    path, _, _ = synth.make_desk_dataset(
        args.root, args.seed, frames=args.frames, size=args.size,
        vertices=args.vertices, hidden=args.hidden)
    print(f"wrote synthetic dataset -> {path}")
    return EXIT_OK


def build_parser():
    parser = CliParser(prog="rigsplat",
                       description="Mesh-rigged Gaussian avatar toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    def training_options(p):
        p.add_argument("--config", help="JSON file of training options")
        p.add_argument("--desk", action="store_true",
                       help="small-scale schedule (3000 iterations)")
        p.add_argument("--seed", type=int)
        p.add_argument("--sh-degree", type=int, dest="sh_degree")
        p.add_argument("--binding", choices=("rigged", "free"))

    p = add("init", cmd_init, "build a rig-bound cloud from a dataset")
    p.add_argument("manifest")
    p.add_argument("checkpoint")
    training_options(p)

    p = add("train", cmd_train, "optimize an avatar (resume-capable)")
    p.add_argument("manifest")
    p.add_argument("checkpoint")
    training_options(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log", help="CSV log path")

    p = add("render", cmd_render, "render one dataset frame")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", help="also write the alpha map here")
    p.add_argument("--conditions", help="JSON condition stream to read from")
    p.add_argument("--condition-index", type=int, default=0,
                   dest="condition_index")

    p = add("novel-view", cmd_novel_view, "render from a rotated viewpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--azimuth", type=float, default=0.0,
                   help="orbit angle in degrees about the vertical axis")
    p.add_argument("--elevation", type=float, default=0.0,
                   help="orbit angle in degrees about the horizontal axis")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha")

    p = add("reenact", cmd_reenact,
            "drive the avatar with a foreign condition stream")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("conditions", help="JSON condition stream")
    p.add_argument("--out-dir", required=True, dest="out_dir")

    p = add("eval", cmd_eval, "PSNR/SSIM table over dataset frames")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", choices=("train", "held", "all"),
                   default="held")
    p.add_argument("--json", action="store_true")

    p = add("selftest", cmd_selftest, "run the oracle test suites")
    p.add_argument("--fast", action="store_true",
                   help="skip the long acceptance checks")
    p.add_argument("--keyword", help="pytest -k selection")

    p = add("synth", cmd_synth, "generate a synthetic teacher dataset")
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--vertices", type=int, default=42)
    p.add_argument("--hidden", type=int, default=3)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error[config]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
