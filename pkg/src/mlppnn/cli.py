"""Command-line interface.

Subcommands cover the full workflow: register frames, synthesize test
sequences, train a kernel model, reconstruct, design a restoration filter,
and run the benchmark.  Exit codes: 0 success, 1 usage error, 2 runtime
error.  Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .imagecore import load_pgm, save_pgm
from .kernelnet import Exponential, NearestOnly, model_to_text
from .pipeline import PipelineConfig, generate_sequence, run_bench, superresolve
from .registration import register_sequence, save_transforms
from .restoration import design_filter, filter_to_text
from .training import TrainConfig, dataset_from_bytes, dataset_to_bytes, make_dataset, train

__all__ = ["main", "build_parser"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is 1.
    def error(self, message):
        raise _UsageError(message)


def _load_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_pgm(fh.read())


def _write_image(path: str, img: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(save_pgm(img))


def _write_text(path: str, text: str):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def _note(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_register(args) -> int:
    frames = [_load_image(p) for p in args.frames]
    transforms = register_sequence(
        frames, reference_index=args.reference, levels=args.levels, max_iters=args.max_iters
    )
    _write_text(args.out, save_transforms(transforms))
    _note(f"registered {len(frames)} frames -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    truth = _load_image(args.truth)
    frames, transforms = generate_sequence(
        truth,
        args.frames,
        args.scale,
        args.sigma,
        seed=args.seed,
        max_shift=args.max_shift,
        max_rot_deg=args.max_rot,
        scale_jitter=args.scale_jitter,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for k, frame in enumerate(frames):
        _write_image(os.path.join(args.out_dir, f"frame_{k:03d}.pgm"), frame)
    _write_text(os.path.join(args.out_dir, "transforms.txt"), save_transforms(transforms))
    meta = (
        f"truth={args.truth}\nframes={args.frames}\nscale={args.scale}\n"
        f"sigma={float(args.sigma)!r}\nseed={args.seed}\nmax_shift={float(args.max_shift)!r}\n"
        f"max_rot_deg={float(args.max_rot)!r}\nscale_jitter={float(args.scale_jitter)!r}\n"
    )
    _write_text(os.path.join(args.out_dir, "meta.txt"), meta)
    _note(f"wrote {len(frames)} frames + transforms to {args.out_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        sigma=args.sigma,
        frames=args.frames,
        scale=args.scale,
        patterns=args.patterns,
        scatter_radius=args.scatter_radius,
        restarts=args.restarts,
        cg_max_iters=args.cg_max_iters,
        cg_tol=args.cg_tol,
        seed=args.seed,
    )


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    images = [_load_image(p) for p in args.images]
    data = None
    if args.cache and os.path.exists(args.cache):
        with open(args.cache, "rb") as fh:
            data, cached_cfg = dataset_from_bytes(fh.read())
        for field in ("sigma", "frames", "scale", "patterns", "scatter_radius", "seed"):
            if getattr(cached_cfg, field) != getattr(cfg, field):
                raise ValueError(
                    f"cache {args.cache} was built with {field}="
                    f"{getattr(cached_cfg, field)}, requested {getattr(cfg, field)}"
                )
        _note(f"loaded {len(data)} patterns from {args.cache}")
    if data is None:
        data = make_dataset(images, cfg)
        if args.cache:
            with open(args.cache, "wb") as fh:
                fh.write(dataset_to_bytes(data, cfg))
            _note(f"cached {len(data)} patterns to {args.cache}")
    net, loss, report = train(data, cfg, threads=args.threads)
    _write_text(args.out, model_to_text(net, cfg.sigma, cfg.scale, cfg.frames))
    skipped = report.restarts[report.winner].skipped_patterns
    _note(
        f"trained sigma={cfg.sigma} loss={loss:.6f} winner=restart {report.winner} "
        f"skipped_patterns={skipped} -> {args.out}"
    )
    return 0


def _pick_kernel(args):
    if args.kernel == "nearest":
        return NearestOnly()
    if args.kernel == "exp":
        return Exponential(width=args.exp_width)
    return None   # mlp: superresolve loads it from --model


def _cmd_superres(args) -> int:
    if args.kernel == "mlp" and not args.model:
        raise _UsageError("--model is required with --kernel mlp")
    frames = [_load_image(p) for p in args.frames]
    cfg = PipelineConfig(
        scale=args.scale,
        reference_index=args.reference,
        model_path=args.model,
        filter_path=args.filter,
        transforms_path=args.transforms,
        threads=args.threads,
        deterministic=args.deterministic,
    )
    out = superresolve(frames, cfg, kernel=_pick_kernel(args))
    _write_image(args.out, out)
    _note(f"reconstructed {out.shape[1]}x{out.shape[0]} image -> {args.out}")
    return 0


def _cmd_design_filter(args) -> int:
    if len(args.pairs) % 2:
        raise _UsageError("pairs must be an even-length list: degraded target [...]")
    pairs = [
        (_load_image(args.pairs[i]), _load_image(args.pairs[i + 1]))
        for i in range(0, len(args.pairs), 2)
    ]
    f = design_filter(pairs, size=args.size, noise_sigma=args.noise_sigma)
    _write_text(args.out, filter_to_text(f))
    _note(f"designed {f.size}x{f.size} filter from {len(pairs)} pairs -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    images = [_load_image(p) for p in args.images]
    cfg = _train_config(args)
    sigmas = [float(tok) for tok in args.sigmas.split(",") if tok.strip()]
    if not sigmas:
        raise _UsageError("--sigmas must list at least one value")
    report = run_bench(
        images,
        sigmas,
        cfg,
        threads=args.threads,
        deterministic=not args.timing,
        eval_patterns=args.eval_patterns,
    )
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        _write_text(args.out, text)
        _note(f"report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p, patterns_default=5000):
    p.add_argument("--sigma", type=float, default=0.0, help="input noise level, gray levels")
    p.add_argument("--frames", type=int, default=25, help="samples per pattern / sequence length")
    p.add_argument("--scale", type=int, default=3, help="low-to-high resolution factor")
    p.add_argument("--patterns", type=int, default=patterns_default)
    p.add_argument("--scatter-radius", type=float, default=1.5, help="LR pixels")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--cg-max-iters", type=int, default=200)
    p.add_argument("--cg-tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlppnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("register", help="estimate frame-to-reference transforms")
    p.add_argument("frames", nargs="+", help="PGM frames; first listed need not be the reference")
    p.add_argument("--reference", type=int, default=0)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--out", required=True, help="transforms file to write")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("synth", help="degrade an HR image into a jittered LR sequence")
    p.add_argument("--truth", required=True, help="high-resolution PGM")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--scale", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-shift", type=float, default=1.0, help="LR pixels")
    p.add_argument("--max-rot", type=float, default=1.0, help="degrees")
    p.add_argument("--scale-jitter", type=float, default=0.01)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the kernel MLP on still images")
    p.add_argument("--images", nargs="+", required=True, help="training PGMs")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--cache", help="dataset cache file to reuse/create")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("superres", help="reconstruct an HR image from LR frames")
    p.add_argument("frames", nargs="+", help="PGM frames")
    p.add_argument("--model", help="trained model file")
    p.add_argument("--kernel", choices=("mlp", "nearest", "exp"), default="mlp")
    p.add_argument("--exp-width", type=float, default=1.0)
    p.add_argument("--transforms", help="known transforms file (skips registration)")
    p.add_argument("--filter", help="restoration filter file")
    p.add_argument("--scale", type=int, default=3)
    p.add_argument("--reference", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", required=True, help="output PGM")
    p.set_defaults(func=_cmd_superres)

    p = sub.add_parser("design-filter", help="fit a restoration filter on image pairs")
    p.add_argument("pairs", nargs="+", help="degraded/target PGM files, alternating")
    p.add_argument("--size", type=int, default=7)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", required=True, help="filter file to write")
    p.set_defaults(func=_cmd_design_filter)

    p = sub.add_parser("bench", help="train per noise level and report RMSE/width/timing")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--sigmas", default="0,5,10,20", help="comma-separated noise levels")
    p.add_argument("--eval-patterns", type=int, default=1000)
    p.add_argument("--timing", action="store_true",
                   help="report real wall times (reports stop being bitwise reproducible)")
    p.add_argument("--out", help="also write the report to this file")
    _add_train_flags(p, patterns_default=5000)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:   # --help and friends
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
