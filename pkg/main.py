"""
Command line for the splatdrive scene synthesis engine.

Subcommands:
1. gen-synth: generate synthetic scene directories
2. train-flow / train-decoder / train-refiner: train and checkpoint the models
3. infer / reconstruct: render novel lateral tracks from a sampled or clean latent
4. render: reference-render a scene's own Gaussians along a shifted track
5. metrics: compare two frame directories
6. selftest: oracle equivalence and gradient checks (``--full`` adds training runs)

Global options (``--config``, ``--print-config``, ``--log-file``,
``--threads``) go before the subcommand. Exit code 0 on success, 1 on a
runtime failure, 2 on a usage error.
"""
import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import torch
from pydantic import ValidationError

import config
from decoder_net import DecoderOptimizerConfig, train_decoder
from errors import FormatError, SplatDriveError
from flow import FlowOptimizerConfig, train_flow, train_refiner
from formats import write_csv
from pipeline import infer, infer_reconstruct, metrics_from_dirs, render_ground_truth
from schemas import PipelineConfig
from selftest import all_passed, run_selftest
from synthdata import SyntheticScene, clip_windows, generate_scene, read_scene, write_scene

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


def add_log_file(path: str) -> None:
    """Mirror log output into ``path`` next to the console handler."""
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
    logging.getLogger().addHandler(handler)


def set_threads(threads: Optional[int]) -> None:
    if threads:
        config.THREADS = threads
    torch.set_num_threads(config.THREADS)
    torch.use_deterministic_algorithms(True)


def load_scenes(paths: List[str]) -> List[SyntheticScene]:
    """Each path is a scene directory or a directory of scene directories."""
    scenes = []
    for path in paths:
        if os.path.exists(os.path.join(path, "manifest.json")):
            scenes.append(read_scene(path))
            continue
        if not os.path.isdir(path):
            raise FormatError(f"no scene directory at {path}")
        for name in sorted(os.listdir(path)):
            candidate = os.path.join(path, name)
            if os.path.exists(os.path.join(candidate, "manifest.json")):
                scenes.append(read_scene(candidate))
    if not scenes:
        raise FormatError(f"no scenes found under {', '.join(paths)}")
    logger.info(f"Loaded {len(scenes)} scenes")
    return scenes


def resolve_config(args) -> PipelineConfig:
    """Defaults, then the --config file, then subcommand flags."""
    overrides = {
        "scene_dir": getattr(args, "scene", None),
        "flow_checkpoint": getattr(args, "flow", None),
        "decoder_checkpoint": getattr(args, "decoder", None),
        "refiner_checkpoint": getattr(args, "refiner", None),
        "output_dir": getattr(args, "out", None),
        "euler_steps": getattr(args, "steps", None),
        "dy_values": getattr(args, "dy", None),
        "seed": getattr(args, "seed", None),
        "base_t": getattr(args, "base_t", None),
        "clip_len": getattr(args, "clip_len", None),
        "threads": args.threads,
    }
    if getattr(args, "dump_intermediate", False):
        overrides["dump_intermediate"] = True
    return PipelineConfig.load(args.config, **overrides)


# --- Subcommands ---

def run_gen_synth(args, cfg: PipelineConfig) -> int:
    seeds = [args.seed + i for i in range(args.count)]

    def build(seed: int) -> str:
        scene = generate_scene(seed, args.views, args.frames, args.height, args.width, args.static, args.dynamic)
        directory = args.out if args.count == 1 else os.path.join(args.out, f"scene_{seed:04d}")
        write_scene(scene, directory)
        return directory

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        directories = list(pool.map(build, seeds))
    for directory in directories:
        print(directory)
    return 0


def run_train_flow(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(args.scenes)
    windows = [w for scene in scenes for w in clip_windows(scene, cfg.clip_len)]
    data = torch.stack([latent for latent, _ in windows])
    conditions = [c for _, c in windows] if args.conditioned else None
    field, history = train_flow(
        data, conditions, steps=args.train_steps, optimizer_config=FlowOptimizerConfig(),
        seed=cfg.seed, checkpoint_path=args.out,
    )
    write_csv(args.out + ".csv", history)
    logger.info(f"Flow checkpoint written to {args.out} (final loss {history['loss'].iloc[-1]:.6f})")
    return 0


def run_train_decoder(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(args.scenes)
    model, history = train_decoder(
        scenes, steps=args.train_steps,
        optimizer_config=DecoderOptimizerConfig(clip_len=cfg.clip_len),
        seed=cfg.seed, checkpoint_path=args.out,
    )
    write_csv(args.out + ".csv", history)
    logger.info(
        f"Decoder checkpoint written to {args.out} "
        f"(final loss {history['loss'].iloc[-1]:.5f}, psnr {history['psnr'].iloc[-1]:.2f})"
    )
    return 0


def run_train_refiner(args, cfg: PipelineConfig) -> int:
    scenes = load_scenes(args.scenes)
    clean, degraded = [], []
    for i, scene in enumerate(scenes):
        kind = ("mask_patch", "box_blur")[i % 2]
        clean.extend(latent for latent, _ in clip_windows(scene, cfg.clip_len))
        degraded.extend(latent for latent, _ in clip_windows(scene, cfg.clip_len, degradation=kind))
    field, history = train_refiner(
        torch.stack(clean), torch.stack(degraded), mix_ratio=args.mix_ratio,
        steps=args.train_steps, seed=cfg.seed, checkpoint_path=args.out,
    )
    write_csv(args.out + ".csv", history)
    logger.info(f"Refiner checkpoint written to {args.out} (final loss {history['loss'].iloc[-1]:.6f})")
    return 0


def _print_report(result) -> None:
    stages = list(dict.fromkeys(result.report.frames["stage"]))
    for dy in result.tracks:
        for stage in stages:
            track = result.report.select(dy, stage)
            print(
                f"dy={dy:g} {stage} psnr={track.mean('psnr'):.2f} psnr_visible={track.mean('psnr_visible'):.2f} "
                f"rgb_l1={track.mean('rgb_l1'):.4f} depth_l1={track.mean('depth_l1'):.4f} "
                f"iou={track.mean('iou'):.3f}"
            )


def run_infer(args, cfg: PipelineConfig) -> int:
    _print_report(infer(cfg))
    return 0


def run_reconstruct(args, cfg: PipelineConfig) -> int:
    _print_report(infer_reconstruct(cfg))
    return 0


def run_render(args, cfg: PipelineConfig) -> int:
    if not cfg.scene_dir:
        raise FormatError("render needs --scene")
    scene = read_scene(cfg.scene_dir)
    render_ground_truth(scene, args.offset, cfg.output_dir)
    logger.info(f"Rendered scene {scene.seed} at dy={args.offset:g} into {cfg.output_dir}")
    return 0


def run_metrics(args, cfg: PipelineConfig) -> int:
    report = metrics_from_dirs(args.pred, args.truth)
    if args.csv:
        write_csv(args.csv, report.frames)
    print(report.aggregates.to_string())
    return 0


def run_selftest_command(args, cfg: PipelineConfig) -> int:
    results = run_selftest(full=args.full, only=args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s) {r.detail}")
    return 0 if all_passed(results) else 1


COMMANDS = {
    "gen-synth": run_gen_synth,
    "train-flow": run_train_flow,
    "train-decoder": run_train_decoder,
    "train-refiner": run_train_refiner,
    "infer": run_infer,
    "reconstruct": run_reconstruct,
    "render": run_render,
    "metrics": run_metrics,
    "selftest": run_selftest_command,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatdrive", description="Desk-scale 4D driving scene synthesis")
    parser.add_argument("--config", help="Key-value pipeline config file")
    parser.add_argument("--print-config", action="store_true", help="Print every resolved config value and exit")
    parser.add_argument("--log-file", help="Also write log output to this file")
    parser.add_argument("--threads", type=int, help=f"Worker threads (default {config.THREADS})")
    sub = parser.add_subparsers(dest="command", metavar="command")

    gen = sub.add_parser("gen-synth", help="Generate synthetic scenes")
    gen.add_argument("--out", required=True, help="Scene directory (or parent directory with --count > 1)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=1)
    gen.add_argument("--views", type=int, default=config.SYNTH_VIEWS)
    gen.add_argument("--frames", type=int, default=config.SYNTH_FRAMES)
    gen.add_argument("--height", type=int, default=config.SYNTH_HEIGHT)
    gen.add_argument("--width", type=int, default=config.SYNTH_WIDTH)
    gen.add_argument("--static", type=int, default=config.SYNTH_STATIC, help="Static Gaussians")
    gen.add_argument("--dynamic", type=int, default=config.SYNTH_DYNAMIC, help="Vehicles")

    for name, default_steps, helptext in (
        ("train-flow", config.FLOW_TRAIN_STEPS, "Train the latent flow model"),
        ("train-decoder", config.DECODER_TRAIN_STEPS, "Train the latent Gaussian decoder"),
        ("train-refiner", config.REFINER_TRAIN_STEPS, "Train the render refiner"),
    ):
        train = sub.add_parser(name, help=helptext)
        train.add_argument("--scenes", nargs="+", required=True, help="Scene directories")
        train.add_argument("--out", required=True, help="Checkpoint path (loss history goes to <out>.csv)")
        train.add_argument("--train-steps", type=int, default=default_steps)
        train.add_argument("--seed", type=int)
        train.add_argument("--clip-len", type=int)
        if name == "train-flow":
            train.add_argument("--conditioned", action="store_true", help="Condition on boxes, sketch, trajectory and tag")
        if name == "train-refiner":
            train.add_argument("--mix-ratio", type=float, default=config.REFINER_MIX_RATIO)

    for name, helptext in (("infer", "Generate and render novel tracks"), ("reconstruct", "Reconstruct from the clean latent")):
        run = sub.add_parser(name, help=helptext)
        run.add_argument("--scene", help="Scene directory")
        if name == "infer":
            run.add_argument("--flow", help="Flow checkpoint")
        run.add_argument("--decoder", help="Decoder checkpoint")
        run.add_argument("--refiner", help="Refiner checkpoint")
        run.add_argument("--out", help="Output directory")
        run.add_argument("--dy", help="Comma-separated lateral offsets in meters")
        run.add_argument("--steps", type=int, help="Euler steps")
        run.add_argument("--seed", type=int)
        run.add_argument("--base-t", type=int)
        run.add_argument("--clip-len", type=int)
        run.add_argument("--dump-intermediate", action="store_true")

    render_cmd = sub.add_parser("render", help="Reference-render a scene along a shifted track")
    render_cmd.add_argument("--scene", required=True)
    render_cmd.add_argument("--dy", dest="offset", type=float, default=0.0)
    render_cmd.add_argument("--out", required=True)

    metrics = sub.add_parser("metrics", help="Compare predicted and ground-truth frame directories")
    metrics.add_argument("--pred", required=True)
    metrics.add_argument("--truth", required=True)
    metrics.add_argument("--csv", help="Write per-frame metrics here")

    selftest = sub.add_parser("selftest", help="Run the self-checks")
    selftest.add_argument("--full", action="store_true", help="Include the training acceptance runs")
    selftest.add_argument("--only", nargs="+", help="Run only these checks")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_file:
        add_log_file(args.log_file)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print("\n".join(cfg.as_lines()))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        set_threads(cfg.threads)
        return COMMANDS[args.command](args, cfg)
    except SplatDriveError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error kind={e.kind} message={e.message}", file=sys.stderr)
        return 1
    except ValidationError as e:
        message = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        print(f"error kind=config message={message}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"error kind=runtime message={type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
