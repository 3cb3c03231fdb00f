"""Command-line entry points: gen-scene, train, render, eval, gradcheck, kalman-demo."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from PIL import Image

from .deformation import Timeline
from .kalman import FilterState, LinearGaussianSystem, filter_sequence
from .metrics import evaluate
from .renderer import render_image
from .scenes import DatasetError, SceneConfig, generate_blob_scene, load_analytic_scene, load_dataset, orbit_poses
from .trainer import (
    CheckpointError, ConfigError, TrainConfig, Trainer, TrainingDiverged, format_config,
    load_checkpoint, load_config,
)

GRADCHECK_TOL = 1e-3


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-l-kf", action="store_true", help="disable the observation loss")
    p.add_argument("--no-l-co", action="store_true", help="disable the canonical loss")
    p.add_argument("--no-prediction", action="store_true",
                   help="drop the prediction branch (pure observation)")
    p.add_argument("--stopgrad-prediction", action=argparse.BooleanOptionalAction, default=None,
                   help="block gradients through the prediction branch (on by default)")
    p.add_argument("--concat-raw", choices=("postwarp", "prewarp"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kalmanfield", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render the procedural blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motion", choices=("translate", "rotate", "sine"), default="translate")
    p.add_argument("--frames", type=int, default=SceneConfig.n_frames)
    p.add_argument("--size", type=int, default=SceneConfig.width, help="image width and height")

    p = sub.add_parser("train", help="optimize a model on a dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--resume", metavar="CHECKPOINT")
    _add_ablation_flags(p)

    p = sub.add_parser("render", help="render a pose and time sweep to PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--times", type=float, nargs="+", help="default: the training timeline")
    p.add_argument("--views", type=int, default=1, help="orbit views per time")
    p.add_argument("--radius", type=float, default=SceneConfig.camera_radius)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("kalman-demo", help="filter a simulated random walk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20)
    return parser


def cmd_gen_scene(args) -> int:
    cfg = SceneConfig(seed=args.seed, motion=args.motion, n_frames=args.frames,
                      width=args.size, height=args.size)
    (train, test), _ = generate_blob_scene(cfg, args.out)
    print(f"wrote {len(train)} train and {len(test)} test views to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.dataset:
        updates["dataset"] = args.dataset
    if args.out:
        updates["out"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.steps is not None:
        updates["total_steps"] = args.steps
        updates["release_steps"] = min(cfg.release_steps, args.steps)
    if args.no_l_kf:
        updates["enable_l_kf"] = False
    if args.no_l_co:
        updates["enable_l_co"] = False
    if args.no_prediction:
        updates["enable_prediction_branch"] = False
    if args.stopgrad_prediction is not None:
        updates["stopgrad_prediction"] = args.stopgrad_prediction
    if args.concat_raw:
        updates["concat_raw"] = args.concat_raw
    cfg = replace(cfg, **updates)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or dataset = ... in the config)")
    if not cfg.out:
        raise ConfigError("no output directory given (--out or out = ... in the config)")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    train, _ = load_dataset(cfg.dataset)
    trainer = Trainer(cfg, train)
    if args.resume:
        trainer.restore(args.resume)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    trainer.run(out, progress=True)
    print(f"trained {trainer.step} steps; checkpoint {trainer.last_checkpoint}")
    return 0


def _camera(scene: dict):
    return SimpleNamespace(**{k: scene[k] for k in ("camera_angle_x", "width", "height", "near", "far")})


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    scene = ckpt.scene
    timeline = Timeline(scene["timeline"])
    cfg = ckpt.train_config.render_config(scene["background"])
    times = args.times if args.times is not None else list(timeline.times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ti, t in enumerate(times):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} is outside [0, 1]")
        for vi, pose in enumerate(orbit_poses(args.views, args.radius)):
            img = render_image(model, pose, t, _camera(scene), timeline, cfg)
            path = out / f"t{ti:03d}_v{vi:03d}.png"
            Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)
    print(f"wrote {len(times) * args.views} images to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    train, test = load_dataset(args.dataset)
    timeline = Timeline(ckpt.scene.get("timeline", train.times))
    cfg = ckpt.train_config.render_config(test.background)
    report = evaluate(model, test, timeline, cfg, load_analytic_scene(args.dataset))
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = 0.0
    for r in run_suite(args.seed):
        print(r.line())
        worst = max(worst, r.max_rel_error)
    ok = worst <= GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e} tol={GRADCHECK_TOL:g}")
    return 0 if ok else 1


def cmd_kalman_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    sys_ = LinearGaussianSystem(A=1.0, B=1.0, C=1.0, Q=0.01, R=0.25)
    controls = rng.normal(0.0, 0.1, args.steps)
    x, truth, obs = 0.0, [], []
    for u in controls:
        x = sys_.A * x + sys_.B * u + rng.normal(0.0, np.sqrt(sys_.Q))
        truth.append(x)
        obs.append(sys_.C * x + rng.normal(0.0, np.sqrt(sys_.R)))
    states = filter_sequence(sys_, FilterState(0.0, 1.0), list(controls), obs)
    print("step\ttruth\tobserved\testimate\tgain\tvariance")
    for k, (s, tr, y) in enumerate(zip(states, truth, obs)):
        print(f"{k}\t{tr:+.4f}\t{y:+.4f}\t{s.x:+.4f}\t{s.K:.4f}\t{s.P:.4f}")
    return 0


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "kalman-demo": cmd_kalman_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, DatasetError, TrainingDiverged, ValueError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
