"""``pairshot`` command line: make-toy, train, generate, evaluate.

A run directory holds ``config.ini`` (the effective configuration), one loss
log per phase and one checkpoint per phase (``stage1.pt``, ``relation.pt``,
``stage2.pt``, or ``baseline.pt``).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import train as T
from .config import RunConfig
from .data import AugmentationConfig, PairedDataset, augment_target_pool, load_dataset, load_pool, write_image
from .errors import (CheckpointError, ConfigError, ContractError, LoadError, ManifestError, NonFiniteLossError,
                     NumericError, PhaseOrderError)
from .evaluate import emit_grid, evaluate_generator, synthesize, train_baseline_s, write_report
from .nets import load_extractor
from .toy import write_toy

log = logging.getLogger("pairshot")

EXPECTED_ERRORS = (ContractError, LoadError, ManifestError, ConfigError, CheckpointError, PhaseOrderError,
                   NonFiniteLossError, NumericError)
STAGES = ("all", "1", "relation", "2", "baseline")
CHECKPOINTS = {"stage1": "stage1.pt", "relation": "relation.pt", "stage2": "stage2.pt", "baseline": "baseline.pt"}


def load_config(args) -> RunConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"eval.seed={args.seed}"]
    return RunConfig.load(args.config, overrides)


def load_paired(cfg: RunConfig) -> PairedDataset:
    d = cfg.data
    if not (d.source_dir and d.target_dir and d.manifest):
        raise ConfigError("data.source_dir, data.target_dir and data.manifest must be set")
    return load_dataset(d.source_dir, d.target_dir, d.manifest, size=d.image_size)


def augmentation(cfg: RunConfig) -> AugmentationConfig:
    return AugmentationConfig(cfg.data.chroma_shift_range, cfg.data.copies_per_sample)


class PhaseLog:
    """Writes every LossReport of one phase to ``<phase>.log``."""

    def __init__(self, path: Path):
        self.fh = path.open("w", encoding="utf-8")

    def __call__(self, report) -> None:
        self.fh.write(report.to_line() + "\n")

    def close(self) -> None:
        self.fh.close()


def _run_phase(run_dir: Path, phase: str, fn) -> None:
    sink = PhaseLog(run_dir / f"{phase}.log")
    try:
        state = fn(sink)
    finally:
        sink.close()
    T.save_checkpoint(state, run_dir / CHECKPOINTS[phase])
    log.info("wrote %s", run_dir / CHECKPOINTS[phase])


def _resume(run_dir: Path, name: str, cfg: RunConfig, why: str) -> T.TrainState:
    path = run_dir / CHECKPOINTS[name]
    if not path.is_file():
        raise PhaseOrderError(f"{why} needs {path}; run the earlier phase first")
    return T.load_checkpoint(path, cfg.model, cfg.train)


def cmd_make_toy(args) -> int:
    out = write_toy(args.out, args.n_src, args.n_tar, args.seed, n_eval=args.n_eval, size=args.size)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    if args.ablation:
        cfg.train = cfg.train.with_ablation(args.ablation)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.ini")
    d = load_paired(cfg)
    tc = cfg.train
    stage = args.stage

    if stage == "baseline":
        _run_phase(run_dir, "baseline",
                   lambda sink: train_baseline_s(d.target, cfg.model, tc, tc.steps_stage2, on_report=sink))
        return 0

    state = None
    if stage in ("all", "1"):
        state = T.new_state(cfg.model, tc)
        _run_phase(run_dir, "stage1", lambda sink: T.run_stage1(state, d, tc.steps_stage1, on_report=sink))
    prepared = None
    if stage == "relation" or (stage == "all" and not tc.disable_relation_loss):
        if state is None:
            state = _resume(run_dir, "stage1", cfg, "relation training")
        prepared = T.PreparedData.build(state.bundle, d)
        _run_phase(run_dir, "relation",
                   lambda sink: T.train_relation(state, prepared, tc.steps_relation, on_report=sink))
    if stage in ("all", "2"):
        if state is None:
            name = "stage1" if tc.disable_relation_loss else "relation"
            if tc.disable_relation_loss and (run_dir / CHECKPOINTS["relation"]).is_file():
                name = "relation"
            state = _resume(run_dir, name, cfg, "stage 2")
        if prepared is None:
            prepared = T.PreparedData.build(state.bundle, d)
        aug = augment_target_pool(d, augmentation(cfg), seed=tc.seed)
        _run_phase(run_dir, "stage2",
                   lambda sink: T.run_stage2(state, prepared, aug, tc.steps_stage2, on_report=sink))
    return 0


def _load_generator(path, cfg: RunConfig):
    state = T.load_checkpoint(path)
    if state.phase not in ("stage2", "baseline"):
        raise PhaseOrderError(f"{path} is a {state.phase!r} checkpoint; generation needs stage 2 or baseline")
    if state.model_cfg.image_size != cfg.data.image_size:
        raise ConfigError("checkpoint image size differs from data.image_size")
    return state


def _dataset_for(manner: str, cfg: RunConfig) -> PairedDataset | None:
    return load_paired(cfg) if manner == "syn" else None


def cmd_generate(args) -> int:
    cfg = load_config(args)
    state = _load_generator(args.checkpoint, cfg)
    images = synthesize(state.bundle, args.manner, args.n, cfg.eval.seed, _dataset_for(args.manner, cfg),
                        state.phase)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_image(out / f"sample_{i:05d}.png", img)
    side = math.isqrt(len(images))
    if side:
        emit_grid(images, side, side, out / "grid.png")
    print(out)
    return 0


def reference_images(cfg: RunConfig, d: PairedDataset | None) -> tuple[np.ndarray, str]:
    """Real set for FID/KID: the held-out pool if configured, else the (augmented) target pool."""
    if cfg.data.eval_dir:
        pool, _ = load_pool(cfg.data.eval_dir, size=cfg.data.image_size)
        return pool, "held-out"
    d = d if d is not None else load_paired(cfg)
    if d.n_target < 100:
        return augment_target_pool(d, augmentation(cfg), seed=cfg.train.seed), "augmented"
    return d.target, "target"


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    state = _load_generator(args.checkpoint, cfg)
    manner = args.manner or cfg.eval.manner
    d = _dataset_for(manner, cfg)
    real, reference = reference_images(cfg, d)
    rows = evaluate_generator(state.bundle, real, manner, load_extractor(cfg.eval.extractor),
                              args.n or cfg.eval.n_generated, cfg.eval.seed, d, state.phase, reference)
    path = write_report(rows, args.out)
    for row in rows:
        print(f"{row['metric']}\t{row['value']:.6g}")
    print(path)
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data] [model] [train] [eval] sections")
    p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--seed", type=int, help="sets train.seed and eval.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairshot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="render the synthetic paired dataset")
    p.add_argument("out")
    p.add_argument("--n-src", type=int, default=2000)
    p.add_argument("--n-tar", type=int, default=10)
    p.add_argument("--n-eval", type=int, default=1000, help="held-out target images for evaluation")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="run training phases into a run directory")
    _common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--ablation", choices=("full", "no-relation", "no-relation-no-adversarial"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample target-domain images from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manner", choices=("rand", "syn"), default="rand")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="write FID and KID for one manner")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manner", choices=("rand", "syn"))
    p.add_argument("--n", type=int, help="generated samples (default eval.n_generated)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"pairshot {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
