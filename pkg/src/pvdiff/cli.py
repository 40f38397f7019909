"""Command-line entry point.

Commands: generate-data, train, eval, ablate. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, write_dataset
from .env import VOCABULARY, TaskVariant, generate_demos
from .training import (DataError, NumericError, dataset_path, env_params,
                       eval_run, train_run)
from .vision import write_vocabulary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATION_AXES = {
    "fusion": ("fusion.strategy", ["concat", "cond_on_pc", "cond_on_rgb"]),
    "cond_vec": ("fusion.cond_mode", ["cls_transformer", "max_pool"]),
    "granularity": ("vision.granularity", [1, 4, 8]),
}


def cmd_generate_data(cfg: RunConfig, out_dir: Path) -> int:
    data_dir = Path(cfg["data.dir"])
    data_dir.mkdir(parents=True, exist_ok=True)
    params = env_params(cfg)
    for variant_name in cfg.variants():
        variant = TaskVariant(variant_name)
        episodes = generate_demos(variant, cfg["data.episodes"], cfg["seed"], params)
        path = dataset_path(cfg, variant_name)
        write_dataset(episodes, path)
        print(f"{path}: {len(episodes)} episodes")
    write_vocabulary(data_dir / "vocabulary.txt", VOCABULARY)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out_dir / "config.snapshot")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out_dir: Path, checkpoint: str | None = None) -> int:
    if checkpoint is not None and not Path(checkpoint).exists():
        raise DataError(f"checkpoint not found: {checkpoint}")
    result = train_run(cfg, out_dir, init_checkpoint=checkpoint)
    print(f"trained {result['steps']} steps; checkpoint at {result['checkpoint']}")
    if result["first_loss"] is not None:
        print(f"loss {result['first_loss']:.4f} -> {result['final_loss']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None, out_dir: Path) -> int:
    if not cfg["eval.expert"]:
        if checkpoint is None:
            raise ConfigError("eval needs --checkpoint (or eval.expert=true)")
        if not Path(checkpoint).exists():
            raise DataError(f"checkpoint not found: {checkpoint}")
    metrics = eval_run(cfg, checkpoint, out_dir)
    print(f"{metrics['variant']}: success_rate={metrics['success_rate']:.3f} "
          f"over {metrics['n_episodes']} episodes")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, axis: str | None, out_dir: Path) -> int:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"--axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    key, settings = ABLATION_AXES[axis]
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for setting in settings:
        for variant in cfg.variants():
            run_cfg = RunConfig(dict(cfg._values))
            run_cfg.set(key, setting)
            run_cfg.set("env.variant", variant)
            run_cfg.validate()
            cell = out_dir / f"{axis}_{setting}_{variant}"
            train_result = train_run(run_cfg, cell)
            metrics = eval_run(run_cfg, train_result["checkpoint"], cell)
            rows.append((str(setting), variant, metrics["success_rate"]))
            print(f"{axis}={setting} {variant}: {metrics['success_rate']:.3f}")
    table = out_dir / f"ablate_{axis}.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "variant", "success_rate"])
        writer.writerows(rows)
    cfg.write_snapshot(out_dir / "config.snapshot")
    print(f"wrote {table}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvdiff",
        description="Multimodal diffusion policy: data generation, training, "
                    "evaluation, and ablations on synthetic reach tasks.",
    )
    parser.add_argument("command",
                        choices=["generate-data", "train", "eval", "ablate"])
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate or to resume training from")
    parser.add_argument("--axis", help="ablation axis: fusion | cond_vec | granularity")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        out_dir = Path(args.out)
        if args.command == "generate-data":
            return cmd_generate_data(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out_dir)
        return cmd_ablate(cfg, args.axis, out_dir)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
