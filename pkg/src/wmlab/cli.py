"""Command line surface: train, sample, eval, bench, params.

All subcommands take `--preset NAME` or `--config FILE` plus repeatable
`--set key=value` overrides; the effective configuration is dumped next to
every produced artifact so a run can be reproduced from its output directory.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

import numpy as np

from . import __version__
from .config import (PARADIGMS, RunConfig, apply_override, load_config,
                     make_preset, paper_dims, preset_names)
from .evalbench import bench as run_bench
from .models import count_for_config
from .pipelines import build_pipeline, stack_episode_arrays, _episodes
from .rng import derive_seed
from .train import TrainConfig, load_checkpoint, train_loop
from .world import gen_episode, save_episode, save_token_png


class CliError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    if args.preset:
        cfg = make_preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise CliError("pass --preset NAME or --config FILE "
                       f"(presets: {', '.join(preset_names())})")
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _dump_config(cfg: RunConfig, out_dir: pathlib.Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")


def _load_pipeline_from_checkpoint(path):
    from .config import config_from_dict

    data = load_checkpoint(path)
    cfg = config_from_dict(data["config"])
    pipeline = build_pipeline(cfg, initialize=False)
    pipeline.model.store.load_state(data["params"])
    return pipeline, cfg, data


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = pathlib.Path(cfg.out_dir)
    _dump_config(cfg, out_dir)
    pipeline = build_pipeline(cfg)
    result = train_loop(pipeline, cfg.train, cfg.seed, out_dir,
                        config_dict=cfg.to_dict())
    if result.aborted:
        print(f"training aborted on non-finite loss after {result.steps_done} steps; "
              f"last good checkpoint kept at {result.checkpoint_path}", file=sys.stderr)
        return 1
    print(f"trained {result.steps_done} steps, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def cmd_sample(args) -> int:
    pipeline, cfg, data = _load_pipeline_from_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = pathlib.Path(args.out or cfg.out_dir) / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out_dir)
    episodes = _episodes(cfg.world, seed, args.episodes, "sample")

    from .world import LatentClip, TokenGrid, quantize_latents, world_codebook

    if cfg.paradigm == "masked":
        decoded = pipeline.decode_episodes(episodes, derive_seed(seed, "decode"))
        grids = [TokenGrid(d, cfg.world.vocab) for d in decoded]
    else:
        sampled = pipeline.sample_episodes(episodes, derive_seed(seed, "sample"))
        codebook = world_codebook(cfg.world)
        grids = [quantize_latents(LatentClip(s.astype(np.float32)), codebook)
                 for s in sampled]
    for i, (episode, grid) in enumerate(zip(episodes, grids)):
        episode.future_tokens = grid
        save_episode(out_dir / f"sample_{i:03d}.hwm", episode, cfg.world)
        save_token_png(out_dir / f"sample_{i:03d}.png", grid)
    print(f"wrote {len(grids)} samples to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    pipeline, cfg, _ = _load_pipeline_from_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    report = pipeline.evaluate(n_episodes=args.episodes, seed=seed,
                               use_oracle=args.use_oracle)
    if cfg.paradigm == "flow":
        mse, baseline = pipeline.validation_mse(args.episodes or cfg.eval_episodes,
                                                seed)
        extra = {"velocity_mse": mse, "predict_zero_baseline": baseline}
    else:
        extra = {}
    if args.json:
        payload = json.loads(report.to_json())
        payload.update(extra)
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(report.to_table())
        for k, v in extra.items():
            print(f"{k}: {v:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    pipeline = build_pipeline(cfg)
    episodes_by_bs = {}

    def run(batch_size: int):
        if batch_size not in episodes_by_bs:
            episodes_by_bs[batch_size] = _episodes(cfg.world, cfg.seed,
                                                   batch_size, "bench")
        eps = episodes_by_bs[batch_size]
        if cfg.paradigm == "masked":
            pipeline.decode_episodes(eps, cfg.seed)
        else:
            pipeline.sample_episodes(eps, cfg.seed, steps=args.sample_steps)

    sizes = [int(x) for x in args.batch_sizes.split(",")]
    report = run_bench(run, pipeline.model.store, batch_sizes=sizes,
                       repetitions=args.reps)
    if args.json:
        print(json.dumps({
            "samples_per_second": {str(k): v for k, v in report.samples_per_second.items()},
            "peak_bytes": report.peak_bytes,
            "param_bytes": report.param_bytes,
        }, indent=2, sort_keys=True))
    else:
        print(report.to_table())
    return 0


def cmd_params(args) -> int:
    rows = []
    for name in preset_names():
        cfg = make_preset(name)
        if args.paper_dims:
            cfg = paper_dims(cfg)
        count = count_for_config(cfg.paradigm, cfg.block_config(), cfg.world,
                                 cfg.model.patch_spec())
        rows.append((name, count))
    if args.json:
        print(json.dumps({name: {"params": count,
                                 "billions": round(count / 1e9, 3)}
                          for name, count in rows}, indent=2, sort_keys=True))
    else:
        scale = "paper dims" if args.paper_dims else "toy dims"
        print(f"parameter counts ({scale})")
        print(f"{'preset':<18}{'params':>14}{'billions':>10}")
        for name, count in rows:
            print(f"{name:<18}{count:>14,}{count / 1e9:>10.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmlab",
        description="Action-conditioned latent world models: masked-token and "
                    "flow-matching paradigms on a deterministic synthetic world.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_out=True):
        p.add_argument("--preset", help=f"one of: {', '.join(preset_names())}")
        p.add_argument("--config", help="path to a JSON config document")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value by dotted path")
        p.add_argument("--seed", type=int, default=None)
        if with_out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model, write checkpoint + metrics")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="decode/sample futures from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--use-oracle", action="store_true",
                   help="score the exact world oracle instead of the model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="throughput and memory of the inference path")
    common(p, with_out=False)
    p.add_argument("--batch-sizes", default="1,4")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--sample-steps", type=int, default=8,
                   help="flow: Euler steps per bench run")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("params", help="parameter-count table for all presets")
    p.add_argument("--paper-dims", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
