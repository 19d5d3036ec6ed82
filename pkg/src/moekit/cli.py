"""Unified command-line entry point.

Subcommands: plan, train, merge, sft, rl, tokenize, eval. Every run is
reproducible from (config, seed) alone; the config document is
snapshot-copied into the output directory, metrics are line-delimited
JSON, and exit codes are 0 (success), 1 (runtime failure), 2 (usage or
config error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from .checkpoint import Checkpoint, config_digest, load_checkpoint, save_checkpoint
from .config import RunConfig, emit_config, parse_config
from .errors import ConfigError, MoekitError
from .metrics import MetricsWriter, write_manifest
from .planner import make_plan
from .tokenizer import BbpeModel, bbpe_train, efficiency_eval


def main(argv=None) -> int:
    # MOEKIT_LOG is the only environment dependence: log verbosity only
    logging.basicConfig(level=os.environ.get("MOEKIT_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except MoekitError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moekit",
        description="Desk-scale MoE transformer training recipe.")
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    p = sub.add_parser("plan", help="derive training quantities from a compute budget")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="run the staged toy pre-training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="linearly blend two checkpoints")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--think", required=True)
    p.add_argument("--nonthink", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("sft", help="dual-track SFT, merge, and mode-overlap SFT")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("rl", help="sequence-level policy optimization on toy tasks")
    p.add_argument("--config", required=True)
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rl)

    p = sub.add_parser("tokenize", help="train or apply the byte-level tokenizer")
    tsub = p.add_subparsers(dest="tokenize_command", required=True)
    t = tsub.add_parser("train")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_tokenize_train)
    t = tsub.add_parser("encode")
    t.add_argument("--model", required=True)
    t.add_argument("--text", required=True)
    t.set_defaults(func=cmd_tokenize_encode)
    t = tsub.add_parser("stats")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_tokenize_stats)

    p = sub.add_parser("eval", help="tokenizer efficiency report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def _prepare_out(cfg: RunConfig, args, command: str) -> str:
    out = args.out if getattr(args, "out", None) else cfg.out_dir
    os.makedirs(out, exist_ok=True)
    shutil.copy(args.config, os.path.join(out, "config.json"))
    write_manifest(os.path.join(out, "run.json"), command, args.config, cfg.seed)
    return out


def _need(cfg: RunConfig, section: str):
    value = getattr(cfg, section)
    if value is None:
        raise ConfigError(f"config has no {section!r} section")
    return value


def cmd_plan(args) -> int:
    cfg = parse_config(args.config)
    inputs = _need(cfg, "plan")
    plan = make_plan(inputs)
    print("training plan")
    print(f"  compute budget : {plan.budget_flops:.4e} FLOPs")
    print(f"  peak lr        : {plan.peak_lr:.4e}")
    print(f"  batch tokens   : {plan.batch_tokens:.4e} (~{plan.batch_tokens / 1e6:.1f}M)")
    print(f"  granularity    : {plan.granularity:g}")
    print(f"  vocab size     : {plan.vocab_size}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        record = {
            "budget_flops": plan.budget_flops, "peak_lr": plan.peak_lr,
            "batch_tokens": plan.batch_tokens, "granularity": plan.granularity,
            "vocab_size": plan.vocab_size,
        }
        with open(os.path.join(args.out, "plan.json"), "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _train_config(cfg: RunConfig):
    from .trainer import TrainConfig

    model = _need(cfg, "model")
    schedule = _need(cfg, "schedule")
    ramp = _need(cfg, "ramp")
    if not cfg.stages:
        raise ConfigError("config has no 'stages' section")
    train = _need(cfg, "train")
    return TrainConfig(
        model=model, stages=[s.to_plan() for s in cfg.stages], schedule=schedule,
        ramp=ramp, weight_decay=train.weight_decay, grad_clip=train.grad_clip,
        init_std=train.init_std, dtype=train.dtype)


def cmd_train(args) -> int:
    from .tasks import copy_task_corpus
    from .trainer import train_run

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    train_cfg = _train_config(cfg)
    train = _need(cfg, "train")
    if train.corpus != "copy_task":
        raise ConfigError(f"unknown corpus {train.corpus!r}")
    out = _prepare_out(cfg, args, "train")
    rng = np.random.default_rng(cfg.seed)
    with MetricsWriter(os.path.join(out, "metrics.jsonl"), "train") as mw:
        result = train_run(train_cfg, copy_task_corpus, rng, out_dir=out,
                           on_record=mw.write)
    mains = [r["main_ce"] for r in result.records if "main_ce" in r]
    print(f"trained {len(mains)} steps; main CE {mains[0]:.4f} -> {mains[-1]:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_merge(args) -> int:
    from .fusion import MergeSpec, merge_checkpoints

    think = load_checkpoint(args.think)
    nonthink = load_checkpoint(args.nonthink)
    merged = merge_checkpoints(MergeSpec(args.alpha, think, nonthink))
    save_checkpoint(merged, args.out)
    print(f"merged {args.think} and {args.nonthink} at alpha={args.alpha} -> {args.out}")
    return 0


def cmd_sft(args) -> int:
    from .fusion import think_fusion_experiment

    cfg = parse_config(args.config)
    section = _need(cfg, "fusion")
    out = _prepare_out(cfg, args, "sft")
    exp = think_fusion_experiment(
        seed=cfg.seed, n_prompts=section.n_prompts, alpha=section.alpha,
        track_steps=section.track_steps, mod_steps=section.mod_steps,
        n_held_out=section.n_held_out)
    save_checkpoint(exp.merged, os.path.join(out, "merged.bin"))
    save_checkpoint(exp.fused, os.path.join(out, "fused.bin"))
    _dump_mod_dataset(cfg, out)
    with MetricsWriter(os.path.join(out, "metrics.jsonl"), "sft") as mw:
        mw.write({"phase": "merged", **{f"violation_{m}": v for m, v in exp.raw_rates.items()}})
        mw.write({"phase": "fused", **{f"violation_{m}": v for m, v in exp.fused_rates.items()}})
    print(f"format violations: merged {exp.raw_violation_rate:.3f} "
          f"-> fused {exp.fused_violation_rate:.3f}")
    print(f"artifacts in {out}")
    return 0


def _dump_mod_dataset(cfg: RunConfig, out: str) -> None:
    from .fusion import build_mod_dataset
    from .tasks import TASK_GENERATORS

    section = cfg.fusion
    rng = np.random.default_rng(cfg.seed)
    ds = build_mod_dataset(section.n_prompts, TASK_GENERATORS,
                           {"math": 60, "general": 40}, rng)
    with open(os.path.join(out, "mod_dataset.jsonl"), "w", encoding="utf-8") as f:
        for prompt, response, mode in ds.mix:
            f.write(json.dumps({"prompt": prompt, "response": response,
                                "mode": mode}) + "\n")


def cmd_rl(args) -> int:
    from .fusion import default_fusion_config
    from .rl import GspoConfig, RlConfig, rl_experiment, rl_run
    from .tasks import arithmetic_instruction, small_sum_instruction

    cfg = parse_config(args.config)
    section = _need(cfg, "rl")
    out = _prepare_out(cfg, args, "rl")
    tasks = {"small_sum": small_sum_instruction, "arithmetic": arithmetic_instruction}
    if section.task not in tasks:
        raise ConfigError(f"unknown rl task {section.task!r}")
    rl_cfg = RlConfig(
        gspo=GspoConfig(group_size=section.group_size, clip_low=section.clip_low,
                        clip_high=section.clip_high,
                        advantage_eps=section.advantage_eps,
                        dynamic_sampling=section.dynamic_sampling),
        iterations=section.iterations, prompts_per_iter=section.prompts_per_iter,
        max_new_tokens=section.max_new_tokens, temperature=section.temperature,
        lr=section.lr)
    if args.init_checkpoint:
        model_cfg = cfg.model or default_fusion_config()
        ckpt = load_checkpoint(args.init_checkpoint,
                               expect_digest=config_digest(model_cfg))
        params = ckpt.to_tensors()
        result = rl_run(model_cfg, params, BbpeModel(), tasks[section.task],
                        rl_cfg, seed=cfg.seed)
        final = Checkpoint.from_params(params, model_cfg)
    else:
        out_all = rl_experiment(fusion_seed=cfg.seed, rl_seed=cfg.seed,
                                iterations=section.iterations)
        result = out_all
        final = Checkpoint.from_params(out_all["params"], out_all["fusion"].cfg)
    save_checkpoint(final, os.path.join(out, "rl_final.bin"))
    with MetricsWriter(os.path.join(out, "metrics.jsonl"), "rl") as mw:
        for record in result["records"]:
            mw.write(record)
    means = [r["reward_mean"] for r in result["records"]]
    print(f"rl: {len(means)} iterations; mean reward {means[0]:.3f} -> {means[-1]:.3f}")
    print(f"artifacts in {out}")
    return 0


def _tokenizer_corpus(section) -> list[str]:
    corpus: list[str] = list(section.corpus_inline)
    if section.corpus_file:
        with open(section.corpus_file, encoding="utf-8") as f:
            corpus += [line.rstrip("\n") for line in f if line.strip()]
    if not corpus:
        raise ConfigError("tokenizer corpus is empty (corpus_file/corpus_inline)")
    return corpus


def cmd_tokenize_train(args) -> int:
    cfg = parse_config(args.config)
    section = _need(cfg, "tokenizer")
    out = _prepare_out(cfg, args, "tokenize-train")
    model = bbpe_train(_tokenizer_corpus(section), section.target_vocab)
    path = os.path.join(out, "tokenizer.bbpe")
    model.save(path)
    print(f"trained tokenizer: vocab {model.vocab_size}, "
          f"{len(model.merges)} merges -> {path}")
    return 0


def cmd_tokenize_encode(args) -> int:
    model = BbpeModel.load(args.model)
    ids = model.encode(args.text)
    print(json.dumps(ids))
    return 0


def cmd_tokenize_stats(args) -> int:
    return cmd_eval(args)


def cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    section = _need(cfg, "eval")
    model = BbpeModel.load(section.tokenizer_file)
    datasets = {label: list(samples) for label, samples in section.datasets.items()}
    report = efficiency_eval(model, datasets)
    for label in sorted(report.averages):
        flag = "  (empty)" if label in report.empty_labels else ""
        print(f"{label}: avg {report.averages[label]:.2f} tokens over "
              f"{report.counts[label]} samples{flag}")
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "efficiency.json"), "w", encoding="utf-8") as f:
            json.dump({"averages": report.averages, "counts": report.counts,
                       "empty": list(report.empty_labels)}, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
