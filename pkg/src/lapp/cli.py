"""Command-line entry point: ``lapp <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import rl
from .annotation import AnnotationError, build_annotator, labels_to_triples
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .envs import env_dims
from .loop import BootstrapError, LappRun, resolve_predictor_config, sample_pairs, transfer_finetune
from .persistence import (
    Checkpoint,
    CheckpointError,
    MetricsLogger,
    RunLock,
    RunLockError,
    load_checkpoint,
    load_pairs,
    load_triples,
    save_checkpoint,
    save_labels,
    save_pairs,
    save_triples,
)
from .trainer import TrainingError, train_ensemble

log = logging.getLogger("lapp")


def checkpoint_run(run, config):
    arrays, meta = run.state()
    return Checkpoint({"config": config.to_dict(), "run": meta}, arrays)


def config_from_checkpoint(ckpt):
    return parse_config(yaml.safe_dump(ckpt.meta["config"]))


def restore_run(ckpt, config=None, annotator=None):
    """Rebuild a LappRun exactly as it was when ``ckpt`` was taken."""
    config = config or config_from_checkpoint(ckpt)
    run = LappRun(config.settings(), baseline=ckpt.meta["run"]["baseline"], annotator=annotator)
    run.load_state(ckpt.arrays, ckpt.meta["run"])
    return run


def policy_checkpoint(bundle, config):
    return Checkpoint({"config": config.to_dict(), "run": None}, bundle.state_arrays())


def _resolve_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.annotator is not None or args.replay_file is not None:
        ann = config.annotator
        changes = {}
        if args.annotator is not None:
            changes["backend"] = args.annotator
        if args.replay_file is not None:
            changes["replay_path"] = args.replay_file
        config = config.replace(annotator=dataclasses.replace(ann, **changes))
    return config


def _out_dir(args):
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_loop(run, config, out, epochs, checkpoint_every, logger):
    def on_epoch(r, row):
        logger.log(row)
        if checkpoint_every and r.epoch % checkpoint_every == 0:
            save_checkpoint(checkpoint_run(r, config), out / "checkpoint.bin")
        if row["epoch"] % 10 == 0:
            log.info(
                "epoch %d  tracking %.3f  r_E %.3f  r_p %.3f",
                row["epoch"],
                row["tracking_error"],
                row["mean_env_reward"],
                row["mean_pref_reward"],
            )

    remaining = max(0, epochs - run.epoch)
    try:
        run.train(remaining, callback=on_epoch)
    except BootstrapError as exc:
        if exc.partial:
            save_triples(out / "bootstrap_partial.jsonl", exc.partial)
        raise
    save_checkpoint(checkpoint_run(run, config), out / "checkpoint.bin")


def cmd_train(args):
    out = _out_dir(args)
    with RunLock(out):
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            config = config_from_checkpoint(ckpt)
            run = restore_run(ckpt, config)
            logger = MetricsLogger(out, config.loop.run_label, resume_epoch=run.epoch)
        else:
            config = _resolve_config(args)
            run = LappRun(config.settings(), baseline=args.baseline)
            label = "baseline" if args.baseline else config.loop.run_label
            logger = MetricsLogger(out, label)
        (out / "config.yaml").write_text(dump_config(config))
        epochs = args.epochs if args.epochs is not None else config.loop.epochs
        _train_loop(run, config, out, epochs, args.checkpoint_every, logger)
        metrics = rl.evaluate_policy(run.bundle, config.env, episodes=2, seed=config.seed + 1000)
        print(json.dumps(metrics))
    return 0


def cmd_bootstrap(args):
    out = _out_dir(args)
    config = _resolve_config(args)
    with RunLock(out):
        run = LappRun(config.settings())
        try:
            run.bootstrap()
        except BootstrapError as exc:
            if exc.partial:
                save_triples(out / "bootstrap_partial.jsonl", exc.partial)
            raise
        save_triples(out / "dataset.jsonl", list(run.dataset.triples))
        save_checkpoint(checkpoint_run(run, config), out / "checkpoint.bin")
    print(json.dumps({"triples": len(run.dataset), "labels": run.label_totals}))
    return 0


def cmd_annotate(args):
    config = _resolve_config(args)
    pairs = load_pairs(args.pairs)
    annotator = build_annotator(config.annotator, config.env.dt, config.loop.segment_length)
    labels = annotator.label_pairs(pairs)
    output = Path(args.output) if args.output else _out_dir(args) / "labels.jsonl"
    save_labels(output, pairs, labels)
    outcome = labels_to_triples(pairs, labels)
    print(json.dumps({"annotated": len(pairs), "labeled": len(outcome.triples), "discarded": outcome.discarded}))
    return 0


def cmd_train_predictor(args):
    out = _out_dir(args)
    config = _resolve_config(args)
    triples = load_triples(args.dataset)
    pcfg = resolve_predictor_config(config.predictor, config.env)
    result = train_ensemble(triples, pcfg, config.trainer, seed=config.seed)
    with open(out / "predictor_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "epoch", "train_loss", "val_loss"])
        w.writerows(result.curves)
    ens = result.ensemble
    meta = {
        "config": config.to_dict(),
        "run": None,
        "ensemble": {"count": len(ens.members), "input_dim": ens.input_dim},
    }
    save_checkpoint(Checkpoint(meta, ens.state_arrays("ensemble/")), out / "predictor.bin")
    print(json.dumps({"member_val_losses": result.member_losses, "selected": ens.indices}))
    return 0


def _load_bundle(args, config):
    obs_dim, act_dim = env_dims(config.env)
    bundle = rl.PolicyBundle(obs_dim, act_dim, config.ppo, config.seed)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        try:
            bundle.load_state_arrays(ckpt.arrays)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint policy does not match the config: {exc}") from exc
    return bundle


def _config_for_checkpoint(args):
    if args.config or not getattr(args, "checkpoint", None):
        return _resolve_config(args)
    config = config_from_checkpoint(load_checkpoint(args.checkpoint))
    return config.replace(seed=args.seed) if args.seed is not None else config


def cmd_eval(args):
    config = _config_for_checkpoint(args)
    bundle = _load_bundle(args, config)
    metrics = rl.evaluate_policy(bundle, config.env, episodes=args.episodes, seed=config.seed, command=args.command)
    for key, value in metrics.items():
        print(f"{key}: {value:.4f}")
    return 0


def cmd_transfer(args):
    out = _out_dir(args)
    config = _resolve_config(args)
    source = load_checkpoint(args.checkpoint)
    epochs = args.epochs if args.epochs is not None else config.loop.epochs
    with RunLock(out):
        (out / "config.yaml").write_text(dump_config(config))
        logger = MetricsLogger(out, "transfer")
        result = transfer_finetune(source.arrays, config.settings(), epochs, callback=lambda r, row: logger.log(row))
        save_checkpoint(checkpoint_run(result.run, config), out / "checkpoint.bin")
    metrics = rl.evaluate_policy(result.run.bundle, config.env, episodes=2, seed=config.seed + 1000)
    print(json.dumps(metrics))
    return 0


def cmd_export_segments(args):
    config = _config_for_checkpoint(args)
    bundle = _load_bundle(args, config)
    loop = config.loop
    envs, obs = rl.make_envs(config.env, loop.num_envs, config.seed)
    rng = np.random.default_rng(config.seed)
    buf, _, _ = rl.collect_rollout(bundle, envs, obs, loop.steps_per_epoch, rng, update_normalizer=False)
    pairs = sample_pairs(buf, args.pairs, loop.segment_length, rng)
    output = Path(args.output) if args.output else _out_dir(args) / "pairs.jsonl"
    save_pairs(output, pairs)
    print(json.dumps({"pairs": len(pairs), "output": str(output)}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lapp", description="Preference-guided locomotion training.")
    p.add_argument("--config", help="run config YAML (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", default="runs/latest", help="output directory (default: runs/latest)")
    p.add_argument("--annotator", choices=["oracle", "replay", "llm"], help="override the annotator backend")
    p.add_argument("--replay-file", help="JSONL labels for the replay annotator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the preference loop (or plain PPO with --baseline)")
    t.add_argument("--baseline", action="store_true", help="environment reward only, no predictor")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bootstrap", help="label an initial dataset and fit the first ensemble")
    b.set_defaults(func=cmd_bootstrap)

    a = sub.add_parser("annotate", help="label a pair file offline")
    a.add_argument("--pairs", required=True)
    a.add_argument("--output")
    a.set_defaults(func=cmd_annotate)

    tp = sub.add_parser("train-predictor", help="fit a predictor ensemble on a triple dataset")
    tp.add_argument("--dataset", required=True)
    tp.set_defaults(func=cmd_train_predictor)

    e = sub.add_parser("eval", help="deterministic rollouts of a policy")
    e.add_argument("--checkpoint", help="policy checkpoint (a fresh random policy when omitted)")
    e.add_argument("--episodes", type=int, default=2)
    e.add_argument("--command", type=float, help="fixed velocity command")
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("transfer", help="fine-tune a checkpoint in the environment of --config")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--epochs", type=int)
    tr.set_defaults(func=cmd_transfer)

    x = sub.add_parser("export-segments", help="write sampled segment pairs for offline labeling")
    x.add_argument("--checkpoint")
    x.add_argument("--pairs", type=int, default=10)
    x.add_argument("--output")
    x.set_defaults(func=cmd_export_segments)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (
        ConfigError,
        CheckpointError,
        AnnotationError,
        BootstrapError,
        TrainingError,
        RunLockError,
        FileNotFoundError,
        KeyError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
