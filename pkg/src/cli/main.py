"""
Command-line entry point: train | sample | finetune | evaluate | calibrate-null
"""
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from src.cli.config import RunConfig, load_config
from src.cli.io import (JsonlWriter, ensure_dir, plot_hit_histogram, plot_loss_curve, plot_reward_curve,
                        plot_rewards, write_csv, write_figure, write_json)
from src.cli.train import BEST, Trainer
from src.data.sequences import (LabeledSequence, decode, load_dataset, one_hot_batch, random_sequences, split,
                                validate_bases, write_dataset)
from src.data.synthetic import make_synthetic
from src.denoiser.dit import DenoiserParams, init
from src.diffusion.sampler import GaussianDiffusion
from src.diffusion.schedule import linear_schedule
from src.errors import ConfigError, RegditError
from src.evaluation.alignment import calibrate_null, hit_counts, memorization_rate, self_alignment_rate
from src.evaluation.motifs import js_distance, motif_profile, null_threshold
from src.finetune.ddpo import DDPOTrainer
from src.parallel import map_ordered, thread_count
from src.reward.context import Context, ContextMode, compose
from src.reward.oracle import ExternalOracle, ToyMotifOracle
from src.reward.pwm import load_bundled_motifs, read_pwm_file
from src.tensor.checkpoint import save_arrays

logger = logging.getLogger(__name__)

SAMPLE_CHUNK = 64
TEST_SEED_OFFSET = 1_000_003


def load_motifs(config: RunConfig) -> dict:
    if config.data.motif_file:
        return {pwm.motif_id: pwm for pwm in read_pwm_file(config.data.motif_file)}
    return load_bundled_motifs()


def cell_pwms(config: RunConfig, motifs: dict) -> dict:
    """Pwm per cell id from data.cell_motifs."""
    registry = config.data.registry
    out = {}
    for name, motif_id in config.data.cell_motifs.items():
        if motif_id not in motifs:
            raise ConfigError(f"data.cell_motifs: unknown motif '{motif_id}', available: {', '.join(sorted(motifs))}")
        out[registry.lookup(name).id] = motifs[motif_id]
    return out


def load_corpora(config: RunConfig, motifs: dict):
    """(training records, test records) from files or the planted-motif generator."""
    registry = config.data.registry
    length = config.model.seq_len
    planted = {registry[cell_id]: pwm.consensus for cell_id, pwm in cell_pwms(config, motifs).items()}
    if config.data.train_path:
        train = load_dataset(config.data.train_path, length, registry)
    else:
        train = make_synthetic(config.data.synthetic_per_cell, length, planted, config.seed)
    if config.data.test_path:
        test = load_dataset(config.data.test_path, length, registry)
    else:
        test = make_synthetic(max(config.data.synthetic_per_cell // 4, 1), length, planted,
                              config.seed + TEST_SEED_OFFSET)
    return train, test


def build_diffusion(config: RunConfig) -> GaussianDiffusion:
    schedule = linear_schedule(config.schedule.timesteps, config.schedule.beta_start, config.schedule.beta_end)
    return GaussianDiffusion(schedule, config.sampler, null_id=config.model.num_cells)


def build_context(config: RunConfig) -> Context:
    reward = config.reward
    if ContextMode(reward.mode) == ContextMode.EX_SITU:
        return Context.ex_situ(reward.flank, config.model.seq_len)
    try:
        with open(reward.locus_path, "r", encoding="ascii") as handle:
            locus = "".join(handle.read().split()).upper()
    except OSError as e:
        raise ConfigError(f"cannot read reward.locus_path: {e}")
    return Context.in_situ(validate_bases(locus), reward.insert_offset, config.model.seq_len)


def build_oracle(config: RunConfig, motifs: dict):
    if config.reward.kind == "external":
        oracle = ExternalOracle(config.reward.endpoint, config.reward.timeout, config.reward.retries)
        oracle.ping()
        return oracle
    return ToyMotifOracle(cell_pwms(config, motifs))


def dtype_of(config: RunConfig):
    return np.dtype(config.train.dtype)


def cmd_train(config: RunConfig, resume: str = None) -> str:
    """
    Pretrain the denoiser. Writes best.rgdf (+ .json sidecar), last.rgdf,
    loss.csv and loss.json (figure) into the output directory.
    """
    out = ensure_dir(config.output_dir)
    motifs = load_motifs(config)
    records, _ = load_corpora(config, motifs)
    train, val = split(records, config.data.val_fraction, config.seed)
    dtype = dtype_of(config)
    arrays = lambda rs: (one_hot_batch(rs, dtype=dtype), np.array([r.cell.id for r in rs], dtype=np.int64))

    sidecar = {"config": config.to_dict()}
    if resume:
        params, meta, state = DenoiserParams.load(resume, dtype=dtype)
    else:
        params, meta, state = init(config.model, config.seed, dtype=dtype), None, None
    t = config.train
    trainer = Trainer(params, build_diffusion(config), arrays(train), arrays(val), batch_size=t.batch_size,
                      lr=t.lr, patience=t.patience, grad_clip=t.grad_clip, rc_augment=t.rc_augment, seed=config.seed)
    if resume:
        trainer.restore(meta, state)
    logger.info("Training %d parameters on %d sequences (%d validation)", params.count(), len(train), len(val))
    history = trainer.fit(t.epochs, out, sidecar)
    write_csv(os.path.join(out, "loss.csv"), history)
    write_figure(os.path.join(out, "loss.json"), plot_loss_curve(history))
    write_json(os.path.join(out, "config.json"), config.to_dict())
    return os.path.join(out, BEST)


def generate(params, diffusion: GaussianDiffusion, cells, w: float, seed: int, record: bool = False):
    """Sample in fixed-size chunks; returns (records as (bases, cell id), trajectories or None)."""
    cells = np.asarray(cells, dtype=np.int64)
    rng = np.random.default_rng(seed)
    bases = []
    trajectories = [] if record else None
    for start in range(0, len(cells), SAMPLE_CHUNK):
        chunk = cells[start:start + SAMPLE_CHUNK]
        samples, trajs = diffusion.sample(params, chunk, w, rng, record=record)
        bases.extend(decode(s) for s in samples)
        if record:
            trajectories.extend(trajs)
    return list(zip(bases, cells.tolist())), trajectories


def cmd_sample(config: RunConfig, checkpoint: str, cell: str = None, n: int = None, w: float = None,
               trajectories: bool = False) -> str:
    """
    Decode n guided samples per requested cell (every cell when none is given)
    into samples.tsv; optionally dump the reverse chains to trajectories.rgdf.
    """
    registry = config.data.registry
    cells = [registry.lookup(cell)] if cell else list(registry)
    n = config.evaluate.n_per_cell if n is None else n
    w = config.sampler.guidance_scale if w is None else w
    out = ensure_dir(config.output_dir)
    params, _, _ = DenoiserParams.load(checkpoint, dtype=dtype_of(config))
    ids = np.repeat([c.id for c in cells], n)
    samples, trajs = generate(params, build_diffusion(config), ids, w, config.seed, record=trajectories)
    path = os.path.join(out, "samples.tsv")
    write_dataset(path, [LabeledSequence(bases, registry[cell_id]) for bases, cell_id in samples])
    if trajectories and trajs:
        save_arrays(os.path.join(out, "trajectories.rgdf"), {
            "states": np.stack([tr.states for tr in trajs]),
            "logprob_old": np.stack([tr.logprob_old for tr in trajs]),
            "cells": np.array([tr.cell for tr in trajs], dtype=np.float64),
        })
    logger.info("Wrote %d samples to %s", len(samples), path)
    return path


def cmd_finetune(config: RunConfig, checkpoint: str, steps: int = None) -> str:
    """
    DDPO against the configured oracle. Writes metrics.jsonl (one line per
    step), eval_snapshots.csv, ddpo_reward.json, best_reward.rgdf and final.rgdf.
    """
    motifs = load_motifs(config)
    oracle = build_oracle(config, motifs)
    context = build_context(config)
    out = ensure_dir(config.output_dir)
    params, _, _ = DenoiserParams.load(checkpoint, dtype=dtype_of(config))
    trainer = DDPOTrainer(params, build_diffusion(config), oracle, context, config.ddpo, seed=config.seed)
    logger.info("Finetuning against %s in %s context", oracle.descriptor, context.mode.value)

    metrics = JsonlWriter(os.path.join(out, "metrics.jsonl"))

    def on_step(m):
        metrics.append({"step": m.step, "mean_reward": m.mean_reward, "clip_fraction": m.clip_fraction,
                        "kl": m.kl, "loss": m.loss, "aborted": m.aborted, "n_failed": m.n_failed})

    def on_snapshot(_):
        write_csv(os.path.join(out, "eval_snapshots.csv"), pd.DataFrame(trainer.snapshots))

    trainer.run(steps, on_step=on_step, on_snapshot=on_snapshot)
    sidecar = {"config": config.to_dict(), "best_reward": float(trainer.best_reward)}
    final = os.path.join(out, "final.rgdf")
    params.save(final, sidecar=sidecar)
    best = DenoiserParams.from_arrays(params.config, trainer.best_arrays or params.to_arrays(), dtype=params.dtype)
    best.save(os.path.join(out, "best_reward.rgdf"), sidecar=sidecar)
    if trainer.history:
        write_figure(os.path.join(out, "ddpo_reward.json"), plot_reward_curve(trainer.history_frame()))
    return final


def _profile_js(sequences, reference, motif_list, quantile: float) -> float:
    p = motif_profile(sequences, motif_list, quantile)
    q = motif_profile(reference, motif_list, quantile)
    if p.total == 0 or q.total == 0:
        logger.warning("No motif hits in one of the sets, JS distance undefined")
        return float("nan")
    return js_distance(p, q)


def cmd_evaluate(config: RunConfig, generated: str = None, checkpoint: str = None) -> str:
    """
    Memorization, self-alignment and motif JS for the generated set and a
    Random control, per-cell reward quartiles, and the hit histogram data.
    Writes metrics.csv, hits.csv, hits.json, rewards.csv and rewards.json.
    """
    out = ensure_dir(config.output_dir)
    registry = config.data.registry
    length = config.model.seq_len
    motifs = load_motifs(config)
    train, test = load_corpora(config, motifs)
    generated = generated or config.evaluate.generated
    if generated:
        records = load_dataset(generated, length, registry)
    elif checkpoint:
        params, _, _ = DenoiserParams.load(checkpoint, dtype=dtype_of(config))
        ids = np.repeat([c.id for c in registry], config.evaluate.n_per_cell)
        samples, _ = generate(params, build_diffusion(config), ids, config.sampler.guidance_scale, config.seed)
        records = [LabeledSequence(bases, registry[cell_id]) for bases, cell_id in samples]
    else:
        raise ConfigError("evaluate needs --generated, evaluate.generated or --checkpoint")
    if not records:
        raise ConfigError("the generated set is empty")

    rng = np.random.default_rng([config.seed, len(records)])
    sets = {
        "generated": [r.bases for r in records],
        "random": random_sequences(len(records), length, rng),
    }
    training = [r.bases for r in train]
    testing = [r.bases for r in test]
    params = config.evaluate.alignment
    motif_list = list(motifs.values())
    described = f"k={params.k};min_len={params.min_len};min_identity={params.min_identity}"

    rows = []
    for name, seqs in sets.items():
        rows.append(("memorization_rate", memorization_rate(seqs, training, params), f"set={name};{described}"))
        rows.append(("self_alignment_rate", self_alignment_rate(seqs, params) if len(seqs) > 1 else float("nan"),
                     f"set={name};{described}"))
        rows.append(("motif_js_vs_test", _profile_js(seqs, testing, motif_list, config.evaluate.threshold_quantile),
                     f"set={name};quantile={config.evaluate.threshold_quantile}"))

    oracle = build_oracle(config, motifs)
    context = build_context(config)
    score = lambda r: oracle(compose(one_hot_batch([r.bases], dtype=np.float64)[0], context), r.cell.id)
    rewards = pd.DataFrame({"sequence": [r.bases for r in records], "cell": [r.cell.name for r in records],
                            "reward": map_ordered(score, records)})
    for cell, group in rewards.groupby("cell", sort=False):
        q1, median, q3 = np.quantile(group["reward"], [0.25, 0.5, 0.75])
        rows += [("reward_q1", q1, f"cell={cell}"), ("reward_median", median, f"cell={cell}"),
                 ("reward_q3", q3, f"cell={cell}")]
    baseline_median = None
    if config.evaluate.baseline:
        baseline = load_dataset(config.evaluate.baseline, length, registry)
        baseline_median = float(np.median(map_ordered(score, baseline)))
        rows.append(("baseline_median", baseline_median, f"file={os.path.basename(config.evaluate.baseline)}"))
        rows.append(("fraction_above_baseline", float(np.mean(rewards["reward"] > baseline_median)), "set=generated"))

    hits = []
    for name, queries, exclude in (("training", training, True), ("test", testing, False),
                                   ("generated", sets["generated"], False), ("random", sets["random"], False)):
        counts = hit_counts(queries, training, params, exclude_self=exclude)
        hits.append(pd.DataFrame({"set": name, "sequence_index": np.arange(len(counts)), "hits": counts}))
    hits = pd.concat(hits, ignore_index=True)

    metrics = pd.DataFrame(rows, columns=["metric", "value", "params"])
    write_csv(os.path.join(out, "metrics.csv"), metrics)
    write_csv(os.path.join(out, "hits.csv"), hits)
    write_figure(os.path.join(out, "hits.json"), plot_hit_histogram(hits))
    write_csv(os.path.join(out, "rewards.csv"), rewards)
    write_figure(os.path.join(out, "rewards.json"), plot_rewards(rewards, baseline_median))
    for metric, value, extra in rows:
        logger.info("%s [%s]: %.4f", metric, extra, value)
    return os.path.join(out, "metrics.csv")


def cmd_calibrate_null(config: RunConfig, replicates: int = None) -> str:
    """
    Null rates of both alignment metrics for uniform random sets sized like
    the evaluation, plus the per-motif score thresholds.
    """
    out = ensure_dir(config.output_dir)
    replicates = config.evaluate.null_replicates if replicates is None else replicates
    n_generated = max(config.evaluate.n_per_cell * len(config.data.cells), 2)
    n_training = config.data.synthetic_per_cell * len(config.data.cells)
    params = config.evaluate.alignment
    rates = calibrate_null(n_generated, n_training, config.model.seq_len, replicates, config.seed, params)
    described = f"n_generated={n_generated};n_training={n_training};length={config.model.seq_len}"
    rows = []
    for metric, rate in rates.items():
        rows += [(f"null_{metric}_mean", rate.mean, described), (f"null_{metric}_low", rate.low, described),
                 (f"null_{metric}_high", rate.high, described)]
    quantile = config.evaluate.threshold_quantile
    for motif_id, pwm in sorted(load_motifs(config).items()):
        rows.append(("motif_threshold", null_threshold(pwm, quantile), f"motif={motif_id};quantile={quantile}"))
    path = os.path.join(out, "null.csv")
    write_csv(path, pd.DataFrame(rows, columns=["metric", "value", "params"]))
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regdit", description="Cell-type-conditioned DNA diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--out", default=None, help="overrides config output_dir")
        p.add_argument("--log-level", default="INFO")
        return p

    p = command("train", "pretrain the denoiser")
    p.add_argument("--resume", default=None, help="checkpoint written by a previous train run")

    p = command("sample", "decode guided samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cell", default=None, help="cell name; every cell when omitted")
    p.add_argument("--n", type=int, default=None, help="samples per cell")
    p.add_argument("--w", type=float, default=None, help="guidance scale")
    p.add_argument("--trajectories", action="store_true", help="also dump reverse chains")

    p = command("finetune", "DDPO against the configured reward oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None, help="overrides ddpo.total_steps")

    p = command("evaluate", "memorization, self-alignment, motif JS and reward metrics")
    p.add_argument("--generated", default=None, help="TSV of generated sequences")
    p.add_argument("--checkpoint", default=None, help="sample the generated set from this checkpoint")

    p = command("calibrate-null", "Monte Carlo null rates and motif thresholds")
    p.add_argument("--replicates", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        level=getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.output_dir = args.out
        config.validate()
        logger.debug("Using %d worker threads", thread_count())

        if args.command == "train":
            cmd_train(config, resume=args.resume)
        elif args.command == "sample":
            if args.n is not None and args.n < 0:
                raise ConfigError(f"--n must be >= 0, got: {args.n}")
            cmd_sample(config, args.checkpoint, cell=args.cell, n=args.n, w=args.w, trajectories=args.trajectories)
        elif args.command == "finetune":
            cmd_finetune(config, args.checkpoint, steps=args.steps)
        elif args.command == "evaluate":
            cmd_evaluate(config, generated=args.generated, checkpoint=args.checkpoint)
        else:
            cmd_calibrate_null(config, replicates=args.replicates)
    except RegditError as e:
        logger.error("%s failed: %s", args.command, e)
        return 2
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
