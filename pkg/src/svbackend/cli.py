"""Command-line pipeline: synthesize embedding data, train back-ends, score
trial lists, and evaluate score files.

Every command is deterministic given its flags and seed, logs its fully
resolved configuration, and writes outputs atomically (temp file plus
rename), so no partial files survive a failure. A JSON config file may
supply any of a command's keys; explicit command-line flags win, and
unknown keys are rejected.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import baselines, metrics, trainer
from ._util import atomic_write
from .attention import BackendConfig, backend_forward, load_params
from .data import (
    SyntheticSpec,
    generate_synthetic,
    read_embeddings,
    read_trials,
    split_train_eval,
    write_embeddings,
    write_trials,
)
from .numerics import spawn_rng
from .trainer import TRAINER_MAGIC, load_checkpoint

logger = logging.getLogger("svbackend")

DEFAULT_P_TARGETS = (0.01, 0.001)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="svbackend",
        description="Speaker-verification back-end toolkit over precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    synth = sub.add_parser("synth", help="generate a synthetic embedding set and trial list")
    commands["synth"] = synth
    synth.add_argument("--speakers", type=int, default=50)
    synth.add_argument("--utts", type=int, default=8, help="utterances per speaker")
    synth.add_argument("--dim", type=int, default=32)
    synth.add_argument("--between-scale", type=float, default=1.0)
    synth.add_argument("--within-scale", type=float, default=0.5)
    synth.add_argument("--within-low", type=float, default=None,
                       help="lower bound of the per-speaker within-scale range")
    synth.add_argument("--within-high", type=float, default=None)
    synth.add_argument("--eval-fraction", type=float, default=0.2,
                       help="speaker fraction held out for trials; 0 keeps everything in one file")
    synth.add_argument("--enroll-per-speaker", type=int, default=3)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--config", default=None)
    synth.add_argument("--out", required=True, help="output path prefix")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="train a back-end on an embedding file")
    commands["train"] = train
    train.add_argument("--embeddings", required=True)
    train.add_argument("--backend", choices=("attention", "plda"), default="attention")
    train.add_argument("--epochs", type=int, default=40)
    train.add_argument("--batch-speakers", type=int, default=256)
    train.add_argument("--batch-utts", type=int, default=5)
    train.add_argument("--lambda", dest="loss_weight", type=float, default=0.6,
                       help="weight of the set-softmax loss term")
    train.add_argument("--lr-min", type=float, default=1e-5)
    train.add_argument("--lr-max", type=float, default=3e-5)
    train.add_argument("--half-cycle", type=int, default=2000)
    train.add_argument("--sdsa-heads", type=int, default=4)
    train.add_argument("--ffsa-heads", type=int, default=4)
    train.add_argument("--ffsa-hidden", type=int, default=64)
    train.add_argument("--lda-dim", type=int, default=400,
                       help="LDA output dimension for the plda backend; 0 disables LDA")
    train.add_argument("--latent-dim", type=int, default=150)
    train.add_argument("--em-iters", type=int, default=10)
    train.add_argument("--length-norm", action="store_true")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--config", default=None)
    train.add_argument("--out", required=True, help="checkpoint / model output path")
    train.set_defaults(func=cmd_train)

    score = sub.add_parser("score", help="score a trial list against a trained back-end")
    commands["score"] = score
    score.add_argument("--embeddings", required=True)
    score.add_argument("--trials", required=True)
    score.add_argument("--checkpoint", default=None,
                       help="model file (required for attention and plda backends)")
    score.add_argument("--backend", choices=("attention", "cosine", "plda"), default="attention")
    score.add_argument("--agg", choices=("mean", "concat"), default="mean",
                       help="enrollment aggregation for cosine/plda backends")
    score.add_argument("--length-norm", action="store_true")
    score.add_argument("--config", default=None)
    score.add_argument("--out", required=True, help="score file output path")
    score.set_defaults(func=cmd_score)

    evaluate = sub.add_parser("eval", help="compute EER / minDCF / DET points from a score file")
    commands["eval"] = evaluate
    evaluate.add_argument("--scores", required=True)
    evaluate.add_argument("--p-target", action="append", type=float, default=None,
                          help="operating-point target prior (repeatable; defaults 0.01 and 0.001)")
    evaluate.add_argument("--c-miss", type=float, default=1.0)
    evaluate.add_argument("--c-fa", type=float, default=1.0)
    evaluate.add_argument("--config", default=None)
    evaluate.add_argument("--out", default=None,
                          help="DET points output path (default: score file + '.det')")
    evaluate.set_defaults(func=cmd_eval)
    return parser, commands


def _apply_config_file(commands, argv):
    """Install --config JSON values as subparser defaults; flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None:
        return
    command = next((a for a in argv if not a.startswith("-")), None)
    if command not in commands:
        return
    with open(known.config, "r", encoding="utf-8") as fh:
        values = json.load(fh)
    if not isinstance(values, dict):
        raise ValueError(f"{known.config}: config must be a JSON object")
    subparser = commands[command]
    valid = {a.dest for a in subparser._actions} - {"help", "func", "config"}
    unknown = sorted(set(values) - valid)
    if unknown:
        raise ValueError(
            f"{known.config}: unknown config keys {unknown} for command {command!r} "
            f"(valid: {sorted(valid)})"
        )
    subparser.set_defaults(**values)


def cmd_synth(args):
    if (args.within_low is None) != (args.within_high is None):
        raise ValueError("--within-low and --within-high must be given together")
    within_range = None
    if args.within_low is not None:
        within_range = (args.within_low, args.within_high)
    spec = SyntheticSpec(
        n_speakers=args.speakers,
        utts_per_speaker=args.utts,
        dim=args.dim,
        between_scale=args.between_scale,
        within_scale=args.within_scale,
        within_range=within_range,
        seed=args.seed,
    )
    emb, _ = generate_synthetic(spec)
    train_path = args.out + ".train.embv"
    if args.eval_fraction > 0.0:
        train_set, trials, eval_set = split_train_eval(
            emb, args.eval_fraction, args.enroll_per_speaker, spawn_rng(args.seed, 1))
        write_embeddings(train_set, train_path)
        write_embeddings(eval_set, args.out + ".eval.embv")
        write_trials(trials, args.out + ".trials.txt")
        logger.info("wrote %s (%d records), %s (%d records), %s (%d trials)",
                    train_path, len(train_set), args.out + ".eval.embv", len(eval_set),
                    args.out + ".trials.txt", len(trials))
    else:
        write_embeddings(emb, train_path)
        logger.info("wrote %s (%d records)", train_path, len(emb))
    return 0


def _write_train_log(history, path):
    with atomic_write(path, "w") as fh:
        for stats in history:
            fh.write(trainer.format_log_line(stats) + "\n")


def cmd_train(args):
    pool = read_embeddings(args.embeddings)
    if args.backend == "attention":
        config = BackendConfig(dim=pool.dim, sdsa_heads=args.sdsa_heads,
                               ffsa_heads=args.ffsa_heads, ffsa_hidden=args.ffsa_hidden)
        spec = trainer.BatchSpec(args.batch_speakers, args.batch_utts, args.seed)
        schedule = trainer.CyclicalLrSchedule(args.lr_min, args.lr_max, args.half_cycle)
        state = trainer.train(pool, config, spec, schedule,
                              loss_weight=args.loss_weight, epochs=args.epochs)
        trainer.save_checkpoint(state, args.out)
        _write_train_log(state.history, args.out + ".log")
        logger.info("wrote checkpoint %s after %d steps", args.out, state.step)
    else:
        X, speakers, _ = pool.to_arrays()
        if args.lda_dim > 0:
            proj = baselines.lda_fit(X, speakers, args.lda_dim)
            baselines.save_lda(proj, args.out + ".lda")
            X = baselines.lda_apply(proj, X)
            logger.info("wrote LDA projection %s", args.out + ".lda")
        if args.length_norm:
            X = baselines.length_normalize(X)
        model = baselines.plda_fit(X, speakers, args.latent_dim, args.em_iters)
        baselines.save_plda(model, args.out)
        logger.info("wrote PLDA model %s (final log-likelihood %s)",
                    args.out, model.loglik_path[-1])
    return 0


def _load_attention_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(TRAINER_MAGIC))
    if magic == TRAINER_MAGIC:
        state = load_checkpoint(path)
        return state.params, state.config
    return load_params(path)


def _concat_fallback(vectors, warned):
    """CLI concat mode: pass a single precomputed embedding through, else
    fall back to the mean with one warning."""
    if len(vectors) == 1:
        return vectors[0], warned
    if not warned:
        logger.warning(
            "concat aggregation expects one precomputed concatenated-audio "
            "embedding per trial; falling back to mean for multi-embedding "
            "enrollment sets")
    return np.mean(vectors, axis=0), True


def cmd_score(args):
    pool = read_embeddings(args.embeddings)
    trials = read_trials(args.trials)

    if args.backend == "attention":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for the attention backend")
        params, config = _load_attention_model(args.checkpoint)
        if config.dim != pool.dim:
            raise ValueError(
                f"model dimension {config.dim} does not match embeddings dimension {pool.dim}")
    elif args.backend == "plda":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for the plda backend")
        model = baselines.load_plda(args.checkpoint)
        try:
            lda = baselines.load_lda(args.checkpoint + ".lda")
        except FileNotFoundError:
            lda = None

        def project(x):
            x = np.asarray(x, dtype=np.float64)
            if lda is not None:
                x = baselines.lda_apply(lda, x)
            if args.length_norm:
                x = baselines.length_normalize(x)
            return x

    records = []
    warned = False
    for lineno, trial in enumerate(trials, start=1):
        try:
            enroll = [pool.get(trial.enroll_speaker, u) for u in trial.enroll_utterances]
            test = pool.find_utterance(trial.test_utterance)
        except KeyError as exc:
            raise ValueError(f"{args.trials}: trial line {lineno}: {exc.args[0]}") from None
        if args.backend == "attention":
            value, _ = backend_forward(np.stack(enroll), test, params, config)
        elif args.backend == "cosine":
            if args.agg == "concat":
                rep, warned = _concat_fallback(enroll, warned)
            else:
                rep = baselines.aggregate_enrollment(enroll, "mean")
            value = baselines.cosine_score(rep, test)
        else:
            if args.agg == "concat":
                rep, warned = _concat_fallback(enroll, warned)
            else:
                rep = np.mean(enroll, axis=0)
            value = baselines.plda_score(model, project(rep), project(test))
        trial_id = f"{trial.enroll_speaker}:{trial.test_utterance}"
        records.append((trial_id, value, trial.label))
    scores = metrics.ScoreSet.from_records(records)
    metrics.write_scores(scores, args.out)
    logger.info("wrote %d scores to %s", len(records), args.out)
    return 0


def cmd_eval(args):
    scores = metrics.read_scores(args.scores)
    if scores.labels is None:
        raise ValueError(f"{args.scores}: score file has no labels; evaluation needs them")
    p_targets = args.p_target if args.p_target else list(DEFAULT_P_TARGETS)
    eer_value, eer_threshold = metrics.eer(scores)
    print(f"EER(%): {eer_value * 100.0!r}\tthreshold: {eer_threshold!r}")
    for p in p_targets:
        op = metrics.OperatingPoint(p_target=p, c_miss=args.c_miss, c_fa=args.c_fa)
        dcf, threshold = metrics.min_dcf(scores, op)
        print(f"minDCF({p:g}): {dcf!r}\tthreshold: {threshold!r}")
    det_path = args.out if args.out else args.scores + ".det"
    points = metrics.det_points(scores)
    metrics.write_det(points, det_path)
    print(f"DET points: {det_path} ({len(points)} points)")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser, commands = _build_parser()
    try:
        _apply_config_file(commands, argv)
        args = parser.parse_args(argv)
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
