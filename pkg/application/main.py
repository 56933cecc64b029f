"""
HeadMask command-line application
Main entry point wiring run configs to training, importance estimation,
masking sweeps, robustness experiments, statistics, evaluation and plotting
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import RunConfig, get_settings, load_run_config
from service.analysis import (
    SweepOrder,
    area_under_curve,
    compare_distributions,
    evaluate,
    sweep_cumulative,
    sweep_group_masking,
    write_histogram_csv,
    write_stats_csv,
    write_sweep_csv,
)
from service.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from service.errors import DataError, HeadMaskError, UsageError
from service.importance import (
    check_report_matches,
    estimate_importance,
    read_importance_csv,
    write_importance_csv,
)
from service.model import HeadId, HeadMaskTransformer, MaskSet, ModelConfig
from service.plotting import plot_csv
from service.robustness import check_orderings, robustness_runs, write_orderings_csv, write_robustness_csv
from service.tasks import ParallelCorpus, load_tsv_corpus, make_batches, write_tsv_corpus
from service.training import TrainVariant, train, training_summary, write_training_log

# Logger
logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
RUN_META_PREFIX = "run."
EVAL_HEADER = ["split", "masked_heads", "token_accuracy", "bleu"]


def _configure_logging() -> None:
    level = getattr(logging, get_settings().log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _print_outputs(paths: Sequence[Path]) -> None:
    for path in paths:
        print(path)


def _parse_flat_ids(text: Optional[str]) -> List[int]:
    if not text:
        return []
    try:
        return [int(part) for part in text.replace(";", ",").split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"--mask expects comma-separated flat head ids, got {text!r}") from e


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from e
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    return seeds


# Checkpoint <-> run config


def _run_config_from_checkpoint(checkpoint: Checkpoint) -> RunConfig:
    entries = {key[len(RUN_META_PREFIX):]: value for key, value in checkpoint.meta.items()
               if key.startswith(RUN_META_PREFIX)}
    if not entries:
        raise DataError(f"{checkpoint.path}: checkpoint carries no run configuration; pass --data")
    # Stored values win over the environment so the corpus is rebuilt exactly
    return load_run_config(None, **{k: (v if v != "" else None) for k, v in entries.items()})


def _check_corpus_matches(config: ModelConfig, corpus: ParallelCorpus) -> None:
    if (len(corpus.src_vocab), len(corpus.tgt_vocab)) != (config.vocab_src, config.vocab_tgt):
        raise DataError(f"corpus vocabularies {len(corpus.src_vocab)}/{len(corpus.tgt_vocab)} do not match "
                        f"checkpoint vocabularies {config.vocab_src}/{config.vocab_tgt}")


def _load_model_and_data(checkpoint_path: str, data: Optional[str]):
    checkpoint = load_checkpoint(checkpoint_path)
    run_config = _run_config_from_checkpoint(checkpoint) if not data else None
    corpus = load_tsv_corpus(data) if data else run_config.build_corpus()
    _check_corpus_matches(checkpoint.model.config, corpus)
    return checkpoint, run_config, corpus


def _default_out(checkpoint_path: str, out: Optional[str]) -> Path:
    return Path(out) if out else Path(checkpoint_path).resolve().parent


# Commands


def cmd_train(args: argparse.Namespace) -> List[Path]:
    """Train one variant; writes checkpoint, training log and resolved config"""
    settings = get_settings()
    run_config = load_run_config(args.config, variant=args.variant, mask_n=args.mask_n, seed=args.seed,
                                 max_steps=args.max_steps, out_dir=args.out)
    # Invalid variant/mask_n fail here, before any data or model is built
    train_config = run_config.to_train_config(prefetch_batches=settings.prefetch_batches)
    out = Path(run_config.out_dir or Path(settings.output_dir) / f"{run_config.variant.value}-s{run_config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    resolved = run_config.write_resolved(out)

    corpus = run_config.build_corpus()
    model = HeadMaskTransformer(run_config.to_model_config(corpus), seed=run_config.seed)
    state = train(model, corpus, train_config)

    meta: Dict[str, Any] = {"step": state.step, "corpus": corpus.name}
    meta.update({f"{RUN_META_PREFIX}{k}": v for k, v in run_config.model_dump().items()})
    save_checkpoint(model, out / CHECKPOINT_DIR, meta)
    log_path = write_training_log(state.history, out / "training_log.csv")

    summary = training_summary(state)
    logger.info("📊 Training summary: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    return [out / CHECKPOINT_DIR, log_path, resolved]


def cmd_importance(args: argparse.Namespace) -> List[Path]:
    """Estimate head importance on a split of the run's corpus"""
    checkpoint, run_config, corpus = _load_model_and_data(args.checkpoint, args.data)
    pairs = corpus.split(args.split)
    if not pairs:
        raise UsageError(f"split {args.split!r} is empty")
    batch_size = run_config.batch_size if run_config else 64
    report = estimate_importance(
        checkpoint.model,
        make_batches(pairs, batch_size, shuffle=False),
        dataset_tag=args.tag or args.split,
        step=int(checkpoint.meta.get("step", 0)),
    )
    out = _default_out(args.checkpoint, args.out)
    outputs = [write_importance_csv(report, out / "importance.csv")]
    if run_config:
        outputs.append(run_config.write_resolved(out))
    return outputs


def cmd_sweep(args: argparse.Namespace) -> List[Path]:
    """Mask importance groups per group or cumulatively and evaluate each point"""
    checkpoint, run_config, corpus = _load_model_and_data(args.checkpoint, args.data)
    report = read_importance_csv(args.importance)
    check_report_matches(report, checkpoint.model.config)
    pairs = corpus.split(args.split)
    jobs = args.jobs or (run_config.jobs if run_config else get_settings().jobs)
    num_groups = args.num_groups or (run_config.num_groups if run_config else 8)
    common = dict(num_groups=num_groups, model_tag=args.tag or "", jobs=jobs, with_bleu=not args.no_bleu)

    modes = ["groups", "ascending", "descending"] if args.mode == "all" else [args.mode]
    results = []
    for mode in modes:
        if mode == "groups":
            results.append(sweep_group_masking(checkpoint.model, report, pairs, **common))
        else:
            results.append(sweep_cumulative(checkpoint.model, report, pairs, SweepOrder(mode), **common))
    total = checkpoint.model.config.total_heads
    for result in results:
        if result.order != SweepOrder.PER_GROUP:
            logger.info(f"📊 {result.order.value} area under curve: {area_under_curve(result, total):.4f}")

    out = _default_out(args.checkpoint, args.out)
    outputs = [write_sweep_csv(results, out / "sweep.csv")]
    if run_config:
        outputs.append(run_config.write_resolved(out))
    return outputs


def cmd_stats(args: argparse.Namespace) -> List[Path]:
    """Importance distribution statistics across models"""
    reports = [read_importance_csv(path) for path in args.importance]
    tags = args.tags.split(",") if args.tags else [Path(p).resolve().parent.name for p in args.importance]
    rows = compare_distributions(reports, tags)
    for row in rows:
        logger.info(f"📊 {row.model_tag}: mean={row.mean:.4g} variance={row.variance:.4g} max={row.max:.4g}")
    out = Path(args.out or get_settings().output_dir)
    return [write_stats_csv(rows, out / "stats.csv"), write_histogram_csv(rows, out / "histogram.csv")]


def cmd_eval(args: argparse.Namespace) -> List[Path]:
    """Evaluate a checkpoint on a split, optionally with heads masked"""
    checkpoint, run_config, corpus = _load_model_and_data(args.checkpoint, args.data)
    flat_ids = _parse_flat_ids(args.mask)
    mask = MaskSet.from_flat_ids(flat_ids, checkpoint.model.config)
    metrics = evaluate(checkpoint.model, corpus.split(args.split), mask)
    print(f"token_accuracy={metrics.token_accuracy:.6f} bleu={metrics.bleu:.4f}")

    out = _default_out(args.checkpoint, args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        writer.writerow([args.split, ";".join(str(i) for i in sorted(set(flat_ids))),
                         format(metrics.token_accuracy, ".9g"), format(metrics.bleu, ".9g")])
    outputs = [path]
    if run_config:
        outputs.append(run_config.write_resolved(out))
    return outputs


def cmd_robustness(args: argparse.Namespace) -> List[Path]:
    """Train the robustness matrix over seeds and check the expected orderings"""
    settings = get_settings()
    seeds = _parse_seeds(args.seeds)
    rows = []
    run_config = None
    for seed in seeds:
        run_config = load_run_config(args.config, task=args.task, seed=seed, max_steps=args.max_steps,
                                     num_groups=args.num_groups, variant=TrainVariant.BASELINE.value)
        base = run_config.to_train_config(prefetch_batches=settings.prefetch_batches)
        corpus = run_config.build_corpus()
        rows += robustness_runs(run_config.to_model_config(corpus), corpus, base, task=run_config.task,
                                num_groups=run_config.num_groups, jobs=args.jobs or run_config.jobs)

    checks = check_orderings(rows)
    for check in checks:
        marker = "✅" if check.holds else "⚠️"
        logger.info(f"{marker} {check.name}: {check.passed}/{check.total} (need {check.required})")

    out = Path(args.out or Path(settings.output_dir) / "robustness")
    return [
        write_robustness_csv(rows, out / "robustness.csv"),
        write_orderings_csv(checks, out / "orderings.csv"),
        run_config.write_resolved(out),
    ]


def cmd_plot(args: argparse.Namespace) -> List[Path]:
    """Render CSV tables as SVG charts"""
    out = Path(args.out or get_settings().output_dir)
    return [plot_csv(path, out) for path in args.csv]


def cmd_heads(args: argparse.Namespace) -> List[Path]:
    """Print the flat id <-> (attention type, layer, head) table"""
    run_config = load_run_config(args.config, layers=args.layers, heads_per_layer=args.heads)
    print("flat_id,attn_type,layer,head")
    for flat in range(run_config.total_heads):
        head = HeadId.from_flat(flat, run_config.layers, run_config.heads_per_layer)
        print(f"{flat},{head.attn_type.value},{head.layer},{head.head}")
    return []


def cmd_gen_data(args: argparse.Namespace) -> List[Path]:
    """Write a generated task corpus as train/dev/test TSV files"""
    run_config = load_run_config(args.config, task=args.task, seed=args.seed)
    if run_config.task == "tsv":
        raise UsageError("gen-data generates reversal or copy corpora")
    out = Path(args.out or Path(get_settings().output_dir) / "data" / f"{run_config.task}-s{run_config.seed}")
    paths = write_tsv_corpus(run_config.build_corpus(), out)
    paths.append(run_config.write_resolved(out))
    return paths


# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headmask", description="Attention-head masking experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a baseline, random-mask or important-mask model")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--variant", choices=["baseline", "random", "impt"])
    p.add_argument("--mask-n", help="heads masked per batch: a count or a percentage such as 25%%")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("importance", help="estimate head importance")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="TSV corpus (default: regenerate the run's corpus)")
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    p.add_argument("--tag")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_importance)

    p = sub.add_parser("sweep", help="mask importance groups and evaluate")
    p.add_argument("checkpoint")
    p.add_argument("importance")
    p.add_argument("--mode", default="groups", choices=["groups", "ascending", "descending", "all"])
    p.add_argument("--data")
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    p.add_argument("--num-groups", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-bleu", action="store_true", help="skip greedy decoding")
    p.add_argument("--tag")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("stats", help="importance distribution statistics")
    p.add_argument("importance", nargs="+")
    p.add_argument("--tags", help="comma-separated model tags (default: parent directory names)")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--mask", default="", help="comma-separated flat head ids to mask")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("robustness", help="train baseline/random/impt at 12.5/25/37.5%% of heads and compare")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--task", choices=["reversal", "copy"])
    p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--num-groups", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_robustness)

    p = sub.add_parser("plot", help="SVG charts from CSV outputs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser("heads", help="list flat head ids")
    p.add_argument("--config")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.set_defaults(handler=cmd_heads)

    p = sub.add_parser("gen-data", help="write a synthetic corpus as TSV")
    p.add_argument("--config")
    p.add_argument("--task", choices=["reversal", "copy"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    args = _build_parser().parse_args(list(argv) if argv is not None else None)
    _configure_logging()
    handler: Callable[[argparse.Namespace], List[Path]] = args.handler
    try:
        outputs = handler(args)
    except HeadMaskError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ invalid configuration: {e}")
        return UsageError.exit_code
    except Exception as e:
        logger.exception(f"❌ {args.command} failed with an internal error: {e}")
        return 1
    _print_outputs(outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
