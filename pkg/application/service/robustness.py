"""
Robustness experiments
Trains the baseline plus random- and important-head-masked variants at
12.5/25/37.5% of the heads, measures every model's importance distribution
and masking curves, and checks the orderings expected between them
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from service.analysis import (
    SweepOrder,
    area_under_curve,
    metric_drops,
    read_csv_table,
    robustness_mask_counts,
    sweep_cumulative,
    sweep_group_masking,
)
from service.errors import ParseError, UsageError
from service.importance import distribution_stats, estimate_importance
from service.model import HeadMaskTransformer, ModelConfig
from service.tasks import ParallelCorpus, make_batches
from service.training import TrainConfig, TrainVariant, train

logger = logging.getLogger(__name__)

ROBUSTNESS_HEADER = [
    "task", "seed", "variant", "mask_n", "dev_token_accuracy", "importance_mean", "importance_variance",
    "drop_top_group", "drop_bottom_group", "auc_descending", "auc_ascending", "mean_step_seconds",
]
ORDERINGS_HEADER = ["check", "passed", "total", "required", "holds"]


@dataclass
class RobustnessRow:
    """One trained model of the matrix and what was measured on it"""

    task: str
    seed: int
    variant: TrainVariant
    mask_n: int
    dev_token_accuracy: float
    importance_mean: float
    importance_variance: float
    drop_top_group: float
    drop_bottom_group: float
    auc_descending: float
    auc_ascending: float
    mean_step_seconds: float

    @property
    def tag(self) -> str:
        if self.variant == TrainVariant.BASELINE:
            return self.variant.value
        return f"{self.variant.value}-{self.mask_n}"


@dataclass
class OrderingCheck:
    """How many model comparisons satisfied one expected ordering"""

    name: str
    passed: int
    total: int
    required: int

    @property
    def holds(self) -> bool:
        return self.total > 0 and self.passed >= self.required


def measure_model(
    model: HeadMaskTransformer,
    corpus: ParallelCorpus,
    variant: TrainVariant,
    mask_n: int,
    seed: int,
    task: str = "",
    mean_step_seconds: float = 0.0,
    num_groups: int = 8,
    jobs: int = 1,
    batch_size: int = 64,
) -> RobustnessRow:
    """
    Dev-split importance, group drops and cumulative-curve areas of a trained model

    Returns:
        RobustnessRow
    """
    dev = corpus.dev
    if not dev:
        raise UsageError("robustness measurements need a non-empty dev split")
    report = estimate_importance(model, make_batches(dev, batch_size, shuffle=False), dataset_tag="dev")
    common = dict(num_groups=num_groups, jobs=jobs, batch_size=batch_size, with_bleu=False)
    groups = sweep_group_masking(model, report, dev, **common)
    descending = sweep_cumulative(model, report, dev, SweepOrder.DESCENDING, **common)
    ascending = sweep_cumulative(model, report, dev, SweepOrder.ASCENDING, **common)
    drops = metric_drops(groups)
    mean, variance = distribution_stats(report)
    total = model.config.total_heads
    return RobustnessRow(
        task=task,
        seed=seed,
        variant=variant,
        mask_n=mask_n,
        dev_token_accuracy=groups.rows[0].token_accuracy,
        importance_mean=mean,
        importance_variance=variance,
        drop_top_group=drops[1],
        drop_bottom_group=drops[-1],
        auc_descending=area_under_curve(descending, total),
        auc_ascending=area_under_curve(ascending, total),
        mean_step_seconds=mean_step_seconds,
    )


def robustness_runs(
    model_config: ModelConfig,
    corpus: ParallelCorpus,
    base: TrainConfig,
    task: str = "",
    num_groups: int = 8,
    jobs: int = 1,
) -> List[RobustnessRow]:
    """
    Train and measure the baseline and both masked variants at every robustness count

    All models share ``base`` (seed included) and differ only in variant
    and mask_n, so one call covers one seed of the matrix.

    Returns:
        Rows in training order: baseline, then random/impt per mask count
    """
    counts = list(dict.fromkeys(robustness_mask_counts(model_config.total_heads)))
    cells = [(TrainVariant.BASELINE, 0)]
    cells += [(variant, n) for n in counts for variant in (TrainVariant.RANDOM, TrainVariant.IMPT)]

    rows = []
    for variant, mask_n in cells:
        cfg = base.model_copy(update={"variant": variant, "mask_n": mask_n})
        model = HeadMaskTransformer(model_config, seed=cfg.seed)
        state = train(model, corpus, cfg)
        seconds = float(np.mean(state.step_seconds)) if state.step_seconds else 0.0
        row = measure_model(model, corpus, variant, mask_n, cfg.seed, task=task, mean_step_seconds=seconds,
                            num_groups=num_groups, jobs=jobs, batch_size=cfg.batch_size)
        logger.info(f"📊 {task or 'corpus'} seed {cfg.seed} {row.tag}: acc={row.dev_token_accuracy:.4f} "
                    f"variance={row.importance_variance:.4g} auc_desc={row.auc_descending:.4f}")
        rows.append(row)
    return rows


def _two_thirds(total: int) -> int:
    return math.ceil(2 * total / 3)


def check_orderings(rows: Sequence[RobustnessRow]) -> List[OrderingCheck]:
    """
    Count how often each expected ordering holds across tasks, seeds and mask counts

    Baseline orderings must hold for every seed; the comparisons between
    variants need two thirds of their cases.
    """
    baselines: Dict[Tuple[str, int], RobustnessRow] = {
        (r.task, r.seed): r for r in rows if r.variant == TrainVariant.BASELINE}
    cells = {(r.task, r.seed, r.variant, r.mask_n): r for r in rows}

    top_over_bottom = [b.drop_top_group > b.drop_bottom_group for b in baselines.values()]
    ascending_over_descending = [b.auc_ascending >= b.auc_descending for b in baselines.values()]
    variance_order, random_over_baseline = [], []
    for (task, seed, variant, mask_n), row in cells.items():
        base = baselines.get((task, seed))
        if variant != TrainVariant.RANDOM or base is None:
            continue
        random_over_baseline.append(row.auc_descending > base.auc_descending)
        impt = cells.get((task, seed, TrainVariant.IMPT, mask_n))
        if impt is not None:
            variance_order.append(impt.importance_variance < row.importance_variance < base.importance_variance)

    return [
        OrderingCheck("top_group_drop_exceeds_bottom_group", sum(top_over_bottom), len(top_over_bottom),
                      len(top_over_bottom)),
        OrderingCheck("ascending_auc_at_least_descending_auc", sum(ascending_over_descending),
                      len(ascending_over_descending), len(ascending_over_descending)),
        OrderingCheck("variance_impt_below_random_below_baseline", sum(variance_order), len(variance_order),
                      _two_thirds(len(variance_order))),
        OrderingCheck("random_descending_auc_above_baseline", sum(random_over_baseline), len(random_over_baseline),
                      _two_thirds(len(random_over_baseline))),
    ]


# Files


def _fmt(value: float) -> str:
    return format(value, ".9g")


def write_robustness_csv(rows: Sequence[RobustnessRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROBUSTNESS_HEADER)
        for r in rows:
            writer.writerow([r.task, r.seed, r.variant.value, r.mask_n, _fmt(r.dev_token_accuracy),
                             _fmt(r.importance_mean), _fmt(r.importance_variance), _fmt(r.drop_top_group),
                             _fmt(r.drop_bottom_group), _fmt(r.auc_descending), _fmt(r.auc_ascending),
                             _fmt(r.mean_step_seconds)])
    return path


def read_robustness_csv(path: Union[str, Path]) -> List[RobustnessRow]:
    rows = []
    for number, row in enumerate(read_csv_table(path, ROBUSTNESS_HEADER), start=2):
        try:
            rows.append(RobustnessRow(
                task=row["task"],
                seed=int(row["seed"]),
                variant=TrainVariant(row["variant"]),
                mask_n=int(row["mask_n"]),
                **{key: float(row[key]) for key in ROBUSTNESS_HEADER[4:]},
            ))
        except ValueError as e:
            raise ParseError(f"{Path(path).name}: {e}", line_number=number) from e
    return rows


def write_orderings_csv(checks: Sequence[OrderingCheck], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ORDERINGS_HEADER)
        for c in checks:
            writer.writerow([c.name, c.passed, c.total, c.required, str(c.holds).lower()])
    return path
