"""
Analysis harness
Evaluation metrics (teacher-forced token accuracy and greedy-decode BLEU),
head-masking sweeps over importance groups, and importance distribution
statistics, with CSV readers/writers for each table
"""

import csv
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sacrebleu.metrics import BLEU

from service.errors import DataError, ParseError, UsageError
from service.importance import ImportanceReport, distribution_stats, partition_groups
from service.model import HeadMaskTransformer, MaskSet
from service.tasks import Pair
from service.translate import greedy_decode, token_accuracy_counts

logger = logging.getLogger(__name__)

SWEEP_HEADER = ["order_tag", "row", "n_masked", "masked_heads", "token_accuracy", "bleu"]
STATS_HEADER = ["model_tag", "mean", "variance", "max"]
HISTOGRAM_HEADER = ["model_tag", "bin_low", "bin_high", "count"]

MAX_NGRAM = 4
HISTOGRAM_BINS = 20
ROBUSTNESS_FRACTIONS = (0.125, 0.25, 0.375)


# Metrics


@dataclass
class EvalMetrics:
    token_accuracy: float
    bleu: Optional[float]
    num_sentences: int


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]):
    """Clipped n-gram matches, hypothesis n-gram totals and both corpus lengths"""
    if len(hypotheses) != len(references):
        raise UsageError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    correct = [0] * MAX_NGRAM
    total = [0] * MAX_NGRAM
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        sys_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_NGRAM + 1):
            hyp_counts = _ngrams(hyp, n)
            correct[n - 1] += sum((hyp_counts & _ngrams(ref, n)).values())
            total[n - 1] += sum(hyp_counts.values())
    return correct, total, sys_len, ref_len


def corpus_bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """
    Corpus BLEU-4 with brevity penalty over id sequences

    Orders 2-4 with no matching n-gram get one added to both their match
    and total counts. Empty hypotheses score 0.
    """
    correct, total, sys_len, ref_len = bleu_statistics(hypotheses, references)
    if sys_len == 0 or correct[0] == 0:
        return 0.0
    for n in range(1, MAX_NGRAM):
        if correct[n] == 0:
            correct[n] += 1
            total[n] += 1
    score = BLEU.compute_bleu(correct, total, sys_len, ref_len, smooth_method="none",
                              max_ngram_order=MAX_NGRAM)
    return float(min(100.0, max(0.0, score.score)))


def evaluate(
    model: HeadMaskTransformer,
    pairs: Sequence[Pair],
    mask: Optional[MaskSet] = None,
    batch_size: int = 64,
    with_bleu: bool = True,
) -> EvalMetrics:
    """
    Token accuracy and (optionally) greedy-decode BLEU on ``pairs``

    Args:
        model: Trained model
        pairs: Non-empty evaluation split
        mask: Heads closed for this evaluation
        batch_size: Sentences per forward pass
        with_bleu: Skip decoding when False

    Returns:
        EvalMetrics
    """
    if not pairs:
        raise UsageError("cannot evaluate on an empty split")
    correct, total = token_accuracy_counts(model, pairs, mask, batch_size)
    bleu = None
    if with_bleu:
        hypotheses = greedy_decode(model, [src for src, _ in pairs], mask, batch_size)
        bleu = corpus_bleu(hypotheses, [tgt for _, tgt in pairs])
    return EvalMetrics(correct / total if total else 0.0, bleu, len(pairs))


# Sweeps


class SweepOrder(str, Enum):
    PER_GROUP = "groups"
    ASCENDING = "ascending"
    DESCENDING = "descending"


@dataclass
class SweepRow:
    row: int
    masked_heads: List[int]
    token_accuracy: float
    bleu: Optional[float]

    @property
    def n_masked(self) -> int:
        return len(self.masked_heads)

    def metric(self, name: str = "token_accuracy") -> float:
        value = getattr(self, name)
        if value is None:
            raise UsageError(f"sweep row {self.row} has no {name}")
        return value


@dataclass
class SweepResult:
    order: SweepOrder
    model_tag: str = ""
    rows: List[SweepRow] = field(default_factory=list)

    def values(self, metric: str = "token_accuracy") -> List[float]:
        return [r.metric(metric) for r in self.rows]


def _evaluate_points(
    model: HeadMaskTransformer,
    dev: Sequence[Pair],
    masks: Sequence[MaskSet],
    jobs: int,
    batch_size: int,
    with_bleu: bool,
) -> List[EvalMetrics]:
    if not dev:
        raise UsageError("sweeps need a non-empty evaluation split")
    if jobs <= 1:
        return [evaluate(model, dev, m, batch_size, with_bleu) for m in masks]
    # Parameters are only read; each evaluation builds its own gates
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(evaluate, model, dev, m, batch_size, with_bleu) for m in masks]
        return [f.result() for f in futures]


def _sweep(model, dev, head_sets, order, model_tag, jobs, batch_size, with_bleu) -> SweepResult:
    flat = model.config.flat_index
    masks = [MaskSet.from_heads(heads) for heads in head_sets]
    metrics = _evaluate_points(model, dev, masks, jobs, batch_size, with_bleu)
    rows = [SweepRow(i, sorted(flat(h) for h in heads), m.token_accuracy, m.bleu)
            for i, (heads, m) in enumerate(zip(head_sets, metrics))]
    result = SweepResult(order=order, model_tag=model_tag, rows=rows)
    logger.info(f"📊 {order.value} sweep: " + ", ".join(f"{r.n_masked}->{r.token_accuracy:.3f}" for r in rows))
    return result


def sweep_group_masking(
    model: HeadMaskTransformer,
    report: ImportanceReport,
    dev: Sequence[Pair],
    num_groups: int = 8,
    model_tag: str = "",
    jobs: int = 1,
    batch_size: int = 64,
    with_bleu: bool = True,
) -> SweepResult:
    """Unmasked row, then one row per importance group with only that group masked"""
    groups = partition_groups(report, num_groups)
    head_sets = [[]] + [list(g) for g in groups.groups]
    return _sweep(model, dev, head_sets, SweepOrder.PER_GROUP, model_tag, jobs, batch_size, with_bleu)


def sweep_cumulative(
    model: HeadMaskTransformer,
    report: ImportanceReport,
    dev: Sequence[Pair],
    order: SweepOrder,
    num_groups: int = 8,
    model_tag: str = "",
    jobs: int = 1,
    batch_size: int = 64,
    with_bleu: bool = True,
) -> SweepResult:
    """
    Mask importance groups cumulatively until every head is masked

    Descending starts from the most important group, Ascending from the
    least important one. Row 0 is the unmasked model.
    """
    if order == SweepOrder.PER_GROUP:
        raise UsageError("sweep_cumulative needs ascending or descending order")
    groups = partition_groups(report, num_groups).groups
    if order == SweepOrder.ASCENDING:
        groups = groups[::-1]
    head_sets, masked = [[]], []
    for group in groups:
        masked = masked + list(group)
        head_sets.append(masked)
    return _sweep(model, dev, head_sets, order, model_tag, jobs, batch_size, with_bleu)


def area_under_curve(result: SweepResult, total_heads: int, metric: str = "token_accuracy") -> float:
    """Trapezoid area under metric vs. fraction of heads masked"""
    if total_heads < 1:
        raise UsageError("total_heads must be positive")
    x = np.array([r.n_masked / total_heads for r in result.rows], dtype=np.float64)
    y = np.array(result.values(metric), dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def metric_drops(result: SweepResult, metric: str = "token_accuracy") -> List[float]:
    """Row 0 metric minus each row's metric"""
    values = result.values(metric)
    return [values[0] - v for v in values]


def robustness_mask_counts(total_heads: int) -> List[int]:
    """Heads masked in training for the 12.5/25/37.5% robustness runs, rounded up"""
    return [math.ceil(round(f * total_heads, 9)) for f in ROBUSTNESS_FRACTIONS]


# Distributions


@dataclass
class DistributionRow:
    model_tag: str
    mean: float
    variance: float
    max: float
    histogram: List[Tuple[float, float, int]]


def compare_distributions(
    reports: Sequence[ImportanceReport],
    tags: Optional[Sequence[str]] = None,
    bins: int = HISTOGRAM_BINS,
) -> List[DistributionRow]:
    """
    Mean, population variance, max and a histogram per report

    Histograms share ``bins`` equal-width bins over the pooled score range.
    """
    if not reports:
        raise UsageError("compare_distributions needs at least one report")
    tags = list(tags) if tags is not None else [r.dataset_tag or f"model{i}" for i, r in enumerate(reports)]
    if len(tags) != len(reports):
        raise UsageError(f"{len(tags)} tags for {len(reports)} reports")

    pooled = np.concatenate([r.as_array() for r in reports])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    rows = []
    for tag, report in zip(tags, reports):
        mean, variance = distribution_stats(report)
        counts, _ = np.histogram(report.as_array(), bins=edges)
        histogram = [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
        rows.append(DistributionRow(tag, mean, variance, float(report.as_array().max()), histogram))
    return rows


# Files


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else format(value, ".9g")


def _writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    f = path.open("w", newline="", encoding="utf-8")
    return f, csv.writer(f, lineterminator="\n")


def write_sweep_csv(results: Sequence[SweepResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    f, writer = _writer(path)
    with f:
        writer.writerow(SWEEP_HEADER)
        for result in results:
            for r in result.rows:
                writer.writerow([result.order.value, r.row, r.n_masked, ";".join(map(str, r.masked_heads)),
                                 _fmt(r.token_accuracy), _fmt(r.bleu)])
    return path


def write_stats_csv(rows: Sequence[DistributionRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    f, writer = _writer(path)
    with f:
        writer.writerow(STATS_HEADER)
        for r in rows:
            writer.writerow([r.model_tag, _fmt(r.mean), _fmt(r.variance), _fmt(r.max)])
    return path


def write_histogram_csv(rows: Sequence[DistributionRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    f, writer = _writer(path)
    with f:
        writer.writerow(HISTOGRAM_HEADER)
        for r in rows:
            for low, high, count in r.histogram:
                writer.writerow([r.model_tag, _fmt(low), _fmt(high), count])
    return path


def read_csv_table(path: Union[str, Path], header: Sequence[str]) -> List[Dict[str, str]]:
    """Rows of a CSV whose first line must equal ``header``"""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            first = next(reader, None)
            if first != list(header):
                raise ParseError(f"{path.name}: header must be {','.join(header)}", line_number=1)
            return [dict(zip(header, row)) for row in reader if row]
    except FileNotFoundError as e:
        raise DataError(f"file not found: {path}") from e


def read_sweep_csv(path: Union[str, Path], model_tag: str = "") -> List[SweepResult]:
    """Sweep results grouped by order tag, in file order"""
    results: Dict[str, SweepResult] = {}
    for number, row in enumerate(read_csv_table(path, SWEEP_HEADER), start=2):
        try:
            order = SweepOrder(row["order_tag"])
            masked = [int(i) for i in row["masked_heads"].split(";") if i]
            sweep_row = SweepRow(int(row["row"]), masked, float(row["token_accuracy"]),
                                 float(row["bleu"]) if row["bleu"] else None)
        except ValueError as e:
            raise ParseError(f"{Path(path).name}: {e}", line_number=number) from e
        results.setdefault(order.value, SweepResult(order, model_tag)).rows.append(sweep_row)
    return list(results.values())
