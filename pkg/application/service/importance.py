"""
Head importance estimation
Importance of a head is the expected absolute sensitivity of the loss to
its gate: I_h = mean over examples x of |dL(x)/d gate_h|, with the gate
evaluated at 1. The gate gradient equals the contraction of the head's
output with the gradient flowing into it.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from service import keyvalue
from service.errors import DataError, ParseError, UsageError
from service.model import AttentionType, HeadId, HeadMaskTransformer, MaskSet, ModelConfig
from service.tasks import Batch
from service.tensor import Tape, mul_scalar

logger = logging.getLogger(__name__)

IMPORTANCE_HEADER = ["flat_id", "attn_type", "layer", "head", "importance"]


@dataclass
class ImportanceReport:
    """Per-head importance scores and where they came from"""

    scores: Dict[HeadId, float]
    layers: int
    heads_per_layer: int
    num_samples: int = 0
    dataset_tag: str = ""
    step: int = 0

    def __post_init__(self):
        expected = 3 * self.layers * self.heads_per_layer
        flats = sorted(self.flat_index(h) for h in self.scores)
        if flats != list(range(expected)):
            raise UsageError(f"importance scores must cover all {expected} heads exactly once")
        negative = [str(h) for h, s in self.scores.items() if not s >= 0]
        if negative:
            raise UsageError(f"importance must be non-negative, got negatives for {', '.join(negative)}")

    @classmethod
    def from_array(cls, values: Sequence[float], layers: int, heads_per_layer: int, **kwargs) -> "ImportanceReport":
        """Build a report from scores listed in flat-id order"""
        heads = [HeadId.from_flat(i, layers, heads_per_layer) for i in range(len(values))]
        return cls({h: float(v) for h, v in zip(heads, values)}, layers, heads_per_layer, **kwargs)

    @property
    def total_heads(self) -> int:
        return len(self.scores)

    def flat_index(self, head: HeadId) -> int:
        return head.flat_index(self.layers, self.heads_per_layer)

    def heads(self) -> List[HeadId]:
        return sorted(self.scores, key=self.flat_index)

    def as_array(self) -> np.ndarray:
        """Scores in flat-id order"""
        return np.array([self.scores[h] for h in self.heads()], dtype=np.float64)

    def ranked(self) -> List[HeadId]:
        """Heads by descending importance, ties by ascending flat id"""
        return sorted(self.scores, key=lambda h: (-self.scores[h], self.flat_index(h)))


@dataclass
class HeadGroups:
    """Heads split into importance groups; group 0 is the most important"""

    groups: List[List[HeadId]]
    group_size: int

    def __len__(self) -> int:
        return len(self.groups)

    def all_heads(self) -> List[HeadId]:
        return [h for group in self.groups for h in group]


@dataclass
class _Accumulator:
    totals: np.ndarray
    samples: int = 0
    batches: int = 0
    loss_total: float = 0.0


def gate_gradients(
    model: HeadMaskTransformer,
    batch: Batch,
    mask_context: Optional[MaskSet] = None,
    label_smoothing: float = 0.0,
    train_mode: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
    loss_scale: float = 1.0,
) -> Tuple[Dict[HeadId, np.ndarray], float]:
    """
    Per-example gate gradients dL(x)/d gate_h for one batch

    Every example gets its own gate per head and the losses are summed
    over sentences, so the gradient of each example's gate is that
    example's own sensitivity. Parameter gradients are cleared afterwards.

    Returns:
        (map head -> gradient array shaped [batch], summed loss value)
    """
    with Tape() as tape:
        out = model.forward(batch, mask_context, train_mode=train_mode, dropout_rng=dropout_rng,
                            label_smoothing=label_smoothing, per_example_gates=True, reduction="sentence")
        loss = mul_scalar(out.loss, loss_scale) if loss_scale != 1.0 else out.loss
    tape.backward(loss)
    grads = {h: (g.grad if g.grad is not None else np.zeros(g.shape, dtype=g.dtype)).astype(np.float64)
             for h, g in out.gates.items()}
    model.zero_grad()
    return grads, loss.item()


def contraction_scores(
    model: HeadMaskTransformer,
    batch: Batch,
    mask_context: Optional[MaskSet] = None,
    label_smoothing: float = 0.0,
) -> Dict[HeadId, np.ndarray]:
    """
    Explicit per-example contraction sum(Att_h(x) * dL(x)/dAtt_h(x))

    Reads the gradient at each head's ungated output. At gate 1 this equals
    ``gate_gradients``; for a closed head the incoming gradient is zero.
    """
    with Tape() as tape:
        out = model.forward(batch, mask_context, label_smoothing=label_smoothing, per_example_gates=True,
                            reduction="sentence", keep_head_outputs=True)
    tape.backward(out.loss)
    scores = {}
    for head, att in out.head_outputs.items():
        grad = att.grad if att.grad is not None else np.zeros(att.shape, dtype=att.dtype)
        scores[head] = (att.data.astype(np.float64) * grad).sum(axis=(1, 2))
    model.zero_grad()
    return scores


def estimate_importance(
    model: HeadMaskTransformer,
    batches: Iterable[Batch],
    mask_context: Optional[MaskSet] = None,
    label_smoothing: float = 0.0,
    loss_scale: float = 1.0,
    dataset_tag: str = "",
    step: int = 0,
) -> ImportanceReport:
    """
    Estimate I_h for every head over ``batches``

    Args:
        model: Model in eval mode (no dropout)
        batches: Examples backing the expectation
        mask_context: Heads held closed while measuring; their importance is
            reported as computed (the gradient of a zeroed branch)
        label_smoothing: Smoothing of the measured loss
        loss_scale: Constant multiplying the loss
        dataset_tag: Label stored on the report
        step: Training step stored on the report

    Returns:
        ImportanceReport
    """
    heads = model.config.all_heads()
    acc = _Accumulator(totals=np.zeros(len(heads), dtype=np.float64))
    for batch in batches:
        grads, loss = gate_gradients(model, batch, mask_context, label_smoothing, loss_scale=loss_scale)
        # |.| per example before averaging
        acc.totals += np.array([np.abs(grads[h]).sum() for h in heads])
        acc.samples += batch.size
        acc.batches += 1
        acc.loss_total += loss
    if acc.batches == 0:
        raise UsageError("estimate_importance needs at least one batch")

    report = ImportanceReport.from_array(
        acc.totals / acc.samples, model.config.layers, model.config.heads_per_layer,
        num_samples=acc.samples, dataset_tag=dataset_tag, step=step,
    )
    mean, variance = distribution_stats(report)
    logger.info(f"📊 Importance over {acc.samples} examples ({acc.batches} batches, "
                f"loss/example={acc.loss_total / acc.samples:.4f}): "
                f"mean={mean:.4g} variance={variance:.4g}")
    return report


def partition_groups(report: ImportanceReport, num_groups: int = 8) -> HeadGroups:
    """
    Split heads into ``num_groups`` contiguous chunks of the importance ranking

    Earlier groups take the remainder when the head count is not divisible.
    """
    if num_groups < 1:
        raise UsageError(f"num_groups must be >= 1, got {num_groups}")
    if num_groups > report.total_heads:
        raise UsageError(f"num_groups={num_groups} exceeds {report.total_heads} heads")
    ranked = report.ranked()
    base, extra = divmod(len(ranked), num_groups)
    groups, start = [], 0
    for index in range(num_groups):
        size = base + (1 if index < extra else 0)
        groups.append(ranked[start:start + size])
        start += size
    return HeadGroups(groups=groups, group_size=base)


def distribution_stats(report: ImportanceReport) -> Tuple[float, float]:
    """Arithmetic mean and population variance of the scores"""
    values = report.as_array()
    if values.size == 0:
        raise UsageError("empty importance report")
    return float(values.mean()), float(values.var())


def top_n_heads(report: ImportanceReport, n: int) -> List[HeadId]:
    """The ``n`` most important heads, ties by ascending flat id"""
    if not 0 <= n <= report.total_heads:
        raise UsageError(f"n={n} outside [0, {report.total_heads}]")
    return report.ranked()[:n]


def resolve_mask_count(mask_n: Union[int, str], total_heads: int) -> int:
    """
    Turn an absolute count or a percentage such as "12.5%" into a head count

    Percentages round up, so 12.5% of 24 heads is 3.
    """
    if isinstance(mask_n, str):
        text = mask_n.strip()
        if text.endswith("%"):
            try:
                fraction = float(text[:-1]) / 100.0
            except ValueError as e:
                raise UsageError(f"bad mask percentage {mask_n!r}") from e
            count = math.ceil(round(fraction * total_heads, 9))
        else:
            try:
                count = int(text)
            except ValueError as e:
                raise UsageError(f"mask_n must be an integer or a percentage, got {mask_n!r}") from e
    else:
        count = int(mask_n)
    if not 0 <= count <= total_heads:
        raise UsageError(f"mask_n={mask_n} resolves to {count}, outside [0, {total_heads}]")
    return count


# Files


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta")


def write_importance_csv(report: ImportanceReport, path: Union[str, Path]) -> Path:
    """Write importance.csv plus a key=value sidecar holding the report metadata"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(IMPORTANCE_HEADER)
        for head in report.heads():
            writer.writerow([report.flat_index(head), head.attn_type.value, head.layer, head.head,
                             format(report.scores[head], ".9g")])
    keyvalue.write_file(_meta_path(path), {
        "layers": report.layers,
        "heads_per_layer": report.heads_per_layer,
        "num_samples": report.num_samples,
        "dataset_tag": report.dataset_tag,
        "step": report.step,
    })
    return path


def read_importance_csv(path: Union[str, Path]) -> ImportanceReport:
    """
    Read a file written by ``write_importance_csv``

    The sidecar is optional; without it the layout is inferred from the rows.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as e:
        raise DataError(f"importance file not found: {path}") from e
    if not rows or rows[0] != IMPORTANCE_HEADER:
        raise ParseError(f"{path.name}: header must be {','.join(IMPORTANCE_HEADER)}", line_number=1)

    parsed = []
    for number, row in enumerate(rows[1:], start=2):
        try:
            flat, attn_type, layer, head, score = row
            parsed.append((int(flat), HeadId(AttentionType(attn_type), int(layer), int(head)), float(score)))
        except ValueError as e:
            raise ParseError(f"{path.name}: {e}", line_number=number) from e
    if not parsed:
        raise DataError(f"{path} lists no heads")

    meta = keyvalue.read_file(_meta_path(path)) if _meta_path(path).exists() else {}
    layers = int(meta.get("layers", max(h.layer for _, h, _ in parsed) + 1))
    heads_per_layer = int(meta.get("heads_per_layer", max(h.head for _, h, _ in parsed) + 1))
    for flat, head, _ in parsed:
        if head.flat_index(layers, heads_per_layer) != flat:
            raise DataError(f"{path}: flat id {flat} does not match {head}")
    return ImportanceReport(
        scores={head: score for _, head, score in parsed},
        layers=layers,
        heads_per_layer=heads_per_layer,
        num_samples=int(meta.get("num_samples", 0)),
        dataset_tag=meta.get("dataset_tag", ""),
        step=int(meta.get("step", 0)),
    )


def check_report_matches(report: ImportanceReport, config: ModelConfig) -> None:
    """Raise DataError when a report was computed for a different head layout"""
    if (report.layers, report.heads_per_layer) != (config.layers, config.heads_per_layer):
        raise DataError(f"importance report is for {report.layers}x{report.heads_per_layer} heads, "
                        f"model has {config.layers}x{config.heads_per_layer}")
