"""
Training loops
Baseline training, random head masking (a fresh random set of heads closed
for each batch) and important-head masking (the currently most important
heads of each batch closed), all sharing one Adam optimizer and the
inverse-square-root warmup schedule
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil
from pydantic import BaseModel, Field

from service.batch_queue import prefetch
from service.errors import ContractError, NumericError, UsageError
from service.importance import ImportanceReport, gate_gradients, top_n_heads
from service.model import HeadId, HeadMaskTransformer, MaskSet
from service.tasks import Batch, ParallelCorpus, make_batches
from service.tensor import RngStreams, Tape, Tensor
from service.translate import token_accuracy

logger = logging.getLogger(__name__)

TRAINING_LOG_HEADER = ["step", "variant", "loss", "lr", "dev_metric", "masked_heads"]


class TrainVariant(str, Enum):
    """Which heads, if any, are closed for each training batch"""
    BASELINE = "baseline"
    RANDOM = "random"
    IMPT = "impt"


class TrainConfig(BaseModel):
    """Optimizer, schedule and masking settings of one run"""

    variant: TrainVariant = TrainVariant.BASELINE
    mask_n: int = Field(default=0, ge=0)
    max_steps: int = Field(default=3000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    warmup_steps: int = Field(default=400, ge=1)
    lr_factor: float = Field(default=1.0, ge=0.0)
    lr_override: Optional[float] = Field(default=None, ge=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-9, gt=0.0)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    eval_every: int = Field(default=250, ge=0)
    log_every: int = Field(default=100, ge=1)
    dev_eval_limit: Optional[int] = Field(default=500, ge=1)
    prefetch_batches: int = Field(default=2, ge=0)
    seed: int = Field(default=1, ge=0)

    @property
    def effective_mask_n(self) -> int:
        return 0 if self.variant == TrainVariant.BASELINE else self.mask_n


def lr_schedule(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """
    factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)

    Rises linearly for ``warmup`` steps, then decays with the inverse
    square root of the step.
    """
    if step < 1:
        raise UsageError(f"learning-rate step must be >= 1, got {step}")
    if warmup < 1:
        raise UsageError(f"warmup must be >= 1, got {warmup}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class AdamOptimizer:
    """Adam with bias-corrected moments; the learning rate is passed per step"""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float, step: Optional[int] = None) -> None:
        """
        Apply one update from the gradients currently stored on the parameters

        Raises:
            NumericError: A gradient is not finite
        """
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for {p.name}", step=step)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype)


@dataclass
class TrainLogRow:
    """One line of the training log"""
    step: int
    variant: str
    loss: float
    lr: float
    dev_metric: Optional[float] = None
    masked_heads: List[int] = field(default_factory=list)


@dataclass
class TrainState:
    """Mutable state of a run"""
    step: int
    optimizer: AdamOptimizer
    streams: RngStreams
    running_loss: float = 0.0
    history: List[TrainLogRow] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list)
    last_mask: List[int] = field(default_factory=list)
    last_report: Optional[ImportanceReport] = None
    importance_passes: int = 0
    dev_metric: Optional[float] = None
    best_dev_metric: Optional[float] = None


# Head selection


def sample_random_mask(heads: Sequence[HeadId], n: int, rng: np.random.Generator) -> MaskSet:
    """Close ``n`` heads drawn uniformly without replacement from the global pool"""
    if not 0 <= n <= len(heads):
        raise UsageError(f"cannot mask {n} of {len(heads)} heads")
    picked = rng.choice(len(heads), size=n, replace=False)
    return MaskSet.from_heads(heads[int(i)] for i in picked)


def batch_importance(
    model: HeadMaskTransformer,
    batch: Batch,
    label_smoothing: float,
    dropout_rng: Optional[np.random.Generator],
    step: int = 0,
) -> ImportanceReport:
    """Importance from one train-mode pass over ``batch``; parameters are not updated"""
    grads, _ = gate_gradients(model, batch, None, label_smoothing, train_mode=True, dropout_rng=dropout_rng)
    heads = model.config.all_heads()
    scores = [float(np.abs(grads[h]).mean()) for h in heads]
    return ImportanceReport.from_array(scores, model.config.layers, model.config.heads_per_layer,
                                       num_samples=batch.size, dataset_tag="train-batch", step=step)


# Loops

MaskChooser = Callable[[TrainState, Batch], MaskSet]


def _check_mask_n(model: HeadMaskTransformer, cfg: TrainConfig) -> None:
    total = model.config.total_heads
    if not 0 <= cfg.effective_mask_n <= total:
        raise UsageError(f"mask_n={cfg.mask_n} outside [0, {total}]")


def _dev_metric(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig) -> Optional[float]:
    dev = data.dev[:cfg.dev_eval_limit] if cfg.dev_eval_limit else data.dev
    if not dev:
        return None
    return token_accuracy(model, dev, batch_size=cfg.batch_size)


def _run(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig, choose_mask: MaskChooser) -> TrainState:
    _check_mask_n(model, cfg)
    if not data.train:
        raise UsageError("training split is empty")

    streams = RngStreams(cfg.seed)
    optimizer = AdamOptimizer(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = TrainState(step=0, optimizer=optimizer, streams=streams)
    batches = prefetch(make_batches(data.train, cfg.batch_size, seed=cfg.seed, epochs=None), cfg.prefetch_batches)
    flat = model.config.flat_index
    window: List[float] = []

    logger.info(f"🔄 Training {cfg.variant.value} (mask_n={cfg.effective_mask_n}) for {cfg.max_steps} steps")
    started = time.perf_counter()
    try:
        for batch in batches:
            step = state.step + 1
            step_started = time.perf_counter()

            mask = choose_mask(state, batch)
            if mask.count_masked() != cfg.effective_mask_n:
                raise ContractError(f"step {step}: {mask.count_masked()} heads masked, expected {cfg.effective_mask_n}")

            lr = cfg.lr_override if cfg.lr_override is not None else lr_schedule(
                step, model.config.d_model, cfg.warmup_steps, cfg.lr_factor)
            with Tape() as tape:
                out = model.forward(batch, mask, train_mode=True, dropout_rng=streams.dropout(step),
                                    label_smoothing=cfg.label_smoothing)
            loss = out.loss.item()
            if not math.isfinite(loss):
                raise NumericError(f"loss is {loss}", step=step)
            tape.backward(out.loss)
            optimizer.step(lr, step=step)
            model.zero_grad()

            state.step = step
            state.last_mask = [flat(h) for h in mask.masked_heads()]
            state.last_mask.sort()
            state.step_seconds.append(time.perf_counter() - step_started)
            window.append(loss)
            state.running_loss = loss if step == 1 else 0.98 * state.running_loss + 0.02 * loss

            evaluate_now = (cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.max_steps
            if evaluate_now:
                state.dev_metric = _dev_metric(model, data, cfg)
                if state.dev_metric is not None and (state.best_dev_metric is None
                                                     or state.dev_metric > state.best_dev_metric):
                    state.best_dev_metric = state.dev_metric
            if evaluate_now or step % cfg.log_every == 0:
                state.history.append(TrainLogRow(step, cfg.variant.value, float(np.mean(window)), lr,
                                                 state.dev_metric if evaluate_now else None, list(state.last_mask)))
                window = []
                dev = f" dev_acc={state.dev_metric:.4f}" if evaluate_now and state.dev_metric is not None else ""
                logger.info(f"📊 step {step}: loss={state.history[-1].loss:.4f} lr={lr:.3e}{dev}")

            if step >= cfg.max_steps:
                break
    finally:
        if hasattr(batches, "stop"):
            batches.stop()

    elapsed = time.perf_counter() - started
    logger.info(f"✅ Training finished: {state.step} steps in {elapsed:.1f}s")
    return state


def _require_variant(cfg: TrainConfig, variant: TrainVariant) -> None:
    if cfg.variant != variant:
        raise UsageError(f"expected variant {variant.value}, got {cfg.variant.value}")


def train_baseline(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig) -> TrainState:
    """Standard training with every head open"""
    _require_variant(cfg, TrainVariant.BASELINE)
    return _run(model, data, cfg, lambda state, batch: MaskSet())


def train_random_mask(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig) -> TrainState:
    """
    Close ``mask_n`` heads sampled afresh for every batch

    Heads come from the pool of all heads of all attention types and layers.
    Sampling uses the dedicated mask stream, so dropout masks are the same
    as in a baseline run with the same seed.
    """
    _require_variant(cfg, TrainVariant.RANDOM)
    heads = model.config.all_heads()

    def choose(state: TrainState, batch: Batch) -> MaskSet:
        return sample_random_mask(heads, cfg.mask_n, state.streams.mask)

    return _run(model, data, cfg, choose)


def train_importance_mask(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig) -> TrainState:
    """
    Close the ``mask_n`` currently most important heads of every batch

    Each step runs two passes over the batch with identical dropout masks:
    the first measures importance from gate gradients and leaves parameters
    and optimizer state untouched, the second trains with the top heads
    closed.
    """
    _require_variant(cfg, TrainVariant.IMPT)

    def choose(state: TrainState, batch: Batch) -> MaskSet:
        step = state.step + 1
        before = model.checksum()
        updates_before = state.optimizer.step_count
        report = batch_importance(model, batch, cfg.label_smoothing, state.streams.dropout(step), step=step)
        if model.checksum() != before or state.optimizer.step_count != updates_before:
            raise ContractError(f"step {step}: importance pass modified parameters")
        state.last_report = report
        state.importance_passes += 1
        return MaskSet.from_heads(top_n_heads(report, cfg.mask_n))

    return _run(model, data, cfg, choose)


def train(model: HeadMaskTransformer, data: ParallelCorpus, cfg: TrainConfig) -> TrainState:
    """Dispatch on ``cfg.variant``"""
    runners = {
        TrainVariant.BASELINE: train_baseline,
        TrainVariant.RANDOM: train_random_mask,
        TrainVariant.IMPT: train_importance_mask,
    }
    return runners[cfg.variant](model, data, cfg)


# Outputs


def write_training_log(history: Sequence[TrainLogRow], path: Union[str, Path]) -> Path:
    """Write the training log CSV; masked heads are semicolon-joined flat ids"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAINING_LOG_HEADER)
        for row in history:
            writer.writerow([
                row.step,
                row.variant,
                format(row.loss, ".9g"),
                format(row.lr, ".9g"),
                "" if row.dev_metric is None else format(row.dev_metric, ".9g"),
                ";".join(str(i) for i in row.masked_heads),
            ])
    return path


def training_summary(state: TrainState) -> Dict[str, Any]:
    """Run statistics plus process memory/CPU usage"""
    process = psutil.Process()
    seconds = state.step_seconds
    return {
        "steps": state.step,
        "optimizer_steps": state.optimizer.step_count,
        "final_loss": state.history[-1].loss if state.history else None,
        "running_loss": state.running_loss,
        "dev_metric": state.dev_metric,
        "best_dev_metric": state.best_dev_metric,
        "importance_passes": state.importance_passes,
        "mean_step_seconds": float(np.mean(seconds)) if seconds else 0.0,
        "total_seconds": float(np.sum(seconds)),
        "rss_mb": process.memory_info().rss / (1024 * 1024),
        "cpu_percent": process.cpu_percent(interval=None),
    }
