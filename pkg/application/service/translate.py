"""
Greedy Translation Service
Decodes source sentences with a trained HeadMask transformer, optionally
with some heads closed, and scores teacher-forced next-token accuracy
"""

import logging
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from service.model import HeadMaskTransformer, MaskSet
from service.tasks import BOS_ID, EOS_ID, PAD_ID, Pair, ParallelCorpus, Sentence, collate

logger = logging.getLogger(__name__)


def _iter_chunks(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def token_accuracy_counts(
    model: HeadMaskTransformer,
    pairs: Sequence[Pair],
    mask: Optional[MaskSet] = None,
    batch_size: int = 64,
) -> Tuple[int, int]:
    """(correct, total) teacher-forced next-token predictions over non-pad positions"""
    correct = total = 0
    for chunk in _iter_chunks(pairs, batch_size):
        batch = collate(chunk)
        out = model.forward(batch, mask)
        predicted = out.logits.data.argmax(axis=-1)
        real = batch.tgt_out != PAD_ID
        correct += int(((predicted == batch.tgt_out) & real).sum())
        total += int(real.sum())
    return correct, total


def token_accuracy(
    model: HeadMaskTransformer,
    pairs: Sequence[Pair],
    mask: Optional[MaskSet] = None,
    batch_size: int = 64,
) -> float:
    """Fraction of non-pad target positions whose argmax is the gold token"""
    correct, total = token_accuracy_counts(model, pairs, mask, batch_size)
    return correct / total if total else 0.0


def greedy_decode(
    model: HeadMaskTransformer,
    sources: Sequence[Sentence],
    mask: Optional[MaskSet] = None,
    batch_size: int = 64,
) -> List[List[int]]:
    """One-off greedy decode without keeping service statistics"""
    return TranslationService(model, batch_size).translate_ids(sources, mask)


class TranslationService:
    """
    Greedy decoding over a frozen model
    Each call builds its own gates, so one service may be shared by
    concurrent sweep workers
    """

    def __init__(self, model: HeadMaskTransformer, batch_size: int = 64, max_decode_len: Optional[int] = None):
        """
        Initialize the translation service

        Args:
            model: Trained model
            batch_size: Sentences decoded together
            max_decode_len: Cap on generated tokens (default: the model's max_len - 1)
        """
        self.model = model
        self.batch_size = batch_size
        self.max_decode_len = max_decode_len or model.config.max_len - 1

        # Translation statistics
        self.stats = {
            "total_translations": 0,
            "generated_tokens": 0,
            "average_latency_ms": 0.0,
        }

    def _decode_batch(self, sources: Sequence[Sentence], mask: Optional[MaskSet]) -> List[List[int]]:
        batch = collate([(src, ()) for src in sources])
        gates = self.model.make_gates(mask)
        memory = self.model.encode(batch.src_ids, batch.src_mask, gates)

        size = batch.size
        generated = np.full((size, 1), BOS_ID, dtype=np.int64)
        finished = np.zeros(size, dtype=bool)
        for _ in range(self.max_decode_len):
            tgt_mask = np.ones(generated.shape, dtype=bool)
            logits = self.model.decode(generated, tgt_mask, memory, batch.src_mask, gates)
            next_ids = logits.data[:, -1, :].argmax(axis=-1)
            next_ids = np.where(finished, PAD_ID, next_ids)
            generated = np.concatenate([generated, next_ids[:, None]], axis=1)
            finished |= next_ids == EOS_ID
            if finished.all():
                break

        hypotheses = []
        for row in generated[:, 1:]:
            tokens = []
            for token in row:
                if token in (EOS_ID, PAD_ID):
                    break
                tokens.append(int(token))
            hypotheses.append(tokens)
        return hypotheses

    def translate_ids(self, sources: Sequence[Sentence], mask: Optional[MaskSet] = None) -> List[List[int]]:
        """
        Greedy-decode source id sequences

        Args:
            sources: Source sentences as id tuples
            mask: Heads closed while decoding

        Returns:
            Target id lists without bos/eos
        """
        started = time.perf_counter()
        hypotheses: List[List[int]] = []
        for chunk in _iter_chunks(list(sources), self.batch_size):
            hypotheses.extend(self._decode_batch(chunk, mask))

        latency_ms = (time.perf_counter() - started) * 1000.0
        count = self.stats["total_translations"]
        self.stats["total_translations"] = count + len(sources)
        self.stats["generated_tokens"] += sum(len(h) for h in hypotheses)
        if sources:
            per_sentence = latency_ms / len(sources)
            self.stats["average_latency_ms"] = (
                (self.stats["average_latency_ms"] * count + per_sentence * len(sources)) / (count + len(sources))
            )
        return hypotheses

    def translate_text(self, text: str, corpus: ParallelCorpus, mask: Optional[MaskSet] = None) -> str:
        """Translate one whitespace-tokenised sentence using the corpus vocabularies"""
        source = corpus.src_vocab.encode(text.split())
        if not source:
            logger.warning("⚠️ Empty text provided for translation")
            return ""
        hypothesis = self.translate_ids([source], mask)[0]
        return " ".join(corpus.tgt_vocab.decode(hypothesis))

    def get_statistics(self) -> Dict[str, Any]:
        """Get translation statistics"""
        return {
            "stats": self.stats.copy(),
            "settings": {
                "batch_size": self.batch_size,
                "max_decode_len": self.max_decode_len,
            },
        }

    def reset_statistics(self) -> None:
        """Reset translation statistics"""
        self.stats = {
            "total_translations": 0,
            "generated_tokens": 0,
            "average_latency_ms": 0.0,
        }
        logger.info("Translation statistics reset")
