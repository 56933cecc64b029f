"""
Batch Prefetch Queue
Prepares training batches on a background thread while the training loop
runs; batches are delivered in exactly the order the source yields them
"""

import logging
import queue
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, Optional

from service.tasks import Batch

logger = logging.getLogger(__name__)


class PrefetchStatus(Enum):
    """State of the producer thread"""
    IDLE = "idle"
    RUNNING = "running"
    EXHAUSTED = "exhausted"
    STOPPED = "stopped"
    FAILED = "failed"


@dataclass
class _Failure:
    error: BaseException


_END = object()


class BatchPrefetcher:
    """FIFO queue filled by one producer thread"""

    def __init__(self, source: Iterable[Batch], max_queue_size: int = 4):
        """
        Initialize the prefetcher

        Args:
            source: Batch iterator to drain (may be infinite)
            max_queue_size: Batches prepared ahead of the consumer
        """
        if max_queue_size < 1:
            raise ValueError(f"max_queue_size must be >= 1, got {max_queue_size}")
        self.source = iter(source)
        self.max_queue_size = max_queue_size
        self.batch_queue: "queue.Queue[Any]" = queue.Queue(maxsize=max_queue_size)

        self.status = PrefetchStatus.IDLE
        self.producer_thread: Optional[threading.Thread] = None
        self._stop_event = threading.Event()

        # Statistics
        self.stats = {
            'produced_batches': 0,
            'consumed_batches': 0,
            'queue_size': 0,
        }
        self._stats_lock = threading.Lock()

    def start(self) -> "BatchPrefetcher":
        """Start the producer thread"""
        if self.status == PrefetchStatus.RUNNING:
            logger.warning("⚠️ Batch prefetcher already running")
            return self
        self.status = PrefetchStatus.RUNNING
        self.producer_thread = threading.Thread(target=self._produce, daemon=True)
        self.producer_thread.start()
        logger.debug(f"🔄 Batch prefetcher started (queue size {self.max_queue_size})")
        return self

    def stop(self) -> None:
        """Stop the producer and drop queued batches"""
        self._stop_event.set()
        while True:
            try:
                self.batch_queue.get_nowait()
            except queue.Empty:
                break
        if self.producer_thread and self.producer_thread.is_alive():
            self.producer_thread.join(timeout=2.0)
        if self.status == PrefetchStatus.RUNNING:
            self.status = PrefetchStatus.STOPPED

    def _put(self, item: Any) -> bool:
        while not self._stop_event.is_set():
            try:
                self.batch_queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for batch in self.source:
                if not self._put(batch):
                    return
                with self._stats_lock:
                    self.stats['produced_batches'] += 1
            self._put(_END)
        except Exception as e:
            logger.error(f"❌ Batch preparation failed: {e}")
            self._put(_Failure(e))

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self.status == PrefetchStatus.IDLE:
            self.start()
        if self.status != PrefetchStatus.RUNNING:
            raise StopIteration
        item = self.batch_queue.get()
        if item is _END:
            self.status = PrefetchStatus.EXHAUSTED
            raise StopIteration
        if isinstance(item, _Failure):
            self.status = PrefetchStatus.FAILED
            raise item.error
        with self._stats_lock:
            self.stats['consumed_batches'] += 1
        return item

    def __enter__(self) -> "BatchPrefetcher":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()

    def get_statistics(self) -> Dict[str, Any]:
        """Get prefetch statistics"""
        with self._stats_lock:
            stats = self.stats.copy()
        stats['queue_size'] = self.batch_queue.qsize()
        stats['status'] = self.status.value
        return stats


def prefetch(source: Iterable[Batch], depth: int) -> Iterable[Batch]:
    """Wrap ``source`` in a prefetcher when ``depth`` > 0"""
    return BatchPrefetcher(source, depth) if depth > 0 else source
