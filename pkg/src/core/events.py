"""
Engine-wide publish/subscribe notifications.

The inspection pipeline, the trainer, the threshold tuners and the corpus
generator publish progress here without knowing who listens. Benchmark
workers publish from several threads at once, so subscription changes and
the subscriber snapshot taken by publish() are guarded by a lock; callbacks
themselves run outside it, on the publishing thread.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum, auto
from typing import Any, Callable, Dict, Iterator, List, Optional

from utils.logging_config import get_logger

Callback = Callable[['Event'], None]


class EventType(Enum):
    # Inspection; data is the stage name, StageResult and InspectionReport
    STAGE_STARTED = auto()
    STAGE_COMPLETED = auto()
    PLATE_INSPECTED = auto()

    # Training; data is the EpochStats row
    EPOCH_COMPLETED = auto()

    # Threshold tuning; data is one metrics row
    CANDIDATE_EVALUATED = auto()

    # Corpus generation; data is {"corpus", "count", ...}
    SAMPLE_GENERATED = auto()


@dataclass
class Event:
    event_type: EventType
    data: Any = None
    source: Optional[str] = None


class EventBus:
    """Process-wide singleton dispatcher."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._subscribers: Dict[EventType, List[Callback]] = {}
            cls._instance._lock = threading.Lock()
            cls._instance.logger = get_logger(__name__)
        return cls._instance

    def subscribe(self, event_type: EventType, callback: Callback) -> None:
        with self._lock:
            self._subscribers.setdefault(event_type, []).append(callback)

    def unsubscribe(self, event_type: EventType, callback: Callback) -> None:
        """Remove one registration of callback; unknown callbacks are ignored."""
        with self._lock:
            callbacks = self._subscribers.get(event_type, [])
            if callback in callbacks:
                callbacks.remove(callback)

    @contextmanager
    def subscribed(self, event_type: EventType, callback: Callback) -> Iterator[None]:
        """Keep callback registered for the duration of a with-block."""
        self.subscribe(event_type, callback)
        try:
            yield
        finally:
            self.unsubscribe(event_type, callback)

    def subscriber_count(self, event_type: EventType) -> int:
        with self._lock:
            return len(self._subscribers.get(event_type, []))

    def publish(self, event: Event) -> None:
        """Deliver to every subscriber; a failing callback never stops the publisher."""
        with self._lock:
            callbacks = list(self._subscribers.get(event.event_type, []))
        for callback in callbacks:
            try:
                callback(event)
            except Exception as e:
                self.logger.error(f"Event callback failed for {event.event_type.name} "
                                  f"from {event.source or 'unknown'}: {e}", exc_info=True)

    def snapshot(self) -> Dict[EventType, List[Callback]]:
        with self._lock:
            return {k: list(v) for k, v in self._subscribers.items()}

    def restore(self, snapshot: Dict[EventType, List[Callback]]) -> None:
        """Replace every subscription with a previous snapshot()."""
        with self._lock:
            self._subscribers = {k: list(v) for k, v in snapshot.items()}


event_bus = EventBus()
