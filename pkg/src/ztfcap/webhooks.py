"""At-least-once webhook push of newly committed contexts.

Delivery eligibility (which RPs, under which consent) is decided at
commit time; the actual HTTP POSTs happen on a background worker with a
bounded queue, so a slow or dead receiver never blocks ingestion.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import httpx

from .model import to_rfc3339
from .store import StoredContext

logger = logging.getLogger(__name__)

DEFAULT_RETRY_SCHEDULE = (1.0, 5.0, 25.0)
DEFAULT_QUEUE_MAX = 1000


@dataclass(frozen=True)
class Delivery:
    rp_id: str
    url: str
    body: dict


class WebhookDispatcher:
    def __init__(
        self,
        eligible_rps: Callable[[StoredContext], list[tuple[str, str]]],
        retry_schedule: Sequence[float] = DEFAULT_RETRY_SCHEDULE,
        queue_max: int = DEFAULT_QUEUE_MAX,
        audit: Optional[Callable[[dict], None]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._eligible_rps = eligible_rps
        self._schedule = list(retry_schedule)
        self._queue_max = queue_max
        self._audit = audit or (lambda event: None)
        self._sleep = sleep
        self._queue: deque[Delivery] = deque()
        self._cv = threading.Condition()
        self._stop = False
        self._thread: Optional[threading.Thread] = None

    def notify(self, stored: StoredContext) -> int:
        """Queue deliveries for every RP whose consent covers this record."""
        body = {
            "cap_id": stored.cap_id,
            "context_type": stored.record.context_type,
            "payload": dict(stored.record.payload),
            "sequence": stored.seq,
            "observed_at": to_rfc3339(stored.record.observed_at),
        }
        targets = self._eligible_rps(stored)
        with self._cv:
            for rp_id, url in targets:
                if len(self._queue) >= self._queue_max:
                    dropped = self._queue.popleft()
                    logger.warning(
                        "webhook queue full, dropping oldest delivery to %s", dropped.rp_id
                    )
                self._queue.append(Delivery(rp_id=rp_id, url=url, body=body))
            self._cv.notify()
        return len(targets)

    def _deliver(self, delivery: Delivery) -> None:
        for attempt, delay in enumerate(self._schedule, start=1):
            try:
                resp = httpx.post(delivery.url, json=delivery.body, timeout=10.0)
                if resp.status_code < 300:
                    self._audit(
                        {
                            "event": "context_released",
                            "via": "webhook",
                            "rp_id": delivery.rp_id,
                            "cap_id": delivery.body["cap_id"],
                            "context_type": delivery.body["context_type"],
                            "sequence": delivery.body["sequence"],
                        }
                    )
                    return
                reason = f"HTTP {resp.status_code}"
            except httpx.HTTPError as exc:
                reason = str(exc)
            if attempt < len(self._schedule):
                self._sleep(delay)
            else:
                logger.warning(
                    "webhook delivery to %s abandoned after %d attempts: %s",
                    delivery.rp_id,
                    attempt,
                    reason,
                )

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._stop:
                    self._cv.wait(timeout=0.5)
                if self._stop and not self._queue:
                    return
                delivery = self._queue.popleft()
            self._deliver(delivery)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="webhook-dispatcher", daemon=True)
        self._thread.start()

    def stop(self, drain: bool = True) -> None:
        with self._cv:
            if not drain:
                self._queue.clear()
            self._stop = True
            self._cv.notify_all()
        if self._thread:
            self._thread.join(timeout=30)

    def pending(self) -> int:
        with self._cv:
            return len(self._queue)
