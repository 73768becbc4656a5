"""Detail-file forwarder: tails a RADIUS detail file and ships batches.

Only blank-line-terminated records are shipped; a partial trailing
record stays in the buffer until its terminator arrives. Delivery is
at-least-once: a batch is retried with backoff until the CAP accepts it.
"""

from __future__ import annotations

import logging
import threading
import time
from pathlib import Path
from typing import Optional

import httpx

logger = logging.getLogger(__name__)


class RadiusForwarder:
    def __init__(
        self,
        path: Path,
        endpoint: str,
        ctxc_name: str,
        token: str,
        poll_interval: float = 0.2,
        retry_backoff: float = 0.5,
    ):
        self.path = Path(path)
        self.endpoint = endpoint.rstrip("/")
        self.ctxc_name = ctxc_name
        self.token = token
        self.poll_interval = poll_interval
        self.retry_backoff = retry_backoff
        self._offset = 0
        self._buffer = ""
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.batches_sent = 0

    def _read_new(self) -> str:
        if not self.path.exists():
            return ""
        data = self.path.read_bytes()
        if len(data) <= self._offset:
            return ""
        new = data[self._offset :]
        self._offset = len(data)
        return new.decode("utf-8", errors="replace")

    def _complete_batch(self) -> str:
        # Ship everything up to and including the last record terminator.
        cut = self._buffer.rfind("\n\n")
        if cut == -1:
            return ""
        batch = self._buffer[: cut + 2]
        self._buffer = self._buffer[cut + 2 :]
        return batch

    def _send(self, batch: str) -> None:
        delay = self.retry_backoff
        while not self._stop.is_set():
            try:
                resp = httpx.post(
                    f"{self.endpoint}/ingest/radius",
                    content=batch.encode(),
                    headers={
                        "Authorization": f"Bearer {self.token}",
                        "X-CtxC-Name": self.ctxc_name,
                    },
                    timeout=10.0,
                )
                if resp.status_code < 300:
                    self.batches_sent += 1
                    return
                logger.warning("ingest endpoint returned HTTP %d, retrying", resp.status_code)
            except httpx.HTTPError as exc:
                logger.warning("ingest endpoint unreachable (%s), retrying", exc)
            self._stop.wait(delay)
            delay = min(delay * 2, 10.0)

    def pump_once(self) -> bool:
        """One tail-and-ship cycle; returns True when a batch was sent."""
        self._buffer += self._read_new()
        batch = self._complete_batch()
        if batch:
            self._send(batch)
            return True
        return False

    def _run(self) -> None:
        while not self._stop.is_set():
            self.pump_once()
            self._stop.wait(self.poll_interval)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="radius-forwarder", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
