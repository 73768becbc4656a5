"""Durable context store keyed by resolved CAP identity.

Committed records go to an append-only log (4-byte length prefix + JSON
entry) with an in-memory index rebuilt at startup. Records whose subject
has no binding yet wait in a pending queue and are committed, in enqueue
order, when a matching binding appears. Identical re-deliveries are
absorbed by a content-derived deduplication key.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from . import radius
from .errors import MalformedRecord, UnknownCtxC
from .mdm import PostureState, posture_from_fields
from .model import ContextRecord, SubjectRef, from_rfc3339, to_rfc3339, utcnow

logger = logging.getLogger(__name__)

DEFAULT_PENDING_TTL = 72 * 3600.0
DEFAULT_CONTEXT_TTL = 30 * 86400.0
DEFAULT_QUERY_LIMIT = 500

_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class StoredContext:
    seq: int
    cap_id: str
    record: ContextRecord
    resolved_at: datetime

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "cap_id": self.cap_id,
            "record": self.record.to_dict(),
            "resolved_at": to_rfc3339(self.resolved_at),
        }


@dataclass(frozen=True)
class PendingContext:
    record: ContextRecord
    enqueued_at: datetime


@dataclass(frozen=True)
class IngestResult:
    status: str  # "stored" | "pending" | "duplicate"
    stored: Optional[StoredContext] = None


@dataclass(frozen=True)
class DerivedState:
    cap_id: str
    connectivity: dict
    posture: Optional[PostureState]
    as_of: datetime

    def to_dict(self) -> dict:
        return {
            "cap_id": self.cap_id,
            "connectivity": self.connectivity,
            "posture": self.posture.to_dict() if self.posture else None,
            "as_of": to_rfc3339(self.as_of),
        }


class ContextStore:
    """Single-writer store of attributed contexts plus the pending queue."""

    def __init__(
        self,
        path: Optional[Path] = None,
        resolve: Callable[[SubjectRef, Optional[str]], Optional[str]] = lambda s, src: None,
        ctxc_exists: Callable[[str], bool] = lambda name: True,
        pending_ttl: float = DEFAULT_PENDING_TTL,
        context_ttl: float = DEFAULT_CONTEXT_TTL,
        stale_after: float = radius.DEFAULT_STALE_AFTER,
        on_commit: Optional[Callable[[StoredContext], None]] = None,
    ):
        self._path = Path(path) if path else None
        self._resolve = resolve
        self._ctxc_exists = ctxc_exists
        self._pending_ttl = pending_ttl
        self._context_ttl = context_ttl
        self._stale_after = stale_after
        self.on_commit = on_commit

        self._lock = threading.RLock()
        self._contexts: dict[int, StoredContext] = {}
        self._order: list[int] = []
        self._by_cap: dict[str, list[int]] = {}
        self._stored_keys: dict[str, int] = {}  # dedup key -> seq
        self._pending: list[PendingContext] = []
        self._pending_keys: set[str] = set()
        self._next_seq = 1
        self._evicted_count = 0
        self._log = None

        if self._path is not None:
            self._recover()
            self._log = open(self._path, "ab")

    # -- persistence ---------------------------------------------------------

    def _recover(self) -> None:
        if not self._path.exists():
            return
        data = self._path.read_bytes()
        offset = 0
        evicted: set[int] = set()
        entries: list[dict] = []
        while offset + _LEN.size <= len(data):
            (length,) = _LEN.unpack_from(data, offset)
            start = offset + _LEN.size
            if start + length > len(data):
                logger.warning("truncated tail entry in %s dropped during recovery", self._path)
                break
            try:
                entries.append(json.loads(data[start : start + length]))
            except json.JSONDecodeError:
                logger.warning("corrupt entry in %s dropped during recovery", self._path)
                break
            offset = start + length
        max_seq = 0
        for entry in entries:
            if entry.get("t") == "evict":
                evicted.update(entry.get("ids", []))
            elif entry.get("t") == "ctx":
                max_seq = max(max_seq, entry.get("seq", 0))
                try:
                    stored = StoredContext(
                        seq=entry["seq"],
                        cap_id=entry["cap_id"],
                        record=ContextRecord.from_dict(entry["record"]),
                        resolved_at=from_rfc3339(entry["resolved_at"]),
                    )
                except (KeyError, MalformedRecord) as exc:
                    logger.warning("unreadable context entry skipped: %s", exc)
                    continue
                self._index(stored)
        for seq in evicted:
            self._drop(seq)
        self._next_seq = max_seq + 1

    def _append_log(self, entry: dict) -> None:
        if self._log is None:
            return
        blob = json.dumps(entry, sort_keys=True).encode()
        self._log.write(_LEN.pack(len(blob)) + blob)
        self._log.flush()

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None

    # -- indexing -------------------------------------------------------------

    def _index(self, stored: StoredContext) -> None:
        self._contexts[stored.seq] = stored
        self._order.append(stored.seq)
        self._by_cap.setdefault(stored.cap_id, []).append(stored.seq)
        self._stored_keys[stored.record.dedup_key()] = stored.seq

    def _drop(self, seq: int) -> None:
        stored = self._contexts.pop(seq, None)
        if stored is None:
            return
        self._order.remove(seq)
        self._by_cap.get(stored.cap_id, []).remove(seq)
        self._stored_keys.pop(stored.record.dedup_key(), None)

    def _commit(self, record: ContextRecord, cap_id: str, now: datetime) -> StoredContext:
        stored = StoredContext(seq=self._next_seq, cap_id=cap_id, record=record, resolved_at=now)
        self._next_seq += 1
        self._index(stored)
        self._append_log({"t": "ctx", **stored.to_dict()})
        return stored

    # -- operations -------------------------------------------------------------

    def ingest(self, record: ContextRecord, now: Optional[datetime] = None) -> IngestResult:
        """Attribute a record to a CAP identity, or park it as pending."""
        if not self._ctxc_exists(record.source):
            raise UnknownCtxC(record.source)
        now = now or utcnow()
        key = record.dedup_key()
        committed: Optional[StoredContext] = None
        with self._lock:
            if key in self._stored_keys:
                return IngestResult(status="duplicate", stored=self._contexts.get(self._stored_keys[key]))
            if key in self._pending_keys:
                return IngestResult(status="duplicate")
            cap_id = self._resolve(record.subject, record.source)
            if cap_id is None:
                self._pending.append(PendingContext(record=record, enqueued_at=now))
                self._pending_keys.add(key)
                return IngestResult(status="pending")
            committed = self._commit(record, cap_id, now)
        if self.on_commit:
            self.on_commit(committed)
        return IngestResult(status="stored", stored=committed)

    def flush_pending(self, cap_id: str, now: Optional[datetime] = None) -> int:
        """Commit queued records that now resolve to the given identity."""
        now = now or utcnow()
        committed: list[StoredContext] = []
        with self._lock:
            keep: list[PendingContext] = []
            for pending in self._pending:
                resolved = self._resolve(pending.record.subject, pending.record.source)
                if resolved == cap_id and resolved is not None:
                    self._pending_keys.discard(pending.record.dedup_key())
                    committed.append(self._commit(pending.record, resolved, now))
                else:
                    keep.append(pending)
            self._pending = keep
        if self.on_commit:
            for stored in committed:
                self.on_commit(stored)
        return len(committed)

    def query(
        self,
        cap_id: str,
        types: Optional[Iterable[str]] = None,
        since: Optional[datetime] = None,
        limit: int = DEFAULT_QUERY_LIMIT,
    ) -> list[StoredContext]:
        prefixes = list(types) if types is not None else None
        with self._lock:
            seqs = list(self._by_cap.get(cap_id, []))
            out: list[StoredContext] = []
            for seq in seqs:
                stored = self._contexts[seq]
                if prefixes is not None and not any(
                    stored.record.context_type.startswith(p) for p in prefixes
                ):
                    continue
                if since is not None and stored.record.received_at < since:
                    continue
                out.append(stored)
                if len(out) >= limit:
                    break
            return out

    def derived_state(self, cap_id: str, now: Optional[datetime] = None) -> DerivedState:
        """Recompute connectivity and posture purely from stored contexts."""
        now = now or utcnow()
        traffic = self.query(cap_id, types=["radius.traffic"], limit=10**9)
        sessions = radius.replay_sessions(
            (s.record.observed_at, dict(s.record.payload)) for s in traffic
        )
        connectivity = radius.device_connectivity(sessions.values(), now, self._stale_after)

        posture: Optional[PostureState] = None
        postures = self.query(cap_id, types=["mdm.posture"], limit=10**9)
        if postures:
            latest = max(postures, key=lambda s: (s.record.observed_at, s.seq))
            p = latest.record.payload
            posture = posture_from_fields(
                p.get("jail_broken"),
                p.get("lost_mode_state"),
                p.get("compliance_state"),
                p.get("os_version"),
            )
        return DerivedState(cap_id=cap_id, connectivity=connectivity, posture=posture, as_of=now)

    def retention_sweep(self, now: Optional[datetime] = None) -> dict:
        now = now or utcnow()
        with self._lock:
            pending_cutoff = now - timedelta(seconds=self._pending_ttl)
            keep_pending = []
            pending_evicted = 0
            for pending in self._pending:
                if pending.enqueued_at < pending_cutoff:
                    self._pending_keys.discard(pending.record.dedup_key())
                    pending_evicted += 1
                else:
                    keep_pending.append(pending)
            self._pending = keep_pending

            context_cutoff = now - timedelta(seconds=self._context_ttl)
            evict_ids = [
                seq
                for seq in self._order
                if self._contexts[seq].record.received_at < context_cutoff
            ]
            for seq in evict_ids:
                self._drop(seq)
            if evict_ids:
                self._append_log({"t": "evict", "ids": evict_ids})
            self._evicted_count += pending_evicted + len(evict_ids)
        if pending_evicted or evict_ids:
            logger.info(
                "retention sweep evicted %d pending, %d stored", pending_evicted, len(evict_ids)
            )
        return {"pending_evicted": pending_evicted, "contexts_evicted": len(evict_ids)}

    # -- introspection (harness and tests) ----------------------------------------

    def pending_contexts(self) -> list[PendingContext]:
        with self._lock:
            return list(self._pending)

    def stored_count(self) -> int:
        with self._lock:
            return len(self._order)

    def evicted_count(self) -> int:
        with self._lock:
            return self._evicted_count

    def all_stored(self) -> list[StoredContext]:
        with self._lock:
            return [self._contexts[seq] for seq in self._order]
