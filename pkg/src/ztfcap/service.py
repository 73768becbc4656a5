"""The CAP service facade.

Wires registries, the linking service, the context store, the consent
registry and the webhook dispatcher into one object the HTTP layer and
the harness drive. Holds the RADIUS correlation state (MAC address to
certificate subject, per source) and the per-session accounting state.
"""

from __future__ import annotations

import logging
import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

from cryptography import x509

from . import consent as consent_mod
from . import radius
from .consent import ConsentRegistry, covers, domain_allowed, effective_prefixes
from .errors import AuthFailed, ConsentDenied, UnknownCtxC, UnknownRp
from .linking import Binding, LinkingService
from .model import (
    ContextRecord,
    LocalIdRef,
    SubjectRef,
    utcnow,
    validate_cap_id,
    validate_ctxc_name,
)
from .store import ContextStore, DerivedState, IngestResult, StoredContext
from .webhooks import DEFAULT_RETRY_SCHEDULE, WebhookDispatcher

logger = logging.getLogger(__name__)


class AuditLog:
    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[dict] = []

    def append(self, event: dict) -> None:
        with self._lock:
            self._events.append({"at": utcnow().isoformat(), **event})

    def snapshot(self) -> list[dict]:
        with self._lock:
            return list(self._events)


@dataclass
class CapIdEntry:
    cap_id: str
    device_token: str


@dataclass
class CtxCEntry:
    name: str
    token: str


@dataclass
class RpEntry:
    rp_id: str
    token: str
    webhook_url: Optional[str] = None


@dataclass
class CapConfig:
    data_dir: Optional[Path] = None
    admin_token: str = ""
    issuer_name: str = "ztf-cap"
    token_ttl: int = 3600
    challenge_ttl: int = 120
    pending_ttl: float = 72 * 3600.0
    context_ttl: float = 30 * 86400.0
    stale_after: float = radius.DEFAULT_STALE_AFTER
    webhook_retry_schedule: Sequence[float] = DEFAULT_RETRY_SCHEDULE
    webhook_queue_max: int = 1000


class CapService:
    def __init__(self, config: Optional[CapConfig] = None):
        self.config = config or CapConfig()
        if not self.config.admin_token:
            self.config.admin_token = secrets.token_urlsafe(32)
        self.audit = AuditLog()

        self._reg_lock = threading.Lock()
        self._cap_ids: dict[str, CapIdEntry] = {}
        self._ctxcs: dict[str, CtxCEntry] = {}
        self._rps: dict[str, RpEntry] = {}

        self.linking = LinkingService(
            cap_exists=self.cap_id_exists,
            ctxc_exists=self.ctxc_exists,
            issuer_name=self.config.issuer_name,
            token_ttl=self.config.token_ttl,
            challenge_ttl=self.config.challenge_ttl,
            on_new_binding=self._on_new_binding,
            audit=self.audit.append,
        )

        log_path = None
        if self.config.data_dir is not None:
            Path(self.config.data_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(self.config.data_dir) / "contexts.log"
        self.store = ContextStore(
            path=log_path,
            resolve=self.linking.resolve_subject,
            ctxc_exists=self.ctxc_exists,
            pending_ttl=self.config.pending_ttl,
            context_ttl=self.config.context_ttl,
            stale_after=self.config.stale_after,
            on_commit=self._on_commit,
        )

        self.consents = ConsentRegistry(
            cap_exists=self.cap_id_exists,
            rp_exists=self.rp_exists,
            audit=self.audit.append,
        )

        self.webhooks = WebhookDispatcher(
            eligible_rps=self._eligible_rps,
            retry_schedule=self.config.webhook_retry_schedule,
            queue_max=self.config.webhook_queue_max,
            audit=self.audit.append,
        )
        self.webhooks.start()

        # RADIUS correlation state: per source, MAC -> cert subject from
        # the latest accepted auth; per (source, session) accounting state.
        self._radius_lock = threading.Lock()
        self._mac_subjects: dict[tuple[str, str], SubjectRef] = {}
        self._sessions: dict[tuple[str, str], radius.SessionState] = {}

    def close(self) -> None:
        self.webhooks.stop(drain=True)
        self.store.close()

    # -- registries ---------------------------------------------------------

    def cap_id_exists(self, cap_id: str) -> bool:
        with self._reg_lock:
            return cap_id in self._cap_ids

    def ctxc_exists(self, name: str) -> bool:
        with self._reg_lock:
            return name in self._ctxcs

    def rp_exists(self, rp_id: str) -> bool:
        with self._reg_lock:
            return rp_id in self._rps

    def register_cap_id(self, cap_id: str) -> CapIdEntry:
        validate_cap_id(cap_id)
        with self._reg_lock:
            if cap_id in self._cap_ids:
                return self._cap_ids[cap_id]
            entry = CapIdEntry(cap_id=cap_id, device_token=secrets.token_urlsafe(32))
            self._cap_ids[cap_id] = entry
        self.audit.append({"event": "cap_id_registered", "cap_id": cap_id})
        return entry

    def register_ctxc(self, name: str) -> CtxCEntry:
        validate_ctxc_name(name)
        with self._reg_lock:
            if name in self._ctxcs:
                return self._ctxcs[name]
            entry = CtxCEntry(name=name, token=secrets.token_urlsafe(32))
            self._ctxcs[name] = entry
        self.audit.append({"event": "ctxc_registered", "ctxc": name})
        return entry

    def register_rp(self, rp_id: str, webhook_url: Optional[str] = None) -> RpEntry:
        with self._reg_lock:
            existing = self._rps.get(rp_id)
            if existing is not None:
                existing.webhook_url = webhook_url or existing.webhook_url
                return existing
            entry = RpEntry(rp_id=rp_id, token=secrets.token_urlsafe(32), webhook_url=webhook_url)
            self._rps[rp_id] = entry
        self.audit.append({"event": "rp_registered", "rp_id": rp_id})
        return entry

    def list_cap_ids(self) -> list[str]:
        with self._reg_lock:
            return sorted(self._cap_ids)

    def list_ctxcs(self) -> list[str]:
        with self._reg_lock:
            return sorted(self._ctxcs)

    def list_rps(self) -> list[RpEntry]:
        with self._reg_lock:
            return list(self._rps.values())

    # -- authentication ---------------------------------------------------------

    def authenticate_admin(self, token: str) -> None:
        if not secrets.compare_digest(token or "", self.config.admin_token):
            raise AuthFailed("bad admin token")

    def authenticate_ctxc(self, token: str) -> str:
        with self._reg_lock:
            for entry in self._ctxcs.values():
                if secrets.compare_digest(token or "", entry.token):
                    return entry.name
        raise AuthFailed("unknown CtxC token")

    def authenticate_rp(self, token: str) -> str:
        with self._reg_lock:
            for entry in self._rps.values():
                if secrets.compare_digest(token or "", entry.token):
                    return entry.rp_id
        raise AuthFailed("unknown RP token")

    def authenticate_device(self, token: str) -> str:
        with self._reg_lock:
            for entry in self._cap_ids.values():
                if secrets.compare_digest(token or "", entry.device_token):
                    return entry.cap_id
        raise AuthFailed("unknown device token")

    # -- wiring callbacks ---------------------------------------------------------

    def _on_new_binding(self, binding: Binding) -> None:
        flushed = self.store.flush_pending(binding.cap_id)
        if flushed:
            logger.info("binding for %s flushed %d pending contexts", binding.cap_id, flushed)

    def _on_commit(self, stored: StoredContext) -> None:
        self.webhooks.notify(stored)

    def _eligible_rps(self, stored: StoredContext) -> list[tuple[str, str]]:
        targets = []
        for entry in self.list_rps():
            if not entry.webhook_url:
                continue
            consent = self.consents.get(stored.cap_id, entry.rp_id)
            if consent is not None and covers(consent.prefixes, stored.record.context_type):
                targets.append((entry.rp_id, entry.webhook_url))
        return targets

    # -- ingestion ---------------------------------------------------------

    def ingest_context(self, record: ContextRecord, authenticated_source: str) -> IngestResult:
        if record.source != authenticated_source:
            raise AuthFailed(
                f"token for {authenticated_source!r} cannot submit contexts for {record.source!r}"
            )
        return self.store.ingest(record)

    def ingest_detail_text(self, source: str, text: str) -> dict:
        """Run a RADIUS detail-file batch through parsing and ingestion."""
        if not self.ctxc_exists(source):
            raise UnknownCtxC(source)
        records, warnings = radius.parse_detail_stream(text)
        received = utcnow()
        stored = pending = duplicate = 0
        contexts: list[ContextRecord] = []
        with self._radius_lock:
            for rec in records:
                if isinstance(rec, radius.RadiusAuthRecord):
                    if rec.result != "accept":
                        continue
                    ctx = radius.auth_to_context(rec, source, received_at=received)
                    if rec.calling_station_id:
                        self._mac_subjects[(source, rec.calling_station_id)] = ctx.subject
                    contexts.append(ctx)
                else:
                    subject = self._mac_subjects.get((source, rec.calling_station_id))
                    if subject is None:
                        subject = LocalIdRef(
                            ctxc=source,
                            local_id=rec.calling_station_id or f"session:{rec.acct_session_id}",
                        )
                    key = (source, rec.acct_session_id)
                    state, events = radius.apply_acct(
                        self._sessions.get(key), rec, subject=subject, ctxc=source, received_at=received
                    )
                    self._sessions[key] = state
                    contexts.extend(events)
        for ctx in contexts:
            result = self.store.ingest(ctx)
            if result.status == "stored":
                stored += 1
            elif result.status == "pending":
                pending += 1
            else:
                duplicate += 1
        return {
            "records": len(records),
            "warnings": [w.reason for w in warnings],
            "stored": stored,
            "pending": pending,
            "duplicate": duplicate,
        }

    # -- RP-facing provision ---------------------------------------------------------

    def rp_get_contexts(
        self,
        rp_id: str,
        cap_id: str,
        types: Optional[Iterable[str]] = None,
        since: Optional[datetime] = None,
        limit: int = 500,
        now: Optional[datetime] = None,
    ) -> tuple[list[StoredContext], dict]:
        """Consent-filtered context query plus restricted derived state."""
        now = now or utcnow()
        consent = self.consents.get(cap_id, rp_id, now=now)
        if consent is None:
            raise ConsentDenied(f"no active consent for {rp_id} on {cap_id}")
        requested = list(types) if types is not None else None
        eff = effective_prefixes(consent.prefixes, requested)

        records: list[StoredContext] = []
        if eff:
            records = self.store.query(cap_id, types=sorted(eff), since=since, limit=limit)
        for stored in records:
            self.audit.append(
                {
                    "event": "context_released",
                    "via": "query",
                    "rp_id": rp_id,
                    "cap_id": cap_id,
                    "context_type": stored.record.context_type,
                    "sequence": stored.seq,
                }
            )

        derived = self.store.derived_state(cap_id, now=now)
        state: dict = {"cap_id": cap_id, "as_of": derived.to_dict()["as_of"]}
        if domain_allowed(eff, "radius."):
            state["connectivity"] = derived.connectivity
        if domain_allowed(eff, "mdm.") and derived.posture is not None:
            state["posture"] = derived.posture.to_dict()
        return records, state
