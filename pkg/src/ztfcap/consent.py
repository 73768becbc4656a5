"""User consent registry gating what each relying party may read.

Consent is a set of context-type prefixes per (cap_id, rp_id) pair.
Queries see the intersection of what they asked for and what was
consented; with no consent on file, everything is denied.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Iterable, Optional

from .errors import EmptyPrefixSet, NoSuchConsent, UnknownCapId, UnknownRp
from .model import to_rfc3339, utcnow


@dataclass(frozen=True)
class Consent:
    cap_id: str
    rp_id: str
    prefixes: frozenset[str]
    granted_at: datetime
    expires_at: Optional[datetime] = None

    def active(self, now: datetime) -> bool:
        return self.expires_at is None or now < self.expires_at

    def to_dict(self) -> dict:
        return {
            "cap_id": self.cap_id,
            "rp_id": self.rp_id,
            "prefixes": sorted(self.prefixes),
            "granted_at": to_rfc3339(self.granted_at),
            "expires_at": to_rfc3339(self.expires_at) if self.expires_at else None,
        }


def effective_prefixes(consented: Iterable[str], requested: Optional[Iterable[str]]) -> set[str]:
    """Intersect requested type prefixes with consented ones.

    Where one prefix extends the other, the more specific of the two
    survives; disjoint prefixes drop out.
    """
    consented = set(consented)
    if requested is None:
        return consented
    out: set[str] = set()
    for r in requested:
        for c in consented:
            if r.startswith(c):
                out.add(r)
            elif c.startswith(r):
                out.add(c)
    return out


def covers(prefixes: Iterable[str], context_type: str) -> bool:
    return any(context_type.startswith(p) for p in prefixes)


def domain_allowed(prefixes: Iterable[str], domain: str) -> bool:
    """Whether a derived-state domain (e.g. "radius.") is within the prefixes."""
    return any(p.startswith(domain) or domain.startswith(p) for p in prefixes)


class ConsentRegistry:
    def __init__(
        self,
        cap_exists: Callable[[str], bool],
        rp_exists: Callable[[str], bool],
        audit: Optional[Callable[[dict], None]] = None,
    ):
        self._cap_exists = cap_exists
        self._rp_exists = rp_exists
        self._audit = audit or (lambda event: None)
        self._lock = threading.Lock()
        self._consents: dict[tuple[str, str], Consent] = {}

    def grant(
        self,
        cap_id: str,
        rp_id: str,
        prefixes: Iterable[str],
        expires_at: Optional[datetime] = None,
    ) -> Consent:
        if not self._cap_exists(cap_id):
            raise UnknownCapId(cap_id)
        if not self._rp_exists(rp_id):
            raise UnknownRp(rp_id)
        prefix_list = list(prefixes)
        if not prefix_list or any(not p for p in prefix_list):
            raise EmptyPrefixSet("consent requires a non-empty set of non-empty prefixes")
        prefix_set = frozenset(prefix_list)
        consent = Consent(
            cap_id=cap_id,
            rp_id=rp_id,
            prefixes=prefix_set,
            granted_at=utcnow(),
            expires_at=expires_at,
        )
        with self._lock:
            self._consents[(cap_id, rp_id)] = consent
        self._audit({"event": "consent_granted", "consent": consent.to_dict()})
        return consent

    def revoke(self, cap_id: str, rp_id: str) -> None:
        with self._lock:
            consent = self._consents.pop((cap_id, rp_id), None)
        if consent is None:
            raise NoSuchConsent(f"{cap_id}/{rp_id}")
        self._audit({"event": "consent_revoked", "cap_id": cap_id, "rp_id": rp_id})

    def get(self, cap_id: str, rp_id: str, now: Optional[datetime] = None) -> Optional[Consent]:
        now = now or utcnow()
        with self._lock:
            consent = self._consents.get((cap_id, rp_id))
        if consent is None or not consent.active(now):
            return None
        return consent

    def list(self) -> list[Consent]:
        with self._lock:
            return list(self._consents.values())
