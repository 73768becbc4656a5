"""Shared domain types and canonicalization primitives.

Everything here is an immutable value or a pure function. Subject
references are canonicalized at construction time, so two references to
the same certificate identity always compare equal no matter which CtxC
printed them.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Mapping, Optional, Union

from cryptography import x509

from .errors import (
    MalformedCertificate,
    MalformedDn,
    MalformedRecord,
    MalformedSerial,
)

Scalar = Union[str, int, float, bool, None]

_CAP_ID_RE = re.compile(r"^[A-Za-z0-9._~-]{1,128}$")
_ATTR_TYPE_RE = re.compile(r"^([A-Za-z][A-Za-z0-9-]*|[0-9]+(\.[0-9]+)*)$")
_SERIAL_RE = re.compile(r"^[0-9a-f]+$")


# -- time ---------------------------------------------------------------------

def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def to_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def from_rfc3339(text: str) -> datetime:
    # Python 3.10 fromisoformat does not accept a trailing Z.
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


# -- base64url ----------------------------------------------------------------

def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    pad = -len(text) % 4
    return base64.urlsafe_b64decode(text + "=" * pad)


# -- identifiers ----------------------------------------------------------------

def validate_cap_id(value: str) -> str:
    """CAP-wide identifier: opaque, URL-safe, at most 128 bytes."""
    if not isinstance(value, str) or not _CAP_ID_RE.match(value):
        raise MalformedRecord(f"invalid cap_id: {value!r}")
    return value


def validate_ctxc_name(value: str) -> str:
    if not isinstance(value, str) or not value:
        raise MalformedRecord("CtxC name must be a non-empty string")
    return value


# -- DN / serial canonicalization ------------------------------------------------

def _split_unescaped(text: str, sep: str) -> list[str]:
    parts: list[str] = []
    buf: list[str] = []
    escaped = False
    for ch in text:
        if escaped:
            buf.append(ch)
            escaped = False
        elif ch == "\\":
            buf.append(ch)
            escaped = True
        elif ch == sep:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return parts


def _find_unescaped(text: str, target: str) -> int:
    escaped = False
    for i, ch in enumerate(text):
        if escaped:
            escaped = False
        elif ch == "\\":
            escaped = True
        elif ch == target:
            return i
    return -1


def canonicalize_dn(dn: str) -> str:
    """Normalize a printed distinguished name for exact-match lookups.

    Components are split on unescaped commas, attribute types are
    uppercased, whitespace around components and around '=' is dropped,
    attribute values are otherwise preserved byte for byte. Multi-valued
    RDNs ('+') and hex-encoded values ('#...') are rejected rather than
    guessed at.
    """
    if not isinstance(dn, str) or not dn.strip():
        raise MalformedDn("empty DN")
    out = []
    for comp in _split_unescaped(dn, ","):
        comp = comp.strip()
        if not comp:
            raise MalformedDn(f"empty component in {dn!r}")
        if _find_unescaped(comp, "+") != -1:
            raise MalformedDn(f"multi-valued RDN not supported: {comp!r}")
        eq = _find_unescaped(comp, "=")
        if eq == -1:
            raise MalformedDn(f"component lacks '=': {comp!r}")
        attr_type = comp[:eq].strip()
        value = comp[eq + 1 :].lstrip()
        if not _ATTR_TYPE_RE.match(attr_type):
            raise MalformedDn(f"bad attribute type in {comp!r}")
        if value.startswith("#"):
            raise MalformedDn(f"hex-encoded value not supported: {comp!r}")
        out.append(f"{attr_type.upper()}={value}")
    return ", ".join(out)


def normalize_serial(serial: str) -> str:
    """Normalize a printed certificate serial to lowercase minimal hex."""
    if not isinstance(serial, str):
        raise MalformedSerial("serial must be a string")
    s = serial.strip().lower()
    if s.startswith("0x"):
        s = s[2:]
    if not _SERIAL_RE.match(s):
        raise MalformedSerial(f"not a hex serial: {serial!r}")
    s = s.lstrip("0")
    return s or "0"


# -- certificates ----------------------------------------------------------------

def load_certificate(der: bytes) -> x509.Certificate:
    try:
        return x509.load_der_x509_certificate(der)
    except Exception as exc:
        raise MalformedCertificate(str(exc)) from exc


def cert_fingerprint(der: bytes) -> str:
    """SHA-256 over the exact DER bytes, lowercase hex. Parses first."""
    load_certificate(der)
    return hashlib.sha256(der).hexdigest()


@dataclass(frozen=True)
class FullCert:
    der: bytes

    def __post_init__(self):
        load_certificate(self.der)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.der).hexdigest()

    def issuer_serial(self) -> "IssuerSerial":
        cert = load_certificate(self.der)
        return IssuerSerial(
            issuer=cert.issuer.rfc4514_string(),
            serial=format(cert.serial_number, "x"),
        )


@dataclass(frozen=True)
class IssuerSerial:
    issuer: str
    serial: str

    def __post_init__(self):
        object.__setattr__(self, "issuer", canonicalize_dn(self.issuer))
        object.__setattr__(self, "serial", normalize_serial(self.serial))


CertificateRef = Union[FullCert, IssuerSerial]


# -- subject references ------------------------------------------------------------

@dataclass(frozen=True)
class PseudoIdRef:
    pseudo_id: str

    def __post_init__(self):
        if not self.pseudo_id:
            raise MalformedRecord("empty pseudo_id")


@dataclass(frozen=True)
class LocalIdRef:
    ctxc: str
    local_id: str

    def __post_init__(self):
        validate_ctxc_name(self.ctxc)
        if not self.local_id:
            raise MalformedRecord("empty local_id")


@dataclass(frozen=True)
class CertRef:
    cert: CertificateRef


SubjectRef = Union[PseudoIdRef, LocalIdRef, CertRef]


def subject_to_dict(subject: SubjectRef) -> dict:
    if isinstance(subject, PseudoIdRef):
        return {"kind": "pseudo", "pseudo_id": subject.pseudo_id}
    if isinstance(subject, LocalIdRef):
        return {"kind": "local", "ctxc": subject.ctxc, "local_id": subject.local_id}
    if isinstance(subject, CertRef):
        if isinstance(subject.cert, FullCert):
            return {
                "kind": "cert",
                "format": "der-base64url",
                "der": b64url_encode(subject.cert.der),
            }
        return {
            "kind": "cert",
            "format": "issuer-serial",
            "issuer": subject.cert.issuer,
            "serial": subject.cert.serial,
        }
    raise MalformedRecord(f"unknown subject type {type(subject)!r}")


def subject_from_dict(data: Mapping[str, Any]) -> SubjectRef:
    try:
        kind = data["kind"]
        if kind == "pseudo":
            return PseudoIdRef(pseudo_id=data["pseudo_id"])
        if kind == "local":
            return LocalIdRef(ctxc=data["ctxc"], local_id=data["local_id"])
        if kind == "cert":
            fmt = data["format"]
            if fmt == "der-base64url":
                return CertRef(FullCert(der=b64url_decode(data["der"])))
            if fmt == "issuer-serial":
                return CertRef(IssuerSerial(issuer=data["issuer"], serial=data["serial"]))
            raise MalformedRecord(f"unknown cert format {fmt!r}")
        raise MalformedRecord(f"unknown subject kind {kind!r}")
    except KeyError as exc:
        raise MalformedRecord(f"subject missing field {exc}") from exc


# -- context records ------------------------------------------------------------

def _check_payload(payload: Mapping[str, Scalar]) -> dict:
    checked = {}
    for key, value in payload.items():
        if not isinstance(key, str) or not key:
            raise MalformedRecord(f"payload key must be a non-empty string: {key!r}")
        if value is not None and not isinstance(value, (str, int, float, bool)):
            raise MalformedRecord(f"payload value for {key!r} is not a scalar")
        checked[key] = value
    return checked


@dataclass(frozen=True)
class ContextRecord:
    """One typed, timestamped observation from a CtxC about one subject."""

    source: str
    subject: SubjectRef
    context_type: str
    payload: Mapping[str, Scalar]
    observed_at: datetime
    received_at: datetime

    def __post_init__(self):
        validate_ctxc_name(self.source)
        if not self.context_type:
            raise MalformedRecord("empty context_type")
        if self.observed_at.tzinfo is None or self.received_at.tzinfo is None:
            raise MalformedRecord("timestamps must be timezone-aware UTC")
        if self.observed_at > self.received_at:
            raise MalformedRecord("observed_at must not be after received_at")
        object.__setattr__(self, "payload", _check_payload(self.payload))

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "subject": subject_to_dict(self.subject),
            "context_type": self.context_type,
            "payload": dict(self.payload),
            "observed_at": to_rfc3339(self.observed_at),
            "received_at": to_rfc3339(self.received_at),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ContextRecord":
        try:
            return cls(
                source=data["source"],
                subject=subject_from_dict(data["subject"]),
                context_type=data["context_type"],
                payload=data["payload"],
                observed_at=from_rfc3339(data["observed_at"]),
                received_at=from_rfc3339(data["received_at"]),
            )
        except KeyError as exc:
            raise MalformedRecord(f"record missing field {exc}") from exc
        except (TypeError, ValueError, AttributeError) as exc:
            raise MalformedRecord(str(exc)) from exc

    def dedup_key(self) -> str:
        """Stable identity for at-least-once delivery deduplication."""
        blob = json.dumps(
            {
                "source": self.source,
                "subject": subject_to_dict(self.subject),
                "context_type": self.context_type,
                "payload": dict(self.payload),
                "observed_at": to_rfc3339(self.observed_at),
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()
