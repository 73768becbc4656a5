"""Identifier linking between CtxC-local subjects and CAP identities.

Three strategies are supported, each producing a Binding in the shared
binding store:

* pairwise pseudonymous IDs carried in signed tokens,
* an administrator-maintained correspondence table,
* certificate proof-of-possession via a nonce challenge.

The binding store is the single source of truth consulted by the context
store when attributing incoming records.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Iterable, Optional, Sequence

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, padding, rsa

from . import model
from .errors import (
    BadPopSignature,
    BadSignature,
    BindingConflict,
    CertificateExpired,
    ChallengeExpired,
    ChallengeReplayed,
    Expired,
    MalformedCertificate,
    NoSuchBinding,
    UnknownCapId,
    UnknownChallenge,
    UnknownCtxC,
    UntrustedChain,
    WrongAudience,
)
from .model import (
    CertRef,
    FullCert,
    IssuerSerial,
    LocalIdRef,
    PseudoIdRef,
    SubjectRef,
    b64url_decode,
    b64url_encode,
    load_certificate,
)

POP_CONTEXT = b"ztf-link-v1"
DEFAULT_CHALLENGE_TTL = 120
DEFAULT_TOKEN_TTL = 3600


# -- binding keys ---------------------------------------------------------------

@dataclass(frozen=True)
class PseudoKey:
    pseudo_id: str
    audience: str


@dataclass(frozen=True)
class AdminKey:
    ctxc: str
    local_id: str


@dataclass(frozen=True)
class CertKey:
    fingerprint: str
    issuer: str
    serial: str


BindingKey = PseudoKey | AdminKey | CertKey

METHOD_FOR_KEY = {PseudoKey: "pseudo", AdminKey: "admin", CertKey: "certificate"}


def key_to_dict(key: BindingKey) -> dict:
    if isinstance(key, PseudoKey):
        return {"method": "pseudo", "pseudo_id": key.pseudo_id, "audience": key.audience}
    if isinstance(key, AdminKey):
        return {"method": "admin", "ctxc": key.ctxc, "local_id": key.local_id}
    return {
        "method": "certificate",
        "fingerprint": key.fingerprint,
        "issuer": key.issuer,
        "serial": key.serial,
    }


def key_from_dict(data: dict) -> BindingKey:
    method = data.get("method")
    if method == "pseudo":
        return PseudoKey(pseudo_id=data["pseudo_id"], audience=data["audience"])
    if method == "admin":
        return AdminKey(ctxc=data["ctxc"], local_id=data["local_id"])
    if method == "certificate":
        return CertKey(
            fingerprint=data["fingerprint"],
            issuer=data["issuer"],
            serial=data["serial"],
        )
    raise NoSuchBinding(f"unknown binding method {method!r}")


@dataclass
class Binding:
    key: BindingKey
    cap_id: str
    method: str
    created_at: datetime
    status: str = "active"

    def to_dict(self) -> dict:
        return {
            "key": key_to_dict(self.key),
            "cap_id": self.cap_id,
            "method": self.method,
            "created_at": model.to_rfc3339(self.created_at),
            "status": self.status,
        }


@dataclass
class Challenge:
    challenge_id: str
    cap_id: str
    nonce: bytes
    issued_at: datetime
    ttl_seconds: int = DEFAULT_CHALLENGE_TTL
    consumed: bool = False

    @property
    def expires_at(self) -> datetime:
        return self.issued_at + timedelta(seconds=self.ttl_seconds)


@dataclass(frozen=True)
class PseudoIdToken:
    compact: str
    pseudo_id: str
    audience: str
    issued_at: int
    expires_at: int


@dataclass
class ImportReport:
    imported: int = 0
    rejected: list = field(default_factory=list)  # (row, reason) pairs

    def to_dict(self) -> dict:
        return {
            "imported": self.imported,
            "rejected": [{"row": list(row), "reason": reason} for row, reason in self.rejected],
        }


def parse_admin_table_csv(text: str) -> tuple[list[tuple[str, str, str]], list[tuple[tuple, str]]]:
    """Parse the admin correspondence table format.

    Header must be exactly ``ctxc_name,local_id,cap_id``. Fields are
    plain comma-separated; rows whose fields contain quoting or extra
    commas are rejected rather than interpreted.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "ctxc_name,local_id,cap_id":
        raise UnknownCtxC("missing or bad header: expected ctxc_name,local_id,cap_id")
    rows: list[tuple[str, str, str]] = []
    rejected: list[tuple[tuple, str]] = []
    for line in lines[1:]:
        fields = line.split(",")
        if len(fields) != 3:
            rejected.append((tuple(fields), "MalformedRow"))
            continue
        if any('"' in f for f in fields):
            rejected.append((tuple(fields), "MalformedRow"))
            continue
        rows.append((fields[0].strip(), fields[1].strip(), fields[2].strip()))
    return rows, rejected


def _pop_message(nonce: bytes, cap_id: str) -> bytes:
    return nonce + cap_id.encode() + POP_CONTEXT


def _verify_with_public_key(public_key, signature: bytes, message: bytes) -> None:
    """Verify a proof-of-possession signature against the allowlisted algorithms."""
    if isinstance(public_key, ed25519.Ed25519PublicKey):
        public_key.verify(signature, message)
    elif isinstance(public_key, ec.EllipticCurvePublicKey):
        if not isinstance(public_key.curve, ec.SECP256R1):
            raise BadPopSignature(f"unsupported curve {public_key.curve.name}")
        public_key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
    elif isinstance(public_key, rsa.RSAPublicKey):
        if public_key.key_size < 2048:
            raise BadPopSignature("RSA key too small")
        public_key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
    else:
        raise BadPopSignature(f"unsupported key type {type(public_key).__name__}")


def _verify_issued_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    if cert.issuer != issuer.subject:
        return False
    try:
        cert.verify_directly_issued_by(issuer)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def sign_pop(private_key, nonce: bytes, cap_id: str) -> bytes:
    """Produce a challenge-response signature (used by device agents)."""
    message = _pop_message(nonce, cap_id)
    if isinstance(private_key, ed25519.Ed25519PrivateKey):
        return private_key.sign(message)
    if isinstance(private_key, ec.EllipticCurvePrivateKey):
        return private_key.sign(message, ec.ECDSA(hashes.SHA256()))
    if isinstance(private_key, rsa.RSAPrivateKey):
        return private_key.sign(message, padding.PKCS1v15(), hashes.SHA256())
    raise TypeError(f"unsupported key type {type(private_key).__name__}")


class LinkingService:
    """Owns bindings, pseudo-ID issuance and the certificate challenge flow.

    All mutating operations and lookups take one internal lock, so
    callers on any thread observe fully applied bindings only.
    """

    def __init__(
        self,
        cap_exists: Callable[[str], bool],
        ctxc_exists: Callable[[str], bool],
        trust_anchors: Sequence[x509.Certificate] = (),
        signing_key: Optional[ed25519.Ed25519PrivateKey] = None,
        pseudo_secret: Optional[bytes] = None,
        issuer_name: str = "ztf-cap",
        token_ttl: int = DEFAULT_TOKEN_TTL,
        challenge_ttl: int = DEFAULT_CHALLENGE_TTL,
        on_new_binding: Optional[Callable[[Binding], None]] = None,
        audit: Optional[Callable[[dict], None]] = None,
    ):
        self._cap_exists = cap_exists
        self._ctxc_exists = ctxc_exists
        self._anchors = list(trust_anchors)
        self._signing_key = signing_key or ed25519.Ed25519PrivateKey.generate()
        self._pseudo_secret = pseudo_secret or secrets.token_bytes(32)
        self._issuer_name = issuer_name
        self._token_ttl = token_ttl
        self._challenge_ttl = challenge_ttl
        self.on_new_binding = on_new_binding
        self._audit = audit or (lambda event: None)

        raw_pub = self._signing_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self._kid = hashlib.sha256(raw_pub).hexdigest()[:8]
        self._public_key_raw = raw_pub

        self._lock = threading.RLock()
        self._active: dict[BindingKey, Binding] = {}
        self._history: list[Binding] = []
        self._pseudo_index: dict[str, PseudoKey] = {}  # pseudo_id -> key
        self._cert_is_index: dict[tuple[str, str], str] = {}  # (issuer, serial) -> fingerprint
        self._challenges: dict[str, Challenge] = {}

    # -- key publication ---------------------------------------------------

    def public_key_info(self) -> dict:
        return {
            "kid": self._kid,
            "alg": "Ed25519",
            "public_key": b64url_encode(self._public_key_raw),
        }

    def add_trust_anchor(self, cert: x509.Certificate) -> None:
        with self._lock:
            self._anchors.append(cert)

    # -- strategy 1: pseudonymous IDs ---------------------------------------

    def _pairwise_pseudo_id(self, cap_id: str, audience: str) -> str:
        digest = hmac.new(
            self._pseudo_secret, f"{cap_id}\x00{audience}".encode(), hashlib.sha256
        ).digest()
        return b64url_encode(digest[:16])

    def issue_pseudo_id(self, cap_id: str, audience: str, now: Optional[datetime] = None) -> PseudoIdToken:
        if not self._cap_exists(cap_id):
            raise UnknownCapId(cap_id)
        if not self._ctxc_exists(audience):
            raise UnknownCtxC(audience)
        now = now or model.utcnow()
        pseudo_id = self._pairwise_pseudo_id(cap_id, audience)
        iat = int(now.timestamp())
        exp = iat + self._token_ttl
        header = {"alg": "Ed25519", "kid": self._kid}
        payload = {
            "pseudo_id": pseudo_id,
            "aud": audience,
            "iat": iat,
            "exp": exp,
            "iss": self._issuer_name,
        }
        signing_input = (
            b64url_encode(json.dumps(header, sort_keys=True).encode())
            + "."
            + b64url_encode(json.dumps(payload, sort_keys=True).encode())
        )
        sig = self._signing_key.sign(signing_input.encode("ascii"))
        compact = signing_input + "." + b64url_encode(sig)

        key = PseudoKey(pseudo_id=pseudo_id, audience=audience)
        with self._lock:
            existing = self._active.get(key)
            if existing is None:
                binding = Binding(key=key, cap_id=cap_id, method="pseudo", created_at=now)
                self._active[key] = binding
                self._pseudo_index[pseudo_id] = key
                self._history.append(binding)
                self._audit({"event": "binding_created", "binding": binding.to_dict()})
                if self.on_new_binding:
                    self.on_new_binding(binding)
        return PseudoIdToken(
            compact=compact, pseudo_id=pseudo_id, audience=audience, issued_at=iat, expires_at=exp
        )

    def verify_pseudo_token(self, compact: str, expected_audience: str, now: Optional[datetime] = None) -> str:
        now = now or model.utcnow()
        try:
            header_b64, payload_b64, sig_b64 = compact.split(".")
            header = json.loads(b64url_decode(header_b64))
            payload = json.loads(b64url_decode(payload_b64))
            sig = b64url_decode(sig_b64)
        except (ValueError, json.JSONDecodeError) as exc:
            raise BadSignature(f"malformed token: {exc}") from exc
        if header.get("alg") != "Ed25519" or header.get("kid") != self._kid:
            raise BadSignature("unknown key or algorithm")
        signing_input = (header_b64 + "." + payload_b64).encode("ascii")
        try:
            self._signing_key.public_key().verify(sig, signing_input)
        except InvalidSignature as exc:
            raise BadSignature("signature verification failed") from exc
        if payload.get("aud") != expected_audience:
            raise WrongAudience(f"token audience {payload.get('aud')!r}")
        ts = int(now.timestamp())
        if not (payload.get("iat", 0) <= ts < payload.get("exp", 0)):
            raise Expired("token outside validity window")
        return payload["pseudo_id"]

    # -- strategy 2: administrator table ------------------------------------

    def import_admin_table(self, rows: Iterable[tuple[str, str, str]]) -> ImportReport:
        report = ImportReport()
        for row in rows:
            ctxc, local_id, cap_id = row
            if not local_id:
                report.rejected.append((row, "MalformedRow"))
                continue
            if not self._ctxc_exists(ctxc):
                report.rejected.append((row, "UnknownCtxC"))
                continue
            if not self._cap_exists(cap_id):
                report.rejected.append((row, "UnknownCapId"))
                continue
            key = AdminKey(ctxc=ctxc, local_id=local_id)
            now = model.utcnow()
            with self._lock:
                existing = self._active.get(key)
                if existing is not None:
                    existing.status = "revoked"
                    del self._active[key]
                    self._audit(
                        {
                            "event": "binding_replaced",
                            "key": key_to_dict(key),
                            "old_cap_id": existing.cap_id,
                            "new_cap_id": cap_id,
                        }
                    )
                binding = Binding(key=key, cap_id=cap_id, method="admin", created_at=now)
                self._active[key] = binding
                self._history.append(binding)
                self._audit({"event": "binding_created", "binding": binding.to_dict()})
            if self.on_new_binding:
                self.on_new_binding(binding)
            report.imported += 1
        return report

    # -- strategy 3: certificate proof of possession -------------------------

    def create_challenge(self, cap_id: str, now: Optional[datetime] = None) -> Challenge:
        if not self._cap_exists(cap_id):
            raise UnknownCapId(cap_id)
        challenge = Challenge(
            challenge_id=secrets.token_hex(16),
            cap_id=cap_id,
            nonce=secrets.token_bytes(32),
            issued_at=now or model.utcnow(),
            ttl_seconds=self._challenge_ttl,
        )
        with self._lock:
            self._challenges[challenge.challenge_id] = challenge
        return challenge

    def _validate_chain(self, chain: list[x509.Certificate], now: datetime) -> None:
        anchor_fps = {
            hashlib.sha256(a.public_bytes(serialization.Encoding.DER)).hexdigest()
            for a in self._anchors
        }
        for cert in chain:
            if not (cert.not_valid_before_utc <= now <= cert.not_valid_after_utc):
                raise CertificateExpired(cert.subject.rfc4514_string())
        for i, cert in enumerate(chain):
            fp = hashlib.sha256(cert.public_bytes(serialization.Encoding.DER)).hexdigest()
            if fp in anchor_fps:
                return  # reached a configured anchor inside the presented chain
            if i + 1 < len(chain):
                if not _verify_issued_by(cert, chain[i + 1]):
                    raise UntrustedChain("broken link in presented chain")
                continue
            # last presented cert: must be issued directly by an anchor
            for anchor in self._anchors:
                if _verify_issued_by(cert, anchor):
                    return
            raise UntrustedChain("chain does not terminate at a trust anchor")
        raise UntrustedChain("empty chain")

    def verify_challenge_response(
        self,
        challenge_id: str,
        cert_chain: Sequence[bytes],
        signature: bytes,
        now: Optional[datetime] = None,
    ) -> Binding:
        now = now or model.utcnow()
        with self._lock:
            challenge = self._challenges.get(challenge_id)
            if challenge is None:
                raise UnknownChallenge(challenge_id)
            if challenge.consumed:
                raise ChallengeReplayed(challenge_id)
            if now >= challenge.expires_at:
                raise ChallengeExpired(challenge_id)

        if not cert_chain:
            raise MalformedCertificate("empty certificate chain")
        certs = [load_certificate(der) for der in cert_chain]
        leaf = certs[0]

        try:
            _verify_with_public_key(
                leaf.public_key(), signature, _pop_message(challenge.nonce, challenge.cap_id)
            )
        except InvalidSignature as exc:
            raise BadPopSignature("signature does not verify under the leaf key") from exc

        self._validate_chain(certs, now)

        fingerprint = hashlib.sha256(cert_chain[0]).hexdigest()
        issuer = model.canonicalize_dn(leaf.issuer.rfc4514_string())
        serial = model.normalize_serial(format(leaf.serial_number, "x"))
        key = CertKey(fingerprint=fingerprint, issuer=issuer, serial=serial)

        with self._lock:
            existing = self._active.get(key)
            if existing is not None:
                if existing.cap_id != challenge.cap_id:
                    raise BindingConflict(
                        f"certificate already bound to a different identity"
                    )
                challenge.consumed = True
                return existing
            prior_fp = self._cert_is_index.get((issuer, serial))
            if prior_fp is not None and prior_fp != fingerprint:
                prior = self._active.get(
                    CertKey(fingerprint=prior_fp, issuer=issuer, serial=serial)
                )
                if prior is not None and prior.cap_id != challenge.cap_id:
                    raise BindingConflict("issuer/serial already bound to a different identity")
            binding = Binding(key=key, cap_id=challenge.cap_id, method="certificate", created_at=now)
            self._active[key] = binding
            self._cert_is_index[(issuer, serial)] = fingerprint
            self._history.append(binding)
            challenge.consumed = True
            self._audit({"event": "binding_created", "binding": binding.to_dict()})
        if self.on_new_binding:
            self.on_new_binding(binding)
        return binding

    # -- resolution and lifecycle --------------------------------------------

    def resolve_subject(self, subject: SubjectRef, source: Optional[str] = None) -> Optional[str]:
        """Map a CtxC-side subject reference to a CAP identity, or None.

        For pseudonymous subjects the record's source must match the
        audience the pseudo-ID was issued to; a pseudo-ID presented by a
        different CtxC does not resolve.
        """
        with self._lock:
            if isinstance(subject, PseudoIdRef):
                key = self._pseudo_index.get(subject.pseudo_id)
                if key is None:
                    return None
                if source is not None and key.audience != source:
                    return None
                binding = self._active.get(key)
                return binding.cap_id if binding else None
            if isinstance(subject, LocalIdRef):
                binding = self._active.get(AdminKey(ctxc=subject.ctxc, local_id=subject.local_id))
                return binding.cap_id if binding else None
            if isinstance(subject, CertRef):
                if isinstance(subject.cert, FullCert):
                    fp = subject.cert.fingerprint
                    ref = subject.cert.issuer_serial()
                    binding = self._active.get(
                        CertKey(fingerprint=fp, issuer=ref.issuer, serial=ref.serial)
                    )
                    if binding:
                        return binding.cap_id
                    return self._resolve_issuer_serial(ref)
                return self._resolve_issuer_serial(subject.cert)
            return None

    def _resolve_issuer_serial(self, ref: IssuerSerial) -> Optional[str]:
        fp = self._cert_is_index.get((ref.issuer, ref.serial))
        if fp is None:
            return None
        binding = self._active.get(CertKey(fingerprint=fp, issuer=ref.issuer, serial=ref.serial))
        return binding.cap_id if binding else None

    def revoke_binding(self, key: BindingKey) -> Binding:
        with self._lock:
            binding = self._active.get(key)
            if binding is None:
                raise NoSuchBinding(str(key_to_dict(key)))
            binding.status = "revoked"
            del self._active[key]
            if isinstance(key, CertKey):
                if self._cert_is_index.get((key.issuer, key.serial)) == key.fingerprint:
                    del self._cert_is_index[(key.issuer, key.serial)]
            if isinstance(key, PseudoKey):
                self._pseudo_index.pop(key.pseudo_id, None)
            self._audit({"event": "binding_revoked", "binding": binding.to_dict()})
            return binding

    def list_bindings(self) -> list[Binding]:
        with self._lock:
            return list(self._history)

    def active_bindings(self) -> list[Binding]:
        with self._lock:
            return list(self._active.values())
