"""Throwaway PKI: one root CA issuing ECDSA P-256 device certificates.

Validity windows are configurable so negative paths (expired leaf,
wrong CA, duplicate serial under a different issuer) are easy to set up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, rsa
from cryptography.x509.oid import NameOID

from ..model import canonicalize_dn


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class DeviceCredential:
    name: str
    private_key: object
    cert: x509.Certificate
    der: bytes = b""

    def __post_init__(self):
        if not self.der:
            self.der = self.cert.public_bytes(serialization.Encoding.DER)

    @property
    def issuer_dn(self) -> str:
        return canonicalize_dn(self.cert.issuer.rfc4514_string())

    @property
    def serial_hex(self) -> str:
        return format(self.cert.serial_number, "x")


def _make_key(key_type: str):
    if key_type == "p256":
        return ec.generate_private_key(ec.SECP256R1())
    if key_type == "ed25519":
        return ed25519.Ed25519PrivateKey.generate()
    if key_type == "rsa2048":
        return rsa.generate_private_key(public_exponent=65537, key_size=2048)
    raise ValueError(f"unknown key type {key_type!r}")


class TestCa:
    def __init__(self, name: str = "ZTF Test CA", org: str = "Lab"):
        self.key = ec.generate_private_key(ec.SECP256R1())
        subject = x509.Name(
            [
                x509.NameAttribute(NameOID.COMMON_NAME, name),
                x509.NameAttribute(NameOID.ORGANIZATION_NAME, org),
            ]
        )
        now = _utcnow()
        self.cert = (
            x509.CertificateBuilder()
            .subject_name(subject)
            .issuer_name(subject)
            .public_key(self.key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - timedelta(days=1))
            .not_valid_after(now + timedelta(days=3650))
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .sign(self.key, hashes.SHA256())
        )
        self.devices: dict[str, DeviceCredential] = {}

    @property
    def issuer_dn(self) -> str:
        return canonicalize_dn(self.cert.subject.rfc4514_string())

    def issue_device(
        self,
        name: str,
        key_type: str = "p256",
        expired: bool = False,
        serial: Optional[int] = None,
        not_before: Optional[datetime] = None,
        not_after: Optional[datetime] = None,
    ) -> DeviceCredential:
        key = _make_key(key_type)
        now = _utcnow()
        if expired:
            not_before = now - timedelta(days=30)
            not_after = now - timedelta(days=1)
        builder = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, name)]))
            .issuer_name(self.cert.subject)
            .public_key(key.public_key())
            .serial_number(serial if serial is not None else x509.random_serial_number())
            .not_valid_before(not_before or now - timedelta(hours=1))
            .not_valid_after(not_after or now + timedelta(days=365))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        )
        cert = builder.sign(self.key, hashes.SHA256())
        cred = DeviceCredential(name=name, private_key=key, cert=cert)
        self.devices[name] = cred
        return cred


def gen_test_pki(n_devices: int, key_type: str = "p256") -> TestCa:
    """Root CA plus ``device-1`` .. ``device-n`` leaf credentials."""
    if n_devices < 1:
        raise ValueError("need at least one device")
    ca = TestCa()
    for i in range(1, n_devices + 1):
        ca.issue_device(f"device-{i}", key_type=key_type)
    return ca
