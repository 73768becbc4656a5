"""Device posture ingestion from an MDM inventory API.

The poller walks a paginated ``/managedDevices`` listing, maps each raw
object to a device record and derives a posture level from the
compliance fields. Transport failures are retried with exponential
backoff; authentication failures are surfaced immediately.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional
from urllib.parse import urljoin

import httpx

from .errors import MalformedCertificate, MdmAuthFailed, MdmUnavailable
from .model import (
    CertificateRef,
    CertRef,
    ContextRecord,
    FullCert,
    IssuerSerial,
    b64url_decode,
    utcnow,
)

logger = logging.getLogger(__name__)

POSTURE_LEVELS = ["unknown", "compliant", "non_compliant", "lost", "jailbroken"]

DEFAULT_POLL_INTERVAL = 60.0
DEFAULT_BACKOFF_BASE = 5.0
DEFAULT_BACKOFF_CAP = 300.0


@dataclass(frozen=True)
class MdmDeviceRecord:
    device_id: str
    os_version: str
    compliance_state: str
    lost_mode_state: str
    jail_broken: str
    cert: CertificateRef
    polled_at: datetime


@dataclass(frozen=True)
class PostureState:
    level: str
    reasons: tuple[str, ...]
    os_version: str

    def to_dict(self) -> dict:
        return {"level": self.level, "reasons": list(self.reasons), "os_version": self.os_version}


@dataclass
class MdmEndpointConfig:
    base_url: str
    token: str
    backoff_base: float = DEFAULT_BACKOFF_BASE
    backoff_cap: float = DEFAULT_BACKOFF_CAP
    max_retries: int = 5


def posture_from_fields(
    jail_broken: object, lost_mode_state: object, compliance_state: object, os_version: object = ""
) -> PostureState:
    """Collapse MDM compliance fields into one posture level.

    Severity order is fixed: jailbroken > lost > non_compliant >
    compliant > unknown. Matching is case-insensitive after trimming and
    never raises, whatever the field values are.
    """
    jail = str(jail_broken or "").strip().lower()
    lost = str(lost_mode_state or "").strip().lower()
    compliance = str(compliance_state or "").strip().lower()

    reasons: list[str] = []
    if jail in ("true", "yes"):
        reasons.append(f"jail_broken={jail_broken}")
    if lost not in ("disabled", ""):
        reasons.append(f"lost_mode_state={lost_mode_state}")
    if compliance == "noncompliant":
        reasons.append(f"compliance_state={compliance_state}")

    if jail in ("true", "yes"):
        level = "jailbroken"
    elif lost not in ("disabled", ""):
        level = "lost"
    elif compliance == "noncompliant":
        level = "non_compliant"
    elif compliance == "compliant":
        level = "compliant"
    else:
        level = "unknown"
    return PostureState(level=level, reasons=tuple(reasons), os_version=str(os_version or ""))


def derive_posture(record: MdmDeviceRecord) -> PostureState:
    return posture_from_fields(
        record.jail_broken, record.lost_mode_state, record.compliance_state, record.os_version
    )


def _cert_from_api(obj: dict) -> CertificateRef:
    fmt = obj.get("format")
    if fmt == "der-base64url":
        return FullCert(der=b64url_decode(obj["der"]))
    if fmt == "issuer-serial":
        return IssuerSerial(issuer=obj["issuer"], serial=obj["serial"])
    raise MalformedCertificate(f"unknown certificate format {fmt!r}")


def _map_device(obj: dict, polled_at: datetime) -> MdmDeviceRecord:
    return MdmDeviceRecord(
        device_id=str(obj["id"]),
        os_version=str(obj.get("osVersion", "")),
        compliance_state=str(obj.get("complianceState", "")),
        lost_mode_state=str(obj.get("lostModeState", "")),
        jail_broken=str(obj.get("jailBroken", "")),
        cert=_cert_from_api(obj.get("certificate", {})),
        polled_at=polled_at,
    )


def poll_devices(
    config: MdmEndpointConfig,
    client: Optional[httpx.Client] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[MdmDeviceRecord]:
    """Fetch the full device list, following pagination until exhausted."""
    own_client = client is None
    client = client or httpx.Client(timeout=10.0)
    headers = {"Authorization": f"Bearer {config.token}"}
    records: list[MdmDeviceRecord] = []
    polled_at = utcnow()
    url = urljoin(config.base_url + "/", "managedDevices")
    try:
        while url:
            page = _get_with_retry(client, url, headers, config, sleep)
            for obj in page.get("devices", []):
                if not obj.get("id"):
                    logger.warning("skipping MDM object without device id: %r", obj)
                    continue
                try:
                    records.append(_map_device(obj, polled_at))
                except (KeyError, MalformedCertificate) as exc:
                    logger.warning("skipping MDM device %r: %s", obj.get("id"), exc)
            next_url = page.get("next")
            url = urljoin(url, next_url) if next_url else None
    finally:
        if own_client:
            client.close()
    return records


def _get_with_retry(
    client: httpx.Client,
    url: str,
    headers: dict,
    config: MdmEndpointConfig,
    sleep: Callable[[float], None],
) -> dict:
    delay = config.backoff_base
    last_error = "unreachable"
    for _ in range(config.max_retries + 1):
        try:
            resp = client.get(url, headers=headers)
        except httpx.HTTPError as exc:
            last_error = str(exc)
        else:
            if resp.status_code in (401, 403):
                raise MdmAuthFailed(f"MDM rejected credentials: HTTP {resp.status_code}")
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
            else:
                return resp.json()
        sleep(delay)
        delay = min(delay * 2, config.backoff_cap)
    raise MdmUnavailable(f"MDM unavailable after retries: {last_error}")


def device_to_context(
    record: MdmDeviceRecord, ctxc: str, received_at: Optional[datetime] = None
) -> ContextRecord:
    """Turn one inventory record into an mdm.posture context."""
    posture = derive_posture(record)
    received = received_at or utcnow()
    return ContextRecord(
        source=ctxc,
        subject=CertRef(record.cert),
        context_type="mdm.posture",
        payload={
            "device_id": record.device_id,
            "os_version": record.os_version,
            "compliance_state": record.compliance_state,
            "lost_mode_state": record.lost_mode_state,
            "jail_broken": record.jail_broken,
            "posture_level": posture.level,
        },
        observed_at=record.polled_at,
        received_at=max(record.polled_at, received),
    )


class MdmPoller:
    """Background poll loop feeding contexts into an ingestion callback."""

    def __init__(
        self,
        config: MdmEndpointConfig,
        ctxc: str,
        ingest: Callable[[ContextRecord], object],
        interval: float = DEFAULT_POLL_INTERVAL,
    ):
        self.config = config
        self.ctxc = ctxc
        self.ingest = ingest
        self.interval = interval
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def poll_once(self) -> int:
        count = 0
        for record in poll_devices(self.config):
            try:
                self.ingest(device_to_context(record, self.ctxc))
                count += 1
            except MalformedCertificate as exc:
                logger.warning("dropping posture context for %s: %s", record.device_id, exc)
        return count

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                self.poll_once()
            except (MdmUnavailable, MdmAuthFailed) as exc:
                logger.error("MDM poll failed: %s", exc)
            self._stop.wait(self.interval)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="mdm-poller", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
