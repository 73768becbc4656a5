"""FreeRADIUS detail-file ingestion and accounting session tracking.

Detail files are blank-line separated records: a bare timestamp line
(``Www Mmm dd hh:mm:ss yyyy``, taken as UTC) followed by TAB-indented
``Name = Value`` attribute lines. Parsing never aborts the stream; a
record that cannot be understood becomes a warning.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Iterable, Iterator, Optional, Union

from .errors import RejectedAuthNotContextual
from .model import (
    CertRef,
    ContextRecord,
    IssuerSerial,
    SubjectRef,
    canonicalize_dn,
    normalize_serial,
    utcnow,
)
from .errors import MalformedDn, MalformedSerial

DEFAULT_STALE_AFTER = 900.0  # seconds without accounting before "connected" lapses

_ATTR_LINE_RE = re.compile(r"^\t\s*([A-Za-z0-9._:-]+)\s*=\s*(.*)$")
_MAX_OCTETS = 2**63 - 1


@dataclass(frozen=True)
class RadiusAuthRecord:
    timestamp: datetime
    result: str  # "accept" | "reject"
    tls_client_cert_serial: str = ""
    tls_client_cert_issuer: str = ""
    called_station_id: str = ""
    calling_station_id: str = ""


@dataclass(frozen=True)
class RadiusAcctRecord:
    timestamp: datetime
    acct_status_type: str  # "Start" | "InterimUpdate" | "Stop"
    acct_session_id: str
    acct_input_octets: int = 0
    acct_output_octets: int = 0
    calling_station_id: str = ""


@dataclass(frozen=True)
class ParseWarning:
    line_no: int
    reason: str


@dataclass
class SessionState:
    session_id: str
    subject: Optional[SubjectRef]
    connected: bool = False
    input_octets: int = 0
    output_octets: int = 0
    last_seen: datetime = field(default_factory=utcnow)


def _parse_timestamp(line: str) -> Optional[datetime]:
    # FreeRADIUS pads single-digit days with a space.
    collapsed = re.sub(r"\s+", " ", line.strip())
    try:
        ts = datetime.strptime(collapsed, "%a %b %d %H:%M:%S %Y")
    except ValueError:
        return None
    return ts.replace(tzinfo=timezone.utc)


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        return value[1:-1]
    return value


def _record_blocks(lines: Iterable[str]) -> Iterator[tuple[int, list[str]]]:
    block: list[str] = []
    start = 1
    for no, line in enumerate(lines, start=1):
        if line.strip() == "":
            if block:
                yield start, block
            block = []
        else:
            if not block:
                start = no
            block.append(line)
    if block:
        yield start, block


_STATUS_MAP = {
    "start": "Start",
    "interim-update": "InterimUpdate",
    "interimupdate": "InterimUpdate",
    "alive": "InterimUpdate",
    "stop": "Stop",
}


def _classify_block(
    start: int, block: list[str]
) -> tuple[Optional[Union[RadiusAuthRecord, RadiusAcctRecord]], Optional[ParseWarning]]:
    ts = _parse_timestamp(block[0])
    if ts is None:
        return None, ParseWarning(start, f"record does not start with a timestamp: {block[0]!r}")
    attrs: dict[str, str] = {}
    for line in block[1:]:
        m = _ATTR_LINE_RE.match(line)
        if m is None:
            return None, ParseWarning(start, f"malformed attribute line: {line!r}")
        attrs[m.group(1)] = _unquote(m.group(2))

    if "Acct-Status-Type" in attrs:
        status = _STATUS_MAP.get(attrs["Acct-Status-Type"].lower())
        if status is None:
            return None, ParseWarning(start, f"unknown Acct-Status-Type {attrs['Acct-Status-Type']!r}")
        session_id = attrs.get("Acct-Session-Id", "")
        if not session_id:
            return None, ParseWarning(start, "accounting record without Acct-Session-Id")
        try:
            input_octets = int(attrs.get("Acct-Input-Octets", "0"))
            output_octets = int(attrs.get("Acct-Output-Octets", "0"))
        except ValueError:
            return None, ParseWarning(start, "non-integer octet counter")
        if input_octets < 0 or output_octets < 0 or max(input_octets, output_octets) > _MAX_OCTETS:
            return None, ParseWarning(start, "octet counter out of range")
        return (
            RadiusAcctRecord(
                timestamp=ts,
                acct_status_type=status,
                acct_session_id=session_id,
                acct_input_octets=input_octets,
                acct_output_octets=output_octets,
                calling_station_id=attrs.get("Calling-Station-Id", ""),
            ),
            None,
        )

    if "Packet-Type" in attrs:
        packet_type = attrs["Packet-Type"].lower()
        if packet_type == "access-accept":
            result = "accept"
        elif packet_type == "access-reject":
            result = "reject"
        else:
            return None, ParseWarning(start, f"unknown Packet-Type {attrs['Packet-Type']!r}")
        serial = attrs.get("TLS-Client-Cert-Serial", "")
        issuer = attrs.get("TLS-Client-Cert-Issuer", "")
        if result == "accept" and (not serial or not issuer):
            return None, ParseWarning(start, "accept record without TLS client cert identity")
        return (
            RadiusAuthRecord(
                timestamp=ts,
                result=result,
                tls_client_cert_serial=serial,
                tls_client_cert_issuer=issuer,
                called_station_id=attrs.get("Called-Station-Id", ""),
                calling_station_id=attrs.get("Calling-Station-Id", ""),
            ),
            None,
        )

    return None, ParseWarning(start, "record is neither an auth nor an accounting record")


def parse_detail_stream(
    text: str,
) -> tuple[list[Union[RadiusAuthRecord, RadiusAcctRecord]], list[ParseWarning]]:
    """Parse a detail-file stream. Never raises; bad records become warnings."""
    records: list[Union[RadiusAuthRecord, RadiusAcctRecord]] = []
    warnings: list[ParseWarning] = []
    for start, block in _record_blocks(text.splitlines()):
        record, warning = _classify_block(start, block)
        if record is not None:
            records.append(record)
        if warning is not None:
            warnings.append(warning)
    return records, warnings


def auth_to_context(record: RadiusAuthRecord, ctxc: str, received_at: Optional[datetime] = None) -> ContextRecord:
    """Turn an accepted EAP-TLS authentication into a linkable context."""
    if record.result != "accept":
        raise RejectedAuthNotContextual("reject records carry no linkable identity")
    subject = CertRef(
        IssuerSerial(
            issuer=canonicalize_dn(record.tls_client_cert_issuer),
            serial=normalize_serial(record.tls_client_cert_serial),
        )
    )
    payload = {"result": "accept"}
    if record.called_station_id:
        payload["called_station_id"] = record.called_station_id
    if record.calling_station_id:
        payload["calling_station_id"] = record.calling_station_id
    received = received_at or utcnow()
    return ContextRecord(
        source=ctxc,
        subject=subject,
        context_type="radius.auth",
        payload=payload,
        observed_at=record.timestamp,
        received_at=max(record.timestamp, received),
    )


def apply_acct(
    state: Optional[SessionState],
    record: RadiusAcctRecord,
    subject: Optional[SubjectRef] = None,
    ctxc: str = "radius",
    received_at: Optional[datetime] = None,
) -> tuple[SessionState, list[ContextRecord]]:
    """Fold one accounting record into per-session state.

    Octet counters are cumulative; out-of-order delivery is absorbed by
    max-merging, so replaying any permutation of a session's records
    lands on the same totals. Emits a connectivity context whenever the
    connected flag flips and a traffic context for every record.
    """
    received = received_at or utcnow()
    events: list[ContextRecord] = []
    fresh = state is None
    if fresh:
        state = SessionState(
            session_id=record.acct_session_id,
            subject=subject,
            connected=False,
            input_octets=0,
            output_octets=0,
            last_seen=record.timestamp,
        )
    if subject is not None and state.subject is None:
        state.subject = subject

    was_connected = state.connected and not fresh
    state.input_octets = max(state.input_octets, record.acct_input_octets)
    state.output_octets = max(state.output_octets, record.acct_output_octets)
    late = not fresh and record.timestamp < state.last_seen
    if not late:
        state.last_seen = record.timestamp
        if record.acct_status_type in ("Start", "InterimUpdate"):
            state.connected = True
        elif record.acct_status_type == "Stop":
            state.connected = False
    # late records are counter-merged above but change neither last_seen
    # nor the connectivity flag

    event_subject = state.subject
    base_payload = {"session_id": state.session_id, "status": record.acct_status_type}
    if event_subject is not None:
        if state.connected != was_connected:
            events.append(
                ContextRecord(
                    source=ctxc,
                    subject=event_subject,
                    context_type="radius.connectivity",
                    payload={**base_payload, "connected": state.connected},
                    observed_at=record.timestamp,
                    received_at=max(record.timestamp, received),
                )
            )
        events.append(
            ContextRecord(
                source=ctxc,
                subject=event_subject,
                context_type="radius.traffic",
                payload={
                    **base_payload,
                    "input_octets": record.acct_input_octets,
                    "output_octets": record.acct_output_octets,
                },
                observed_at=record.timestamp,
                received_at=max(record.timestamp, received),
            )
        )
    return state, events


def replay_sessions(
    traffic_payloads: Iterable[tuple[datetime, dict]],
) -> dict[str, SessionState]:
    """Rebuild session states from stored radius.traffic contexts.

    This is the pure recomputation path used for derived state: it needs
    nothing beyond the committed context records.
    """
    sessions: dict[str, SessionState] = {}
    for observed_at, payload in traffic_payloads:
        session_id = str(payload.get("session_id", ""))
        if not session_id:
            continue
        record = RadiusAcctRecord(
            timestamp=observed_at,
            acct_status_type=str(payload.get("status", "InterimUpdate")),
            acct_session_id=session_id,
            acct_input_octets=int(payload.get("input_octets", 0)),
            acct_output_octets=int(payload.get("output_octets", 0)),
        )
        state, _ = apply_acct(sessions.get(session_id), record)
        sessions[session_id] = state
    return sessions


def device_connectivity(
    sessions: Iterable[SessionState],
    now: datetime,
    stale_after: float = DEFAULT_STALE_AFTER,
) -> dict:
    """Aggregate one subject's sessions into a connectivity snapshot."""
    connected = False
    total_input = 0
    total_output = 0
    for s in sessions:
        total_input += s.input_octets
        total_output += s.output_octets
        if s.connected and (now - s.last_seen) <= timedelta(seconds=stale_after):
            connected = True
    return {"connected": connected, "total_input": total_input, "total_output": total_output}
