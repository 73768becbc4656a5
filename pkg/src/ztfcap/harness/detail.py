"""Generation of FreeRADIUS-style detail-file text for the harness."""

from __future__ import annotations

from datetime import datetime, timezone
from typing import Optional


def format_detail_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    # FreeRADIUS pads the day with a space, not a zero.
    return ts.strftime(f"%a %b {ts.day:2d} %H:%M:%S %Y")


def auth_record(
    ts: datetime,
    serial: str,
    issuer: str,
    calling_station_id: str = "",
    called_station_id: str = "",
    packet_type: str = "Access-Accept",
) -> str:
    lines = [format_detail_timestamp(ts)]
    lines.append(f'\tPacket-Type = {packet_type}')
    if serial:
        lines.append(f'\tTLS-Client-Cert-Serial = "{serial}"')
    if issuer:
        lines.append(f'\tTLS-Client-Cert-Issuer = "{issuer}"')
    if calling_station_id:
        lines.append(f'\tCalling-Station-Id = "{calling_station_id}"')
    if called_station_id:
        lines.append(f'\tCalled-Station-Id = "{called_station_id}"')
    return "\n".join(lines) + "\n\n"


def acct_record(
    ts: datetime,
    status: str,
    session_id: str,
    input_octets: int = 0,
    output_octets: int = 0,
    calling_station_id: str = "",
) -> str:
    lines = [format_detail_timestamp(ts)]
    lines.append(f"\tAcct-Status-Type = {status}")
    lines.append(f'\tAcct-Session-Id = "{session_id}"')
    lines.append(f"\tAcct-Input-Octets = {input_octets}")
    lines.append(f"\tAcct-Output-Octets = {output_octets}")
    if calling_station_id:
        lines.append(f'\tCalling-Station-Id = "{calling_station_id}"')
    return "\n".join(lines) + "\n\n"
