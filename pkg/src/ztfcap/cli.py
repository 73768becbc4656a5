"""ztf-admin: operator CLI, a thin client over the CAP's HTTP API.

Exit codes are uniform: 0 success, 1 domain error (including partial
import rejection), 2 transport or authentication failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click
import httpx


class CliContext:
    def __init__(self, endpoint: str, admin_token: str, output: str):
        self.endpoint = endpoint.rstrip("/")
        self.admin_token = admin_token
        self.output = output

    def request(self, method: str, path: str, **kwargs) -> httpx.Response:
        headers = kwargs.pop("headers", {})
        headers["Authorization"] = f"Bearer {self.admin_token}"
        try:
            resp = httpx.request(
                method, self.endpoint + path, headers=headers, timeout=15.0, **kwargs
            )
        except httpx.HTTPError as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(2)
        if resp.status_code == 401:
            click.echo("authentication failed", err=True)
            sys.exit(2)
        if resp.status_code >= 400:
            try:
                body = resp.json()
                click.echo(f"error: {body.get('error')}: {body.get('detail', '')}", err=True)
            except ValueError:
                click.echo(f"error: HTTP {resp.status_code}", err=True)
            sys.exit(1)
        return resp

    def emit(self, data: dict, table_lines: Optional[list[str]] = None) -> None:
        if self.output == "json":
            click.echo(json.dumps(data, indent=2, sort_keys=True))
        else:
            for line in table_lines or [json.dumps(data)]:
                click.echo(line)


@click.group()
@click.option("--endpoint", envvar="ZTF_ENDPOINT", default="http://127.0.0.1:8080", show_default=True)
@click.option("--admin-token", envvar="ZTF_ADMIN_TOKEN", default="")
@click.option("--output", type=click.Choice(["table", "json"]), default="table", show_default=True)
@click.pass_context
def main(ctx, endpoint, admin_token, output):
    """Administer a running CAP service."""
    ctx.obj = CliContext(endpoint, admin_token, output)


# -- correspondence table ----------------------------------------------------

@main.group()
def table():
    """Administrator correspondence table."""


@table.command("import")
@click.argument("path", type=click.Path(exists=True, path_type=Path))
@click.pass_obj
def table_import(cli: CliContext, path: Path):
    resp = cli.request("POST", "/admin/table/import", content=path.read_bytes())
    report = resp.json()
    lines = [f"imported: {report['imported']}"]
    for item in report["rejected"]:
        lines.append(f"rejected: {','.join(str(f) for f in item['row'])} ({item['reason']})")
    cli.emit(report, lines)
    if report["rejected"]:
        sys.exit(1)


# -- bindings ------------------------------------------------------------------

@main.group()
def bindings():
    """Identifier bindings."""


@bindings.command("list")
@click.pass_obj
def bindings_list(cli: CliContext):
    data = cli.request("GET", "/admin/bindings").json()
    lines = [f"{'METHOD':<12} {'KEY':<40} {'CAP_ID':<20} STATUS"]
    for b in data["bindings"]:
        key = b["key"]
        if key["method"] == "certificate":
            shown = key["fingerprint"][:16]
        elif key["method"] == "pseudo":
            shown = f"{key['pseudo_id']}@{key['audience']}"
        else:
            shown = f"{key['ctxc']}/{key['local_id']}"
        lines.append(f"{b['method']:<12} {shown:<40} {b['cap_id']:<20} {b['status']}")
    cli.emit(data, lines)


def _binding_key_from_flags(method, fingerprint, issuer, serial, pseudo_id, audience, ctxc, local_id):
    if method == "certificate":
        return {"method": "certificate", "fingerprint": fingerprint, "issuer": issuer, "serial": serial}
    if method == "pseudo":
        return {"method": "pseudo", "pseudo_id": pseudo_id, "audience": audience}
    return {"method": "admin", "ctxc": ctxc, "local_id": local_id}


@bindings.command("revoke")
@click.option("--method", type=click.Choice(["certificate", "pseudo", "admin"]), required=True)
@click.option("--fingerprint", default="")
@click.option("--issuer", default="")
@click.option("--serial", default="")
@click.option("--pseudo-id", default="")
@click.option("--audience", default="")
@click.option("--ctxc", default="")
@click.option("--local-id", default="")
@click.pass_obj
def bindings_revoke(cli: CliContext, method, fingerprint, issuer, serial, pseudo_id, audience, ctxc, local_id):
    key = _binding_key_from_flags(method, fingerprint, issuer, serial, pseudo_id, audience, ctxc, local_id)
    data = cli.request("POST", "/admin/bindings/revoke", json={"key": key}).json()
    cli.emit(data, [f"revoked {data['method']} binding for {data['cap_id']}"])


# -- consents ------------------------------------------------------------------

@main.group()
def consent():
    """Per-user consents for relying parties."""


@consent.command("grant")
@click.option("--cap-id", required=True)
@click.option("--rp-id", required=True)
@click.option("--prefix", "prefixes", multiple=True, required=True)
@click.option("--expires-at", default=None)
@click.pass_obj
def consent_grant(cli: CliContext, cap_id, rp_id, prefixes, expires_at):
    body = {"cap_id": cap_id, "rp_id": rp_id, "prefixes": list(prefixes), "expires_at": expires_at}
    data = cli.request("POST", "/consents", json=body).json()
    cli.emit(data, [f"granted {rp_id} -> {cap_id}: {', '.join(data['prefixes'])}"])


@consent.command("revoke")
@click.option("--cap-id", required=True)
@click.option("--rp-id", required=True)
@click.pass_obj
def consent_revoke(cli: CliContext, cap_id, rp_id):
    cli.request("DELETE", f"/consents/{cap_id}/{rp_id}")
    cli.emit({"revoked": {"cap_id": cap_id, "rp_id": rp_id}}, [f"revoked {rp_id} -> {cap_id}"])


@consent.command("list")
@click.pass_obj
def consent_list(cli: CliContext):
    data = cli.request("GET", "/consents").json()
    lines = [f"{'CAP_ID':<20} {'RP_ID':<16} PREFIXES"]
    for c in data["consents"]:
        lines.append(f"{c['cap_id']:<20} {c['rp_id']:<16} {','.join(c['prefixes'])}")
    cli.emit(data, lines)


# -- contexts -------------------------------------------------------------------

@main.group()
def contexts():
    """Inspect stored contexts and derived state."""


@contexts.command("show")
@click.option("--cap-id", required=True)
@click.option("--limit", default=20, show_default=True)
@click.pass_obj
def contexts_show(cli: CliContext, cap_id, limit):
    data = cli.request("GET", f"/admin/contexts/{cap_id}?limit={limit}").json()
    derived = data["derived_state"]
    conn = derived["connectivity"]
    lines = [
        f"cap_id: {cap_id}",
        f"connected: {str(conn['connected']).lower()}",
        f"traffic: in={conn['total_input']} out={conn['total_output']}",
        f"posture: {derived['posture']['level'] if derived['posture'] else 'absent'}",
    ]
    for c in data["contexts"]:
        lines.append(f"  [{c['seq']}] {c['record']['context_type']} @ {c['record']['observed_at']}")
    cli.emit(data, lines)


# -- registries --------------------------------------------------------------------

@main.group()
def rp():
    """Relying party registry."""


@rp.command("register")
@click.option("--rp-id", required=True)
@click.option("--webhook-url", default=None)
@click.pass_obj
def rp_register(cli: CliContext, rp_id, webhook_url):
    data = cli.request("POST", "/admin/rps", json={"rp_id": rp_id, "webhook_url": webhook_url}).json()
    cli.emit(data, [f"rp {data['rp_id']} token: {data['token']}"])


@rp.command("list")
@click.pass_obj
def rp_list(cli: CliContext):
    data = cli.request("GET", "/admin/rps").json()
    cli.emit(data, [f"{e['rp_id']} webhook={e['webhook_url'] or '-'}" for e in data["rps"]])


@main.group()
def ctxc():
    """Context collector registry."""


@ctxc.command("register")
@click.option("--name", required=True)
@click.pass_obj
def ctxc_register(cli: CliContext, name):
    data = cli.request("POST", "/admin/ctxcs", json={"name": name}).json()
    cli.emit(data, [f"ctxc {data['name']} token: {data['token']}"])


@ctxc.command("list")
@click.pass_obj
def ctxc_list(cli: CliContext):
    data = cli.request("GET", "/admin/ctxcs").json()
    cli.emit(data, data["ctxcs"])


@main.group()
def capid():
    """CAP identity registry."""


@capid.command("register")
@click.option("--cap-id", required=True)
@click.pass_obj
def capid_register(cli: CliContext, cap_id):
    data = cli.request("POST", "/admin/capids", json={"cap_id": cap_id}).json()
    cli.emit(data, [f"cap_id {data['cap_id']} device token: {data['device_token']}"])


@capid.command("list")
@click.pass_obj
def capid_list(cli: CliContext):
    data = cli.request("GET", "/admin/capids").json()
    cli.emit(data, data["cap_ids"])


@main.group()
def pseudoid():
    """Pairwise pseudonymous identifiers."""


@pseudoid.command("issue")
@click.option("--cap-id", required=True)
@click.option("--audience", required=True)
@click.pass_obj
def pseudoid_issue(cli: CliContext, cap_id, audience):
    data = cli.request("POST", "/admin/pseudoid", json={"cap_id": cap_id, "audience": audience}).json()
    cli.emit(data, [f"pseudo_id {data['pseudo_id']} for {cap_id}@{audience}", f"token: {data['token']}"])


if __name__ == "__main__":
    main()
