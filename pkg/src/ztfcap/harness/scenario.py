"""Scripted end-to-end scenarios against a live CAP service.

A scenario is a JSON document: declared devices, CtxCs and RPs, then an
ordered step list. Assertion failures mark the step failed but the run
continues; infrastructure failures abort with ScenarioAbort. The report
is machine-readable JSON.
"""

from __future__ import annotations

import json
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import httpx

from .. import mdm as mdm_mod
from ..api import create_app
from ..service import CapConfig, CapService
from .agent import DeviceAgent
from .detail import format_detail_timestamp
from .pki import TestCa
from .servers import MockMdmServer


class ScenarioAbort(Exception):
    pass


@dataclass
class ScenarioEnv:
    endpoint: str
    admin_token: str
    agents: dict[str, DeviceAgent] = field(default_factory=dict)
    ctxc_tokens: dict[str, str] = field(default_factory=dict)
    rp_tokens: dict[str, str] = field(default_factory=dict)
    mdm: Optional[MockMdmServer] = None
    ca: Optional[TestCa] = None
    radius_ctxc: str = "radius-lab"
    mdm_ctxc: str = "mdm-lab"

    def admin_headers(self) -> dict:
        return {"Authorization": f"Bearer {self.admin_token}"}


def _expect_error(resp: httpx.Response, code: str) -> tuple[bool, str]:
    if resp.status_code < 400:
        return False, f"expected error {code}, got HTTP {resp.status_code}"
    got = resp.json().get("error")
    if got != code:
        return False, f"expected error {code}, got {got}"
    return True, f"got expected error {code}"


_PLACEHOLDER = re.compile(r"\$\{(ts[+-]?\d*|issuer|serial:[^}]+)\}")


class ScenarioRunner:
    def __init__(self, env: ScenarioEnv):
        self.env = env

    def substitute(self, value):
        """Fill ``${ts±N}``, ``${issuer}`` and ``${serial:<device>}`` in
        scenario text with the values of this particular run."""
        if isinstance(value, dict):
            return {k: self.substitute(v) for k, v in value.items()}
        if isinstance(value, list):
            return [self.substitute(v) for v in value]
        if not isinstance(value, str):
            return value

        def repl(match):
            token = match.group(1)
            if token.startswith("ts"):
                offset = int(token[2:]) if token[2:] else 0
                ts = datetime.now(timezone.utc) + timedelta(seconds=offset)
                return format_detail_timestamp(ts)
            if token == "issuer":
                if self.env.ca is None:
                    raise ScenarioAbort("scenario uses ${issuer} but has no test CA")
                return self.env.ca.issuer_dn
            device = token[len("serial:"):]
            agent = self.env.agents.get(device)
            if agent is None:
                raise ScenarioAbort(f"${{serial}} references undeclared device {device!r}")
            return agent.credential.serial_hex

        return _PLACEHOLDER.sub(repl, value)

    def _post(self, path: str, **kwargs) -> httpx.Response:
        try:
            return httpx.post(self.env.endpoint + path, timeout=15.0, **kwargs)
        except httpx.HTTPError as exc:
            raise ScenarioAbort(f"POST {path}: {exc}") from exc

    def _get(self, path: str, **kwargs) -> httpx.Response:
        try:
            return httpx.get(self.env.endpoint + path, timeout=15.0, **kwargs)
        except httpx.HTTPError as exc:
            raise ScenarioAbort(f"GET {path}: {exc}") from exc

    # -- step handlers --------------------------------------------------------

    def step_issuepseudo(self, step: dict) -> tuple[bool, str]:
        resp = self._post(
            "/admin/pseudoid",
            json={"cap_id": step["cap_id"], "audience": step["audience"]},
            headers=self.env.admin_headers(),
        )
        if resp.status_code >= 400:
            if "expect" in step:
                return _expect_error(resp, step["expect"])
            return False, f"pseudo issuance failed: {resp.text}"
        return True, f"pseudo_id {resp.json()['pseudo_id']}"

    def step_importtable(self, step: dict) -> tuple[bool, str]:
        resp = self._post(
            "/admin/table/import",
            content=step["csv"].encode(),
            headers=self.env.admin_headers(),
        )
        if resp.status_code >= 400:
            return False, f"import failed: {resp.text}"
        report = resp.json()
        expected_rejects = step.get("expect_rejected", 0)
        if len(report["rejected"]) != expected_rejects:
            return False, f"expected {expected_rejects} rejects, got {report['rejected']}"
        return True, f"imported {report['imported']}"

    def step_runchallenge(self, step: dict) -> tuple[bool, str]:
        agent = self.env.agents.get(step["device"])
        if agent is None:
            raise ScenarioAbort(f"undeclared device {step['device']!r}")
        tamper = step.get("tamper")
        signing_key = None
        if tamper == "wrong_key":
            from cryptography.hazmat.primitives.asymmetric import ec

            signing_key = ec.generate_private_key(ec.SECP256R1())
        try:
            if tamper == "replay":
                challenge = agent.request_challenge(self.env.endpoint)
                first = agent.respond(self.env.endpoint, challenge)
                if first.status_code >= 400:
                    return False, f"honest attempt before replay failed: {first.text}"
                resp = agent.respond(self.env.endpoint, challenge)
            else:
                resp = agent.run_challenge(self.env.endpoint, signing_key=signing_key)
        except httpx.HTTPError as exc:
            raise ScenarioAbort(f"challenge transport failure: {exc}") from exc
        expect = step.get("expect", "ok")
        if expect == "ok":
            if resp.status_code >= 400:
                return False, f"challenge failed: {resp.text}"
            return True, f"bound {resp.json()['cap_id']}"
        return _expect_error(resp, expect)

    def step_emitradius(self, step: dict) -> tuple[bool, str]:
        ctxc = step.get("ctxc", self.env.radius_ctxc)
        token = self.env.ctxc_tokens[ctxc]
        resp = self._post(
            "/ingest/radius",
            content=self.substitute(step["detail"]).encode(),
            headers={"Authorization": f"Bearer {token}", "X-CtxC-Name": ctxc},
        )
        if resp.status_code >= 400:
            return False, f"radius ingest failed: {resp.text}"
        return True, json.dumps(resp.json())

    def step_setmdmdevice(self, step: dict) -> tuple[bool, str]:
        if self.env.mdm is None:
            raise ScenarioAbort("scenario uses MDM but no mock MDM is configured")
        record = self.substitute(step["record"])
        self.env.mdm.set_device(record)
        return True, f"device {record['id']} set"

    def step_poll(self, step: dict) -> tuple[bool, str]:
        if self.env.mdm is None:
            raise ScenarioAbort("scenario uses MDM but no mock MDM is configured")
        config = mdm_mod.MdmEndpointConfig(
            base_url=self.env.mdm.base_url, token=self.env.mdm.token, backoff_base=0.05
        )
        records = mdm_mod.poll_devices(config)
        ctxc = step.get("ctxc", self.env.mdm_ctxc)
        token = self.env.ctxc_tokens[ctxc]
        count = 0
        for record in records:
            ctx = mdm_mod.device_to_context(record, ctxc)
            resp = self._post(
                "/ingest/context",
                json=ctx.to_dict(),
                headers={"Authorization": f"Bearer {token}"},
            )
            if resp.status_code >= 400:
                return False, f"context ingest failed: {resp.text}"
            count += 1
        return True, f"polled and ingested {count} posture contexts"

    def step_grantconsent(self, step: dict) -> tuple[bool, str]:
        resp = self._post(
            "/consents",
            json={
                "cap_id": step["cap_id"],
                "rp_id": step["rp"],
                "prefixes": step["prefixes"],
            },
            headers=self.env.admin_headers(),
        )
        if resp.status_code >= 400:
            return False, f"consent grant failed: {resp.text}"
        return True, "consent granted"

    def step_rpquery(self, step: dict) -> tuple[bool, str]:
        token = self.env.rp_tokens[step["rp"]]
        params = {}
        if step.get("types"):
            params["types"] = ",".join(step["types"])
        resp = self._get(
            f"/contexts/{step['cap_id']}",
            params=params,
            headers={"Authorization": f"Bearer {token}"},
        )
        expect = step.get("expect", {})
        if "error" in expect:
            return _expect_error(resp, expect["error"])
        if resp.status_code >= 400:
            return False, f"query failed: {resp.text}"
        body = resp.json()
        state = body["derived_state"]
        checks: list[str] = []
        if "connected" in expect:
            got = state.get("connectivity", {}).get("connected")
            if got != expect["connected"]:
                return False, f"connected={got}, expected {expect['connected']}"
            checks.append(f"connected={got}")
        for total in ("total_input", "total_output"):
            if total in expect:
                got = state.get("connectivity", {}).get(total)
                if got != expect[total]:
                    return False, f"{total}={got}, expected {expect[total]}"
                checks.append(f"{total}={got}")
        if "posture" in expect:
            got = (state.get("posture") or {}).get("level")
            if got != expect["posture"]:
                return False, f"posture={got}, expected {expect['posture']}"
            checks.append(f"posture={got}")
        if "min_contexts" in expect:
            if len(body["contexts"]) < expect["min_contexts"]:
                return False, f"only {len(body['contexts'])} contexts returned"
            checks.append(f"contexts={len(body['contexts'])}")
        return True, "; ".join(checks) or "query ok"

    def step_sleep(self, step: dict) -> tuple[bool, str]:
        time.sleep(float(step["seconds"]))
        return True, f"slept {step['seconds']}s"

    # -- driver ------------------------------------------------------------------

    def run(self, script: dict) -> dict:
        results = []
        for step in script.get("steps", []):
            name = step["step"]
            handler = getattr(self, f"step_{name.lower()}", None)
            if handler is None:
                raise ScenarioAbort(f"unknown step {name!r}")
            started = time.monotonic()
            ok, detail = handler(step)
            results.append(
                {
                    "step": name,
                    "ok": ok,
                    "detail": detail,
                    "seconds": round(time.monotonic() - started, 4),
                }
            )
        return {"pass": all(r["ok"] for r in results), "steps": results}


def run_scenario(script: dict, env: ScenarioEnv) -> dict:
    return ScenarioRunner(env).run(script)


# -- self-contained execution of a scenario file --------------------------------

def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def launch_local_cap(service: CapService) -> tuple[str, "object"]:
    """Serve the CAP app on an ephemeral loopback port in a thread."""
    import uvicorn

    port = _free_port()
    config = uvicorn.Config(create_app(service), host="127.0.0.1", port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    endpoint = f"http://127.0.0.1:{port}"
    while time.monotonic() < deadline:
        try:
            httpx.get(endpoint + "/healthz", timeout=1.0)
            return endpoint, server
        except httpx.HTTPError:
            time.sleep(0.05)
    raise ScenarioAbort("CAP service did not come up")


def build_env(script: dict, service: CapService, endpoint: str) -> ScenarioEnv:
    """Register the declared federation and wire up agents and servers."""
    env = ScenarioEnv(endpoint=endpoint, admin_token=service.config.admin_token)
    ca = TestCa()
    service.linking.add_trust_anchor(ca.cert)
    env.ca = ca

    for name in script.get("ctxcs", [env.radius_ctxc, env.mdm_ctxc]):
        entry = service.register_ctxc(name)
        env.ctxc_tokens[name] = entry.token
    for rp in script.get("rps", []):
        rp_id = rp["rp_id"] if isinstance(rp, dict) else rp
        entry = service.register_rp(rp_id)
        env.rp_tokens[rp_id] = entry.token
    for device in script.get("devices", []):
        cap_entry = service.register_cap_id(device)
        cred = ca.issue_device(device)
        env.agents[device] = DeviceAgent(
            cap_id=device, device_token=cap_entry.device_token, credential=cred
        )
    if script.get("mdm", True):
        env.mdm = MockMdmServer()
    return env


def run_scenario_file(path: Path) -> dict:
    script = json.loads(Path(path).read_text())
    service = CapService(CapConfig())
    endpoint, server = launch_local_cap(service)
    env = build_env(script, service, endpoint)
    try:
        return run_scenario(script, env)
    finally:
        server.should_exit = True
        if env.mdm:
            env.mdm.close()
        service.close()


def main() -> None:
    import sys

    report = run_scenario_file(Path(sys.argv[1]))
    print(json.dumps(report, indent=2))
    sys.exit(0 if report["pass"] else 1)


if __name__ == "__main__":
    main()
