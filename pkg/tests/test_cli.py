import json

import pytest
from click.testing import CliRunner

from ztfcap.cli import main
from ztfcap.harness.scenario import launch_local_cap
from ztfcap.model import ContextRecord, LocalIdRef, utcnow
from ztfcap.service import CapConfig, CapService

CLI_ADMIN = "cli-admin-token"


@pytest.fixture(scope="module")
def live():
    service = CapService(CapConfig(admin_token=CLI_ADMIN))
    endpoint, server = launch_local_cap(service)
    yield endpoint, service
    server.should_exit = True
    service.close()


@pytest.fixture
def run(live):
    endpoint, _ = live
    runner = CliRunner()

    def invoke(*args, token=CLI_ADMIN, output=None, endpoint_override=None):
        base = ["--endpoint", endpoint_override or endpoint, "--admin-token", token]
        if output:
            base += ["--output", output]
        return runner.invoke(main, base + list(args))

    return invoke


@pytest.fixture(scope="module", autouse=True)
def seeded(live):
    _, service = live
    service.register_cap_id("alice")
    service.register_ctxc("radius-lab")
    service.register_rp("nac")
    now = utcnow()
    service.linking.import_admin_table([("radius-lab", "u1", "alice")])
    service.store.ingest(
        ContextRecord(
            source="radius-lab",
            subject=LocalIdRef(ctxc="radius-lab", local_id="u1"),
            context_type="radius.traffic",
            payload={"session_id": "s1", "status": "Start",
                     "input_octets": 42, "output_octets": 7},
            observed_at=now,
            received_at=now,
        )
    )


class TestExitCodes:
    def test_success_is_zero(self, run):
        assert run("capid", "list").exit_code == 0

    def test_domain_error_is_one(self, run):
        result = run("consent", "grant", "--cap-id", "ghost", "--rp-id", "nac",
                     "--prefix", "radius.")
        assert result.exit_code == 1
        assert "UnknownCapId" in result.output

    def test_bad_token_is_two(self, run):
        result = run("capid", "list", token="wrong")
        assert result.exit_code == 2
        assert "authentication failed" in result.output

    def test_unreachable_endpoint_is_two(self, run):
        result = run("capid", "list", endpoint_override="http://127.0.0.1:1")
        assert result.exit_code == 2
        assert "transport error" in result.output


class TestRegistries:
    def test_capid_register_prints_device_token(self, run):
        result = run("capid", "register", "--cap-id", "bob")
        assert result.exit_code == 0
        assert "device token:" in result.output

    def test_ctxc_register_and_list(self, run):
        assert run("ctxc", "register", "--name", "vpn-lab").exit_code == 0
        listing = run("ctxc", "list")
        assert "vpn-lab" in listing.output and "radius-lab" in listing.output

    def test_rp_register_with_webhook(self, run):
        result = run("rp", "register", "--rp-id", "siem",
                     "--webhook-url", "http://127.0.0.1:9/hook")
        assert result.exit_code == 0 and "token:" in result.output
        assert "siem" in run("rp", "list").output

    def test_json_output_is_machine_readable(self, run):
        result = run("capid", "list", output="json")
        data = json.loads(result.output)
        assert "alice" in data["cap_ids"]


class TestTableImport:
    def test_clean_import(self, run, tmp_path):
        f = tmp_path / "table.csv"
        f.write_text("ctxc_name,local_id,cap_id\nradius-lab,u2,alice\n")
        result = run("table", "import", str(f))
        assert result.exit_code == 0
        assert "imported: 1" in result.output

    def test_partial_rejection_exits_one(self, run, tmp_path):
        f = tmp_path / "table.csv"
        f.write_text("ctxc_name,local_id,cap_id\nradius-lab,u3,alice\nradius-lab,u4,ghost\n")
        result = run("table", "import", str(f))
        assert result.exit_code == 1
        assert "imported: 1" in result.output
        assert "rejected:" in result.output and "UnknownCapId" in result.output


class TestBindings:
    def test_list_shows_admin_binding(self, run):
        result = run("bindings", "list")
        assert result.exit_code == 0
        assert "radius-lab/u1" in result.output
        assert "alice" in result.output

    def test_revoke_admin_binding(self, run):
        assert run("capid", "register", "--cap-id", "carol").exit_code == 0
        grant = run("pseudoid", "issue", "--cap-id", "carol", "--audience", "radius-lab",
                    output="json")
        pseudo_id = json.loads(grant.output)["pseudo_id"]
        result = run("bindings", "revoke", "--method", "pseudo",
                     "--pseudo-id", pseudo_id, "--audience", "radius-lab")
        assert result.exit_code == 0
        assert "revoked pseudo binding for carol" in result.output

    def test_revoke_missing_binding_exits_one(self, run):
        result = run("bindings", "revoke", "--method", "admin",
                     "--ctxc", "radius-lab", "--local-id", "nobody")
        assert result.exit_code == 1
        assert "NoSuchBinding" in result.output


class TestConsents:
    def test_grant_list_revoke(self, run):
        assert run("consent", "grant", "--cap-id", "alice", "--rp-id", "nac",
                   "--prefix", "radius.", "--prefix", "mdm.").exit_code == 0
        listing = run("consent", "list")
        assert "alice" in listing.output and "nac" in listing.output
        assert run("consent", "revoke", "--cap-id", "alice", "--rp-id", "nac").exit_code == 0
        assert run("consent", "revoke", "--cap-id", "alice", "--rp-id", "nac").exit_code == 1


class TestContexts:
    def test_show_derived_state(self, run):
        result = run("contexts", "show", "--cap-id", "alice")
        assert result.exit_code == 0
        assert "connected:" in result.output
        assert "in=42 out=7" in result.output
        assert "radius.traffic" in result.output

    def test_show_json_matches_admin_api_schema(self, run):
        result = run("contexts", "show", "--cap-id", "alice", output="json")
        data = json.loads(result.output)
        assert set(data) == {"derived_state", "contexts"}
        assert {"connectivity", "posture", "as_of"} <= set(data["derived_state"])


class TestPseudoId:
    def test_issue_prints_compact_token(self, run):
        result = run("pseudoid", "issue", "--cap-id", "alice", "--audience", "radius-lab")
        assert result.exit_code == 0
        token_line = [l for l in result.output.splitlines() if l.startswith("token:")][0]
        assert token_line.split(": ", 1)[1].count(".") == 2
