import time
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings, strategies as st

from ztfcap.consent import covers, domain_allowed, effective_prefixes
from ztfcap.errors import ConsentDenied, EmptyPrefixSet, NoSuchConsent, UnknownCapId
from ztfcap.harness.servers import WebhookReceiver
from ztfcap.linking import parse_admin_table_csv
from ztfcap.model import ContextRecord, LocalIdRef, utcnow

UTC = timezone.utc


def prefix_strategy():
    return st.lists(
        st.sampled_from(["radius.", "radius.auth", "radius.traffic", "mdm.", "mdm.posture", "vpn."]),
        min_size=1,
        max_size=4,
        unique=True,
    )


class TestEffectivePrefixes:
    def test_more_specific_request_survives(self):
        assert effective_prefixes({"radius."}, ["radius.auth"]) == {"radius.auth"}

    def test_more_specific_consent_survives(self):
        assert effective_prefixes({"radius.auth"}, ["radius."]) == {"radius.auth"}

    def test_disjoint_drops_out(self):
        assert effective_prefixes({"radius."}, ["mdm."]) == set()

    def test_no_request_means_full_consented_scope(self):
        assert effective_prefixes({"radius.", "mdm."}, None) == {"radius.", "mdm."}

    @given(prefix_strategy(), prefix_strategy())
    @settings(max_examples=200, deadline=None)
    def test_result_never_wider_than_either_side(self, consented, requested):
        eff = effective_prefixes(consented, requested)
        for p in eff:
            # Anything covered by an effective prefix must be covered by
            # both the consent and the request.
            assert any(p.startswith(c) for c in consented)
            assert any(p.startswith(r) or r.startswith(p) for r in requested)

    @given(prefix_strategy(), prefix_strategy(),
           st.sampled_from(["radius.auth", "radius.traffic", "mdm.posture", "vpn.up"]))
    @settings(max_examples=200, deadline=None)
    def test_covered_type_was_allowed_by_both(self, consented, requested, ctype):
        eff = effective_prefixes(consented, requested)
        if covers(eff, ctype):
            assert covers(consented, ctype)
            assert covers(requested, ctype) or any(ctype.startswith(r) for r in requested)


class TestDomainAllowed:
    def test_exact_domain(self):
        assert domain_allowed({"radius."}, "radius.")

    def test_subdomain_consent(self):
        assert domain_allowed({"radius.traffic"}, "radius.")

    def test_unrelated(self):
        assert not domain_allowed({"mdm."}, "radius.")


@pytest.fixture
def populated(service):
    service.register_cap_id("alice")
    service.register_cap_id("bob")
    service.register_ctxc("radius-lab")
    service.register_ctxc("mdm-lab")
    service.register_rp("nac")
    rows, _ = parse_admin_table_csv("ctxc_name,local_id,cap_id\nradius-lab,u1,alice\nradius-lab,u2,bob\n")
    service.linking.import_admin_table(rows)
    return service


def make_record(local_id="u1", context_type="radius.traffic", ctxc="radius-lab", **payload):
    now = utcnow()
    payload.setdefault("marker", context_type)
    return ContextRecord(
        source=ctxc,
        subject=LocalIdRef(ctxc=ctxc, local_id=local_id),
        context_type=context_type,
        payload=payload,
        observed_at=now,
        received_at=now,
    )


class TestRegistry:
    def test_grant_requires_known_cap_id(self, populated):
        with pytest.raises(UnknownCapId):
            populated.consents.grant("nobody", "nac", ["radius."])

    def test_empty_prefix_set_rejected(self, populated):
        with pytest.raises(EmptyPrefixSet):
            populated.consents.grant("alice", "nac", [])
        with pytest.raises(EmptyPrefixSet):
            populated.consents.grant("alice", "nac", ["radius.", ""])

    def test_regrant_replaces(self, populated):
        populated.consents.grant("alice", "nac", ["radius."])
        populated.consents.grant("alice", "nac", ["mdm."])
        assert populated.consents.get("alice", "nac").prefixes == frozenset({"mdm."})

    def test_revoke_unknown_raises(self, populated):
        with pytest.raises(NoSuchConsent):
            populated.consents.revoke("alice", "nac")

    def test_expired_consent_invisible(self, populated):
        past = utcnow() - timedelta(seconds=1)
        populated.consents.grant("alice", "nac", ["radius."], expires_at=past)
        assert populated.consents.get("alice", "nac") is None

    def test_grant_and_revoke_audited(self, populated):
        populated.consents.grant("alice", "nac", ["radius."])
        populated.consents.revoke("alice", "nac")
        events = [e["event"] for e in populated.audit.snapshot()]
        assert "consent_granted" in events and "consent_revoked" in events


class TestRpQuery:
    def test_no_consent_denied(self, populated):
        populated.store.ingest(make_record())
        with pytest.raises(ConsentDenied):
            populated.rp_get_contexts("nac", "alice")

    def test_revoked_consent_denied(self, populated):
        populated.consents.grant("alice", "nac", ["radius."])
        populated.consents.revoke("alice", "nac")
        with pytest.raises(ConsentDenied):
            populated.rp_get_contexts("nac", "alice")

    def test_radius_consent_excludes_mdm_contexts(self, populated):
        populated.store.ingest(make_record(context_type="radius.auth"))
        populated.store.ingest(make_record(context_type="radius.traffic",
                                           session_id="s1", status="Start",
                                           input_octets=0, output_octets=0))
        populated.store.ingest(make_record(context_type="mdm.posture",
                                           jail_broken="false", lost_mode_state="disabled",
                                           compliance_state="compliant"))
        populated.consents.grant("alice", "nac", ["radius."])
        records, state = populated.rp_get_contexts("nac", "alice")
        types = {s.record.context_type for s in records}
        assert types == {"radius.auth", "radius.traffic"}
        assert "connectivity" in state
        assert "posture" not in state

    def test_request_narrows_within_consent(self, populated):
        populated.store.ingest(make_record(context_type="radius.auth"))
        populated.store.ingest(make_record(context_type="radius.traffic",
                                           session_id="s1", status="Start",
                                           input_octets=0, output_octets=0))
        populated.consents.grant("alice", "nac", ["radius."])
        records, _ = populated.rp_get_contexts("nac", "alice", types=["radius.auth"])
        assert {s.record.context_type for s in records} == {"radius.auth"}

    def test_request_outside_consent_returns_nothing(self, populated):
        populated.store.ingest(make_record(context_type="mdm.posture",
                                           jail_broken="false", lost_mode_state="disabled",
                                           compliance_state="compliant"))
        populated.consents.grant("alice", "nac", ["radius."])
        records, state = populated.rp_get_contexts("nac", "alice", types=["mdm."])
        assert records == []
        assert "posture" not in state and "connectivity" not in state

    def test_mdm_consent_gets_posture_not_connectivity(self, populated):
        populated.store.ingest(make_record(context_type="mdm.posture",
                                           jail_broken="false", lost_mode_state="disabled",
                                           compliance_state="compliant"))
        populated.consents.grant("alice", "nac", ["mdm."])
        _, state = populated.rp_get_contexts("nac", "alice")
        assert state["posture"]["level"] == "compliant"
        assert "connectivity" not in state

    def test_consent_is_per_subject(self, populated):
        populated.store.ingest(make_record(local_id="u2", context_type="radius.auth"))
        populated.consents.grant("alice", "nac", ["radius."])
        with pytest.raises(ConsentDenied):
            populated.rp_get_contexts("nac", "bob")

    def test_releases_audited_per_record(self, populated):
        populated.store.ingest(make_record(context_type="radius.auth"))
        populated.consents.grant("alice", "nac", ["radius."])
        records, _ = populated.rp_get_contexts("nac", "alice")
        released = [e for e in populated.audit.snapshot()
                    if e["event"] == "context_released" and e["via"] == "query"]
        assert len(released) == len(records) == 1
        assert released[0]["rp_id"] == "nac" and released[0]["cap_id"] == "alice"


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return predicate()


class TestWebhookPush:
    @pytest.fixture
    def receiver(self):
        r = WebhookReceiver()
        yield r
        r.close()

    def test_committed_context_delivered_once(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.consents.grant("alice", "nac", ["radius."])
        populated.store.ingest(make_record(context_type="radius.auth"))
        assert wait_for(lambda: len(receiver.snapshot()) == 1)
        time.sleep(0.3)  # no spurious redelivery afterwards
        body = receiver.snapshot()
        assert len(body) == 1
        assert body[0]["cap_id"] == "alice"
        assert body[0]["context_type"] == "radius.auth"

    def test_nothing_pushed_outside_consented_prefixes(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.consents.grant("alice", "nac", ["mdm."])
        populated.store.ingest(make_record(context_type="radius.auth"))
        time.sleep(0.4)
        assert receiver.snapshot() == []

    def test_no_push_without_consent(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.store.ingest(make_record(context_type="radius.auth"))
        time.sleep(0.4)
        assert receiver.snapshot() == []

    def test_delivery_retried_until_receiver_recovers(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.consents.grant("alice", "nac", ["radius."])
        receiver.fail_first(2)
        populated.store.ingest(make_record(context_type="radius.auth"))
        assert wait_for(lambda: len(receiver.snapshot()) == 1)
        released = [e for e in populated.audit.snapshot()
                    if e["event"] == "context_released" and e["via"] == "webhook"]
        assert len(released) == 1

    def test_sequences_monotone_in_delivery_bodies(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.consents.grant("alice", "nac", ["radius."])
        for i in range(5):
            populated.store.ingest(make_record(context_type="radius.auth", n=i))
        assert wait_for(lambda: len(receiver.snapshot()) == 5)
        seqs = [b["sequence"] for b in receiver.snapshot()]
        assert seqs == sorted(seqs)

    def test_flushed_pending_contexts_pushed_on_binding(self, populated, receiver):
        populated.register_rp("nac", webhook_url=receiver.url)
        populated.consents.grant("alice", "nac", ["radius."])
        populated.store.ingest(make_record(local_id="u9", context_type="radius.auth"))
        time.sleep(0.2)
        assert receiver.snapshot() == []  # unlinked, so still pending
        rows, _ = parse_admin_table_csv("ctxc_name,local_id,cap_id\nradius-lab,u9,alice\n")
        populated.linking.import_admin_table(rows)
        assert wait_for(lambda: len(receiver.snapshot()) == 1)
