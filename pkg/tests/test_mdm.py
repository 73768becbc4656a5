from datetime import datetime, timezone

import pytest
from hypothesis import given, settings, strategies as st

from ztfcap.errors import MalformedCertificate, MdmAuthFailed, MdmUnavailable
from ztfcap.harness.pki import TestCa as Ca
from ztfcap.harness.servers import MockMdmServer
from ztfcap.mdm import (
    MdmDeviceRecord,
    MdmEndpointConfig,
    derive_posture,
    device_to_context,
    poll_devices,
    posture_from_fields,
)
from ztfcap.model import CertRef, IssuerSerial, b64url_encode

UTC = timezone.utc
NOW = datetime(2024, 6, 1, tzinfo=UTC)

CERT = IssuerSerial("CN=Lab CA", "2b")


def record(jail="False", lost="disabled", compliance="compliant", os="17.5"):
    return MdmDeviceRecord(
        device_id="dev-1",
        os_version=os,
        compliance_state=compliance,
        lost_mode_state=lost,
        jail_broken=jail,
        cert=CERT,
        polled_at=NOW,
    )


class TestPosture:
    def test_jailbroken_beats_everything(self):
        p = derive_posture(record(jail="True"))
        assert p.level == "jailbroken"
        assert list(p.reasons) == ["jail_broken=True"]

    def test_compliant(self):
        assert derive_posture(record()).level == "compliant"

    def test_unmapped_compliance_is_unknown(self):
        assert derive_posture(record(compliance="inGracePeriod")).level == "unknown"

    def test_lost_mode(self):
        assert derive_posture(record(lost="enabled")).level == "lost"

    def test_noncompliant(self):
        assert derive_posture(record(compliance="nonCompliant")).level == "non_compliant"

    def test_case_insensitive_and_trimmed(self):
        assert derive_posture(record(jail=" YES ")).level == "jailbroken"
        assert derive_posture(record(compliance=" Compliant ")).level == "compliant"

    def test_reasons_list_every_triggered_rule(self):
        p = derive_posture(record(jail="yes", lost="enabled", compliance="noncompliant"))
        assert p.level == "jailbroken"
        assert len(p.reasons) == 3

    @given(st.text(max_size=10), st.text(max_size=10), st.text(max_size=10), st.text(max_size=10))
    @settings(max_examples=300, deadline=None)
    def test_total_over_arbitrary_strings(self, jail, lost, compliance, os):
        p = posture_from_fields(jail, lost, compliance, os)
        assert p.level in ("jailbroken", "lost", "non_compliant", "compliant", "unknown")

    @given(st.booleans(), st.booleans(), st.sampled_from(["compliant", "noncompliant", "other"]))
    @settings(max_examples=60, deadline=None)
    def test_precedence_is_maximum_of_triggered_rules(self, jailed, lost, compliance):
        severity = {"unknown": 0, "compliant": 1, "non_compliant": 2, "lost": 3, "jailbroken": 4}
        triggered = ["jailbroken"] if jailed else []
        triggered += ["lost"] if lost else []
        triggered += ["non_compliant"] if compliance == "noncompliant" else []
        triggered += ["compliant"] if compliance == "compliant" else []
        expected = max(triggered or ["unknown"], key=severity.__getitem__)
        p = posture_from_fields(
            "true" if jailed else "false", "enabled" if lost else "disabled", compliance
        )
        assert p.level == expected


class TestDeviceToContext:
    def test_issuer_serial_subject(self):
        ctx = device_to_context(record(), "mdm-lab")
        assert ctx.subject == CertRef(CERT)
        assert ctx.context_type == "mdm.posture"
        assert ctx.payload["posture_level"] == "compliant"
        assert ctx.observed_at == NOW

    def test_full_cert_subject(self):
        from ztfcap.model import FullCert

        cred = Ca().issue_device("d")
        rec = MdmDeviceRecord(
            device_id="d", os_version="1", compliance_state="compliant",
            lost_mode_state="disabled", jail_broken="false",
            cert=FullCert(cred.der), polled_at=NOW,
        )
        ctx = device_to_context(rec, "mdm-lab")
        assert isinstance(ctx.subject.cert, FullCert)


def device_obj(device_id, cert=None, **fields):
    obj = {
        "id": device_id,
        "osVersion": fields.get("os", "17.5"),
        "complianceState": fields.get("compliance", "compliant"),
        "lostModeState": fields.get("lost", "disabled"),
        "jailBroken": fields.get("jail", "False"),
        "certificate": cert or {"format": "issuer-serial", "issuer": "CN=Lab CA", "serial": "2b"},
    }
    return obj


class TestPolling:
    @pytest.fixture
    def mdm(self):
        server = MockMdmServer(page_size=2)
        yield server
        server.close()

    def config(self, mdm, **kw):
        kw.setdefault("backoff_base", 0.01)
        return MdmEndpointConfig(base_url=mdm.base_url, token=mdm.token, **kw)

    def test_pagination(self, mdm):
        for i in range(3):
            mdm.set_device(device_obj(f"d{i}"))
        records = poll_devices(self.config(mdm))
        assert {r.device_id for r in records} == {"d0", "d1", "d2"}
        assert mdm.request_count == 2  # two pages

    def test_retry_on_500_then_success(self, mdm):
        mdm.set_device(device_obj("d0"))
        mdm.fail_next(1)
        records = poll_devices(self.config(mdm))
        assert len(records) == 1

    def test_unavailable_after_retries_exhausted(self, mdm):
        mdm.set_device(device_obj("d0"))
        mdm.fail_next(100)
        with pytest.raises(MdmUnavailable):
            poll_devices(self.config(mdm, max_retries=2))

    def test_auth_failure_not_retried(self, mdm):
        mdm.set_device(device_obj("d0"))
        config = MdmEndpointConfig(base_url=mdm.base_url, token="wrong", backoff_base=0.01)
        before = mdm.request_count
        with pytest.raises(MdmAuthFailed):
            poll_devices(config)
        assert mdm.request_count == before + 1

    def test_object_without_id_skipped(self, mdm):
        mdm.set_device(device_obj("d0"))
        mdm.set_device({**device_obj("dropme"), "id": ""})
        records = poll_devices(self.config(mdm))
        assert [r.device_id for r in records] == ["d0"]

    def test_full_cert_payload(self, mdm):
        cred = Ca().issue_device("d")
        mdm.set_device(device_obj("d0", cert={"format": "der-base64url", "der": b64url_encode(cred.der)}))
        records = poll_devices(self.config(mdm))
        from ztfcap.model import FullCert

        assert isinstance(records[0].cert, FullCert)

    def test_poll_idempotent_except_timestamps(self, mdm):
        mdm.set_device(device_obj("d0"))
        first = [device_to_context(r, "mdm-lab") for r in poll_devices(self.config(mdm))]
        second = [device_to_context(r, "mdm-lab") for r in poll_devices(self.config(mdm))]
        strip = lambda c: {k: v for k, v in c.to_dict().items() if k not in ("observed_at", "received_at")}
        assert [strip(c) for c in first] == [strip(c) for c in second]
