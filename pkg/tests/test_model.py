import hashlib
import subprocess
from datetime import datetime, timedelta, timezone

import pytest
from cryptography import x509
from hypothesis import given, strategies as st

from ztfcap.errors import (
    MalformedCertificate,
    MalformedDn,
    MalformedRecord,
    MalformedSerial,
)
from ztfcap.harness.pki import TestCa as Ca, gen_test_pki
from ztfcap.model import (
    CertRef,
    ContextRecord,
    FullCert,
    IssuerSerial,
    LocalIdRef,
    PseudoIdRef,
    canonicalize_dn,
    cert_fingerprint,
    from_rfc3339,
    normalize_serial,
    subject_from_dict,
    subject_to_dict,
    to_rfc3339,
)

UTC = timezone.utc
NOW = datetime(2024, 6, 1, 12, 0, 0, tzinfo=UTC)


class TestCanonicalizeDn:
    def test_already_canonical_is_identity(self):
        assert canonicalize_dn("CN=Device 1, O=Lab") == "CN=Device 1, O=Lab"

    def test_spacing_and_case_normalized(self):
        assert canonicalize_dn("cn = Device 1,o=Lab") == "CN=Device 1, O=Lab"

    def test_escaped_comma_stays_in_one_component(self):
        # Independent check: the RFC 4514 parser in cryptography agrees the
        # escaped comma belongs to the CN value, not a component boundary.
        name = x509.Name.from_rfc4514_string("CN=Doe\\, Jane,O=Lab")
        cn = name.get_attributes_for_oid(x509.oid.NameOID.COMMON_NAME)[0].value
        assert cn == "Doe, Jane"
        assert canonicalize_dn("CN=Doe\\, Jane,O=Lab") == "CN=Doe\\, Jane, O=Lab"

    def test_component_without_equals_rejected(self):
        with pytest.raises(MalformedDn):
            canonicalize_dn("CN=ok, garbage")

    def test_multivalued_rdn_rejected(self):
        with pytest.raises(MalformedDn):
            canonicalize_dn("CN=a+OU=b, O=Lab")

    def test_hex_value_rejected(self):
        with pytest.raises(MalformedDn):
            canonicalize_dn("CN=#04024869")

    def test_empty_rejected(self):
        with pytest.raises(MalformedDn):
            canonicalize_dn("   ")

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["cn", "CN", "o", "OU", "dc", "2.5.4.3"]),
                st.text(
                    alphabet=st.characters(
                        whitelist_categories=("L", "N"), whitelist_characters=" .-"
                    ),
                    min_size=1,
                    max_size=12,
                ),
            ),
            min_size=1,
            max_size=5,
        )
    )
    def test_idempotent(self, components):
        dn = ",".join(f" {t} = {v}" for t, v in components if v.strip())
        try:
            once = canonicalize_dn(dn)
        except MalformedDn:
            return
        assert canonicalize_dn(once) == once


class TestNormalizeSerial:
    @pytest.mark.parametrize(
        "raw,expected",
        [("0x00AB3F", "ab3f"), ("0", "0"), ("1F3a", "1f3a"), ("000", "0"), ("0x0", "0")],
    )
    def test_examples(self, raw, expected):
        assert normalize_serial(raw) == expected

    @pytest.mark.parametrize("bad", ["", "0x", "xyz", "12 34", "g1"])
    def test_rejects_non_hex(self, bad):
        with pytest.raises(MalformedSerial):
            normalize_serial(bad)

    @given(st.integers(min_value=0, max_value=2**128), st.integers(0, 4), st.booleans(), st.booleans())
    def test_equivalent_printings_agree(self, n, pad, upper, prefix):
        base = format(n, "x")
        variant = "0" * pad + base
        if upper:
            variant = variant.upper()
        if prefix:
            variant = "0x" + variant
        assert normalize_serial(variant) == normalize_serial(base)


class TestCertFingerprint:
    def test_matches_independent_hash_of_der_file(self, tmp_path):
        cred = Ca().issue_device("d1")
        der_file = tmp_path / "cert.der"
        der_file.write_bytes(cred.der)
        # Oracle: openssl hashing the file, independent of our code path.
        out = subprocess.run(
            ["openssl", "dgst", "-sha256", "-hex", str(der_file)],
            capture_output=True,
            text=True,
            check=True,
        ).stdout
        expected = out.strip().rsplit(" ", 1)[-1]
        assert cert_fingerprint(cred.der) == expected
        assert len(cert_fingerprint(cred.der)) == 64

    def test_pem_and_der_agree(self):
        from cryptography.hazmat.primitives import serialization

        cred = Ca().issue_device("d1")
        pem = cred.cert.public_bytes(serialization.Encoding.PEM)
        der_again = x509.load_pem_x509_certificate(pem).public_bytes(
            serialization.Encoding.DER
        )
        assert cert_fingerprint(der_again) == cert_fingerprint(cred.der)

    def test_truncated_der_rejected(self):
        cred = Ca().issue_device("d1")
        with pytest.raises(MalformedCertificate):
            cert_fingerprint(cred.der[: len(cred.der) // 2])

    def test_collision_free_over_generated_corpus(self):
        ca = gen_test_pki(100)
        digests = {cred.fingerprint for cred in (FullCert(d.der) for d in ca.devices.values())}
        assert len(digests) == 100


class TestContextRecord:
    def _record(self, **kw):
        args = dict(
            source="radius-lab",
            subject=LocalIdRef(ctxc="radius-lab", local_id="x"),
            context_type="radius.auth",
            payload={"k": 1},
            observed_at=NOW,
            received_at=NOW,
        )
        args.update(kw)
        return ContextRecord(**args)

    def test_round_trips_through_dict(self):
        rec = self._record(subject=CertRef(IssuerSerial("CN=Lab CA", "1f3a")))
        assert ContextRecord.from_dict(rec.to_dict()) == rec

    def test_observed_after_received_rejected(self):
        with pytest.raises(MalformedRecord):
            self._record(observed_at=NOW + timedelta(seconds=1))

    def test_empty_type_rejected(self):
        with pytest.raises(MalformedRecord):
            self._record(context_type="")

    def test_naive_timestamp_rejected(self):
        with pytest.raises(MalformedRecord):
            self._record(observed_at=NOW.replace(tzinfo=None))

    def test_non_scalar_payload_rejected(self):
        with pytest.raises(MalformedRecord):
            self._record(payload={"k": [1, 2]})

    @given(
        st.dictionaries(
            st.text(min_size=0, max_size=3),
            st.one_of(st.integers(), st.text(max_size=3), st.lists(st.integers(), max_size=2)),
            max_size=4,
        )
    )
    def test_constructor_enforces_invariants_on_arbitrary_payloads(self, payload):
        try:
            rec = self._record(payload=payload)
        except MalformedRecord:
            return
        for key, value in rec.payload.items():
            assert isinstance(key, str) and key
            assert value is None or isinstance(value, (str, int, float, bool))

    def test_subject_wire_round_trip(self):
        for subject in (
            PseudoIdRef("abc"),
            LocalIdRef(ctxc="c", local_id="l"),
            CertRef(IssuerSerial("CN=Lab CA", "2b")),
            CertRef(FullCert(Ca().issue_device("d").der)),
        ):
            assert subject_from_dict(subject_to_dict(subject)) == subject


class TestRfc3339:
    def test_round_trip_and_z_suffix(self):
        ts = datetime(2024, 1, 2, 3, 4, 5, tzinfo=UTC)
        assert to_rfc3339(ts).endswith("Z")
        assert from_rfc3339(to_rfc3339(ts)) == ts
        assert from_rfc3339("2024-01-02T03:04:05Z") == ts
        assert from_rfc3339("2024-01-02T04:04:05+01:00") == ts
