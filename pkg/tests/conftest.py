import pytest
from fastapi.testclient import TestClient

from ztfcap.api import create_app
from ztfcap.service import CapConfig, CapService
from ztfcap.harness.pki import TestCa

ADMIN_TOKEN = "test-admin-token"


@pytest.fixture
def ca():
    return TestCa()


@pytest.fixture
def service(ca):
    svc = CapService(
        CapConfig(admin_token=ADMIN_TOKEN, webhook_retry_schedule=(0.05, 0.1, 0.2))
    )
    svc.linking.add_trust_anchor(ca.cert)
    yield svc
    svc.close()


@pytest.fixture
def client(service):
    return TestClient(create_app(service))


@pytest.fixture
def admin_headers():
    return {"Authorization": f"Bearer {ADMIN_TOKEN}"}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
