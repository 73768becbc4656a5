"""Simulated federation used for end-to-end and property testing.

Provides a throwaway PKI, device agents that answer link challenges, a
RADIUS detail-file forwarder, a mock MDM inventory server, a webhook
receiver and a scripted scenario runner. Everything binds to loopback
with ephemeral ports so the whole suite is self-contained.
"""

from .pki import DeviceCredential, TestCa, gen_test_pki  # noqa: F401
from .agent import DeviceAgent  # noqa: F401
