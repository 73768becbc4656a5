"""ztfcap: a Context Attribute Provider for zero trust federations.

Links subject identifiers from heterogeneous context collectors (RADIUS,
MDM, ...) to federation-wide identities and serves the collected
contexts to relying parties under user consent.
"""

__version__ = "0.1.0"

from .service import CapConfig, CapService  # noqa: F401
from .api import create_app  # noqa: F401
