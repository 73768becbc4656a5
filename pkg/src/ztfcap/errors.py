"""Error taxonomy shared by every layer of the CAP.

Each error carries a stable ``code`` string so the HTTP layer and the CLI
can map failures without string-matching messages.
"""

from __future__ import annotations


class ZtfError(Exception):
    code = "internal"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# -- core model ------------------------------------------------------------

class MalformedDn(ZtfError):
    code = "MalformedDn"


class MalformedSerial(ZtfError):
    code = "MalformedSerial"


class MalformedCertificate(ZtfError):
    code = "MalformedCertificate"


class MalformedRecord(ZtfError):
    code = "MalformedRecord"


# -- registries ------------------------------------------------------------

class UnknownCapId(ZtfError):
    code = "UnknownCapId"


class UnknownCtxC(ZtfError):
    code = "UnknownCtxC"


class UnknownRp(ZtfError):
    code = "UnknownRp"


class AuthFailed(ZtfError):
    code = "AuthFailed"


# -- pseudo-ID tokens --------------------------------------------------------

class BadSignature(ZtfError):
    code = "BadSignature"


class WrongAudience(ZtfError):
    code = "WrongAudience"


class Expired(ZtfError):
    code = "Expired"


# -- certificate challenge protocol -----------------------------------------

class UnknownChallenge(ZtfError):
    code = "UnknownChallenge"


class ChallengeExpired(ZtfError):
    code = "ChallengeExpired"


class ChallengeReplayed(ZtfError):
    code = "ChallengeReplayed"


class BadPopSignature(ZtfError):
    code = "BadPopSignature"


class UntrustedChain(ZtfError):
    code = "UntrustedChain"


class CertificateExpired(ZtfError):
    code = "CertificateExpired"


class BindingConflict(ZtfError):
    code = "BindingConflict"


class NoSuchBinding(ZtfError):
    code = "NoSuchBinding"


# -- ingestion ---------------------------------------------------------------

class RejectedAuthNotContextual(ZtfError):
    code = "RejectedAuthNotContextual"


class MdmUnavailable(ZtfError):
    code = "MdmUnavailable"


class MdmAuthFailed(ZtfError):
    code = "MdmAuthFailed"


# -- consent / provision -----------------------------------------------------

class EmptyPrefixSet(ZtfError):
    code = "EmptyPrefixSet"


class NoSuchConsent(ZtfError):
    code = "NoSuchConsent"


class ConsentDenied(ZtfError):
    code = "ConsentDenied"
