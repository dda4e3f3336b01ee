# Exception hierarchy shared by every module.
# An error's class name doubles as its reason code in traces and results.


class SimError(Exception):
    """Base class for all protocol and harness errors"""

    @property
    def code(self):
        return type(self).__name__


class ConfigError(SimError):
    pass


class UnknownPrincipal(SimError):
    pass


# identity-core

class SchemaError(SimError):
    pass


class NormalizationError(SimError):
    pass


# device-authenticator

class GateLocked(SimError):
    pass


class GateLockout(SimError):
    pass


class NoCredential(SimError):
    pass


class NotFound(SimError):
    pass


class IntegrityError(SimError):
    pass


# federation-engine

class UnknownClient(SimError):
    pass


class ReplayDetected(SimError):
    pass


class ConsentDenied(SimError):
    pass


class AuthenticationFailed(SimError):
    pass


class AudienceMismatch(SimError):
    pass


class CsrfRejected(SimError):
    pass


class AlreadyClaimed(SimError):
    pass


class Expired(SimError):
    pass


class AccountLocked(SimError):
    pass


class AccessDenied(SimError):
    pass


# pabac-credentials

class AttributeNotVerified(SimError):
    pass


class TokenSpent(SimError):
    pass


class NoSuchAttribute(SimError):
    pass


class NoCoveringToken(SimError):
    pass


class PresentationRejected(AuthenticationFailed):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"Presentation rejected: {reason}")


class TentativeAccessDenied(SimError):
    pass


# baa-engine

class FeatureDimensionError(SimError):
    pass


class ProfileNotTrained(SimError):
    pass


class RateLimited(SimError):
    pass


class VerdictPending(SimError):
    pass


# idc-consolidator

class NoBaaRegistered(SimError):
    pass


class NoVerifier(SimError):
    pass


class DocumentParseError(SimError):
    pass


class RecoveryDenied(SimError):
    pass


class IllegalTransition(SimError):
    pass


class WeakPassword(SimError):
    pass


class McCheckFailed(SimError):
    """The MNO did not confirm a lost-device report and SIM reissue"""


# risk-analyzer

class UndefinedRisk(SimError):
    """No population row matches the conditioning set, so no score is defined"""


# simnet-harness

class ScenarioError(SimError):
    """A scenario file that cannot be run.

    path is the file, or the offending key path when the document came from a dict;
    field keeps that key path once the error is tied back to a file.
    """

    def __init__(self, message, line=None, path=None, field=None):
        self.reason = message
        self.line = line
        self.path = path
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        if path is not None:
            where.append(path)
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class BenchmarkInvalid(SimError):
    pass
