"""Exception hierarchy.

Every error carries a short machine-readable ``code`` (used by the CLI's
``E:<code>:`` prefix) and the process exit status it maps to.
"""


class CatalogError(Exception):
    code = "ERROR"
    exit_status = 3


class UsageError(CatalogError):
    code = "USAGE"
    exit_status = 2


class NotFound(CatalogError):
    code = "NOT_FOUND"
    exit_status = 1


# -- model ------------------------------------------------------------------

class InvalidName(UsageError):
    code = "INVALID_NAME"


class EmptyName(InvalidName):
    code = "EMPTY_NAME"


class IllegalCharacter(InvalidName):
    code = "ILLEGAL_CHARACTER"


class TooLong(InvalidName):
    code = "TOO_LONG"


class InvalidRecord(UsageError):
    code = "INVALID_RECORD"


class TopologyError(CatalogError):
    code = "TOPOLOGY"


class UnknownSite(TopologyError):
    code = "UNKNOWN_SITE"
    exit_status = 2


class UnknownCluster(TopologyError):
    code = "UNKNOWN_CLUSTER"
    exit_status = 2


class MissingLinkCost(TopologyError):
    code = "MISSING_LINK_COST"


class DecodeError(CatalogError):
    """Bytes are not a valid canonical encoding."""

    code = "DECODE"


# -- store ------------------------------------------------------------------

class StoreError(CatalogError):
    code = "STORE"


class CorruptLog(StoreError):
    code = "CORRUPT_LOG"


class SiteMismatch(StoreError):
    code = "SITE_MISMATCH"


class OwnershipViolation(StoreError):
    code = "OWNERSHIP_VIOLATION"


class UnknownKey(StoreError):
    code = "UNKNOWN_KEY"
    exit_status = 1


class DuplicateKey(StoreError):
    code = "DUPLICATE_KEY"


class UnknownOrigin(StoreError):
    code = "UNKNOWN_ORIGIN"


class GapDetected(StoreError):
    """The requested range was pruned; the caller needs a snapshot."""

    code = "GAP"


class OutOfOrder(StoreError):
    code = "OUT_OF_ORDER"


class OriginIsSelf(StoreError):
    code = "ORIGIN_IS_SELF"


class DigestMismatch(StoreError):
    code = "DIGEST_MISMATCH"


# -- transport --------------------------------------------------------------

class TransportError(CatalogError):
    code = "TRANSPORT"


class Unreachable(TransportError):
    code = "UNREACHABLE"


class ConnectionRefused(Unreachable):
    code = "CONNECTION_REFUSED"


class HandshakeTimeout(Unreachable):
    code = "HANDSHAKE_TIMEOUT"


class ProtocolError(TransportError):
    code = "PROTOCOL"


class VersionMismatch(ProtocolError):
    code = "VERSION"


class FederationMismatch(ProtocolError):
    code = "FEDERATION"


class FrameTooLarge(ProtocolError):
    code = "FRAME_TOO_LARGE"


class GapNeedsSnapshot(TransportError):
    code = "GAP_NEEDS_SNAPSHOT"


# -- resolver ---------------------------------------------------------------

class EmptyPath(UsageError):
    code = "EMPTY_PATH"


class UnknownToken(UsageError):
    code = "UNKNOWN_TOKEN"
