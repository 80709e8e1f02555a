"""Error taxonomy shared by all modules.

Every error a subcommand can surface carries a distinct process exit
code so scripted scenarios (notably attack runs) can assert on the
exact failure class.
"""


class PrivcamError(Exception):
    """Base class; ``exit_code`` is the CLI process exit status."""

    exit_code = 1


# --- key tree ---------------------------------------------------------------

class ParentIsLeafError(PrivcamError):
    exit_code = 30


class BeforeOriginError(PrivcamError):
    exit_code = 31


class BeyondLifespanError(PrivcamError):
    exit_code = 32


class RangeInvalidError(PrivcamError):
    exit_code = 33


class NoAccessError(PrivcamError):
    exit_code = 15


class MalformedStoreError(PrivcamError):
    exit_code = 34


class VersionMismatchError(PrivcamError):
    exit_code = 35


class KeyWipedError(PrivcamError):
    exit_code = 36


# --- stream crypto ----------------------------------------------------------

class EpochMismatchError(PrivcamError):
    exit_code = 40


class EmptyBlockError(PrivcamError):
    exit_code = 41


class NonMonotonicTimestampsError(PrivcamError):
    exit_code = 42


class TagMismatchError(PrivcamError):
    exit_code = 17


class SignatureInvalidError(PrivcamError):
    exit_code = 18


class MalformedBlockError(PrivcamError):
    exit_code = 43


# --- protocols --------------------------------------------------------------

class HashMismatchError(PrivcamError):
    exit_code = 10


class ProofFailureError(PrivcamError):
    exit_code = 11


class BadSignatureError(PrivcamError):
    exit_code = 12


class ReplayDetectedError(PrivcamError):
    exit_code = 13


class StaleRequestError(PrivcamError):
    exit_code = 14


class BadPassphraseError(PrivcamError):
    exit_code = 16


class NotInitializedError(PrivcamError):
    exit_code = 44


class AckTimeoutError(PrivcamError):
    exit_code = 45


class ProtocolStateError(PrivcamError):
    """Session driven out of order or message malformed for its phase."""

    exit_code = 46


# --- transport --------------------------------------------------------------

class ChannelClosedError(PrivcamError):
    exit_code = 50


class ChannelEmptyError(PrivcamError):
    exit_code = 51


class ChannelTamperedError(PrivcamError):
    exit_code = 19


class DroppedError(PrivcamError):
    """A required message never arrived; surfaces as a step timeout."""

    exit_code = 52


class AdversaryNotPermittedError(PrivcamError):
    """Rule not allowed on this channel kind (visual permits drop only)."""

    exit_code = 53


# --- storage ----------------------------------------------------------------

class StorageFullError(PrivcamError):
    exit_code = 60


class StorageIoError(PrivcamError):
    exit_code = 61


class BlockNotFoundError(PrivcamError):
    exit_code = 62


class StorageUnavailableError(PrivcamError):
    exit_code = 63


# Failure-reason string -> exception class, used where state machines
# record a reason and a caller wants to re-raise it.
FAILURE_EXCEPTIONS = {
    "hash_mismatch": HashMismatchError,
    "proof_failure": ProofFailureError,
    "bad_signature": BadSignatureError,
    "replay_detected": ReplayDetectedError,
    "stale_request": StaleRequestError,
    "channel_tampered": ChannelTamperedError,
    "timeout": DroppedError,
    "no_access": NoAccessError,
    "bad_passphrase": BadPassphraseError,
    "not_initialized": NotInitializedError,
}


def exception_for_failure(reason: str) -> PrivcamError:
    """Map a session failure reason like ``"hash_mismatch: step 2"`` to an error."""
    head = reason.split(":", 1)[0].strip()
    cls = FAILURE_EXCEPTIONS.get(head, PrivcamError)
    return cls(reason)
