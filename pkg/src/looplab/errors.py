"""Exception hierarchy shared across the package."""

from __future__ import annotations


class LooplabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(LooplabError):
    """Invalid pipeline configuration; names the offending field."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class TaskParseError(LooplabError):
    """Task file missing or malformed; names the missing field."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


# --- block protocol ---------------------------------------------------------


class DecisionParseError(LooplabError):
    """decision_json body could not be mapped to a valid decision."""


class StatusParseError(LooplabError):
    """status body is neither CONTINUE nor FINISH."""


# --- chat gateway -----------------------------------------------------------


class GatewayError(LooplabError):
    """Base class for chat-provider failures."""


class TransportError(GatewayError):
    """Transport failure that persisted through the retry budget."""


class AuthError(GatewayError):
    """Endpoint rejected the configured credential."""


class ScriptExhausted(GatewayError):
    """Scripted provider has no entry matching the request."""


class TranscriptError(GatewayError):
    """Transcript file violates the documented format."""


# --- interpreter session ----------------------------------------------------


class SessionError(LooplabError):
    """Base class for interpreter-session failures."""


class SpawnError(SessionError):
    """Interpreter command could not be started."""


class HandshakeTimeout(SessionError):
    """Child process never answered the startup handshake."""


class SessionDead(SessionError):
    """Fragment submitted to a session that is no longer usable."""


class FrameProtocolError(SessionError):
    """Child exited or misbehaved before echoing the frame sentinel."""


# --- agent drivers ----------------------------------------------------------


class ProfileFormatError(LooplabError):
    """Data agent never produced a well-formed analysis report."""


class PlanFormatError(LooplabError):
    """Design agent never produced a well-formed plan or review."""


class FeedbackFormatError(LooplabError):
    """Feedback phase never produced a well-formed feedback report."""


class SectionFormatError(LooplabError):
    """Report agent never produced a well-formed section or assembly."""


class CompileGaveUp(LooplabError):
    """Document compilation exhausted its fix budget; source persisted."""


# --- scoring ----------------------------------------------------------------


class ScoreError(LooplabError):
    """Base class for scoring-toolkit errors."""


class DomainError(ScoreError):
    """Value outside the metric's legal domain."""


class EmptyInput(ScoreError):
    """Metric requested over an empty prediction list."""


class MixedNominal(ScoreError):
    """Interval predictions disagree on the nominal coverage level."""
