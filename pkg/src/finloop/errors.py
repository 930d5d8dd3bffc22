"""Exception types shared across the package."""

from __future__ import annotations


class FinloopError(Exception):
    """Base class for every error this package raises on purpose."""


class ContractError(FinloopError):
    """A request or value violates an interface contract."""


class AuthError(FinloopError):
    """The backend rejected the supplied credential."""


class TransportError(FinloopError):
    """All transport attempts for a single backend call failed."""


class BudgetExceeded(FinloopError):
    """The next call would push usage past the configured token ceiling."""


class SchemaError(FinloopError):
    """A dataset record is malformed; the message names the offending line."""


class EmptyCorpus(FinloopError):
    """An operation that needs at least one example got none."""


class ParseError(FinloopError):
    """Generated text is missing a required section."""


class AnswerNotNumeric(FinloopError):
    """The answer section of a generated sample is not a bare number."""


class RegenerationExhausted(FinloopError):
    """Every regeneration attempt for one example was rejected."""

    def __init__(self, reasons: list[str]):
        self.reasons = list(reasons)
        super().__init__(
            "no candidate accepted after %d attempts: %s"
            % (len(self.reasons), "; ".join(self.reasons) or "no attempts made")
        )


class EmptySet(FinloopError):
    """Accuracy was requested over zero examples."""


class EmptyRevision(FinloopError):
    """The reviser returned an empty prompt."""


class LengthExceeded(FinloopError):
    """The revised prompt is longer than the configured cap."""


class InnerBudgetExhausted(FinloopError):
    """A single error slice could not be repaired within ``inner_cap`` revisions."""


class LedgerError(FinloopError):
    """The run ledger is corrupt or inconsistent."""


class ConfigError(FinloopError):
    """The run configuration is invalid or incomplete."""
