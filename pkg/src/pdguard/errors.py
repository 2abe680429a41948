"""Exception hierarchy shared by every pdguard component.

The CLI prints ``type(exc).__name__`` on failure, so class names double as
the machine-readable error identifiers.
"""

from __future__ import annotations


class PdError(Exception):
    """Base class for all domain errors."""


# -- declaration language ---------------------------------------------------

class DslSyntaxError(PdError):
    def __init__(self, message: str, line: int = 0, column: int = 0,
                 expected: frozenset[str] | set[str] = frozenset()):
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        where = f"{line}:{column}: " if line else ""
        hint = ""
        if self.expected:
            hint = " (expected one of: " + ", ".join(sorted(self.expected)) + ")"
        super().__init__(f"{where}{message}{hint}")


class DuplicateName(PdError):
    pass


class UnknownField(PdError):
    def __init__(self, owner: str, field: str):
        self.owner = owner
        self.field = field
        super().__init__(f"{owner}: unknown field {field!r}")


class UnknownView(PdError):
    def __init__(self, purpose: str, view: str):
        self.purpose = purpose
        self.view = view
        super().__init__(f"{purpose}: unknown view {view!r}")


class DuplicateType(PdError):
    pass


class UnknownType(PdError):
    pass


# -- store ------------------------------------------------------------------

class MissingMembrane(PdError):
    pass


class TypeMismatch(PdError):
    pass


class UnknownRef(PdError):
    pass


class RefTombstoned(PdError):
    pass


class NoneView(PdError):
    pass


class NoAuthorityKey(PdError):
    pass


class CapabilityError(PdError):
    pass


class StoreLocked(PdError):
    pass


class StoreCorrupt(PdError):
    pass


# -- membranes --------------------------------------------------------------

class MixedGroups(PdError):
    pass


class EmptyInputs(PdError):
    pass


# -- processings ------------------------------------------------------------

class MissingPurpose(PdError):
    pass


class RegistrationAlert(PdError):
    """Static field access exceeds the declared view; needs operator approval."""

    def __init__(self, processing_id: str, extra_fields: frozenset[str]):
        self.processing_id = processing_id
        self.extra_fields = frozenset(extra_fields)
        super().__init__(
            f"{processing_id}: implementation reads fields outside its declared "
            f"view: {', '.join(sorted(self.extra_fields))}; re-register with approval"
        )


class UnknownProcessing(PdError):
    pass


class DuplicateProcessing(PdError):
    pass


class UnknownSource(PdError):
    pass


CollectionSourceUnknown = UnknownSource


class ProcessingFault(PdError):
    """Raised while evaluating a processing on one record."""


class AbsentFieldRead(ProcessingFault):
    pass


class DivisionByZero(ProcessingFault):
    pass


class TypeFault(ProcessingFault):
    pass


class ArithmeticOverflow(ProcessingFault):
    pass


# -- rights and audit -------------------------------------------------------

class UnknownSubject(PdError):
    pass


class KeyParseError(PdError):
    pass


class DecryptFailure(PdError):
    pass


class AuditIntegrityError(PdError):
    pass
