"""Exception types shared across the package."""


class LapError(Exception):
    """Base class for contract violations surfaced to callers."""


class ShapeMismatch(LapError):
    def __init__(self, op, *shapes, detail=""):
        parts = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(LapError):
    """Input outside the mathematical domain of an operation."""


class TapeError(LapError):
    """Tensors from different tapes combined, or tape misuse."""


class ContractError(LapError):
    """Caller violated an operation precondition."""


class GradientAbsent(LapError):
    """Gradient requested for a tensor that is not tracked on the tape."""


class VerificationError(LapError):
    """The gradient-verification harness detected an inconsistent probe."""


class EmptyDomain(LapError):
    """A masked reduction was asked to average over zero pixels."""


class EmptyMask(EmptyDomain):
    """All mask weights are zero; the sample should have been filtered out."""


class StagingError(LapError):
    """Training stages run out of order or without their prerequisite checkpoint."""


class CapabilityError(LapError):
    """A checkpoint was asked for outputs its training stage cannot provide."""


class ConfigError(LapError):
    """Unknown or malformed configuration key/value."""


class FormatError(LapError):
    """Malformed binary file content (bad magic, version, or payload)."""


class DegenerateInput(LapError):
    """Statistic undefined for the given input (too few points, zero variance)."""
