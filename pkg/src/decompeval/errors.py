"""Exception types shared across the pipeline.

Candidate failures (a decompiled function that will not compile, run, or
match) are recorded as data, never raised.  Exceptions here signal broken
inputs, broken environment, or contract violations.
"""


class DecompEvalError(Exception):
    """Base class for all harness errors."""


# --- corpus / manifest ---

class ParseError(DecompEvalError):
    pass


class MissingFile(DecompEvalError):
    pass


class DuplicateSymbol(DecompEvalError):
    pass


class ToolchainError(DecompEvalError):
    """Compiler or linker broke on inputs that corpus validation accepted."""


# --- decompiler adapters ---

class ToolUnavailable(DecompEvalError):
    pass


class ToolCrash(DecompEvalError):
    def __init__(self, message, output=""):
        super().__init__(message)
        self.output = output


class EmptyOutput(DecompEvalError):
    pass


# --- binary manipulation ---

class SymbolNotFoundInCode(DecompEvalError):
    pass


class SymbolMissing(DecompEvalError):
    pass


class MalformedBinary(DecompEvalError):
    pass


class AddressNotEncodable(DecompEvalError):
    pass


class PatchTooLarge(DecompEvalError):
    pass


class SubstitutionUnsupported(DecompEvalError):
    """Target function is too small to hold the prologue patch."""


class UnresolvableSymbol(DecompEvalError):
    """Undefined in the shared object and not implemented in the binary."""

    def __init__(self, symbol):
        super().__init__(f"symbol defined nowhere: {symbol!r}")
        self.symbol = symbol


class WriteFailure(DecompEvalError):
    pass


# --- coverage ---

class SeedMismatch(DecompEvalError):
    pass


class EmptyGroup(DecompEvalError):
    pass


# --- judge / arena ---

class EmptyCandidateSet(DecompEvalError):
    pass


class MalformedResponse(DecompEvalError):
    pass


class MissingCriterion(DecompEvalError):
    pass


class UnknownLabel(DecompEvalError):
    pass


class PairMismatch(DecompEvalError):
    pass


class UnregisteredDecompiler(DecompEvalError):
    pass


class LengthMismatch(DecompEvalError):
    pass


class DegenerateMarginals(DecompEvalError):
    """Chance agreement is 1 while observed agreement is not."""


# --- reporting / orchestration ---

class RunIdMismatch(DecompEvalError):
    pass


class ConfigError(DecompEvalError):
    pass


class StageFailure(DecompEvalError):
    def __init__(self, stage, message, artifact=None):
        super().__init__(f"stage {stage!r} failed: {message}"
                         + (f" (see {artifact})" if artifact else ""))
        self.stage = stage
        self.artifact = artifact


class PlatformSkip(DecompEvalError):
    """Execution stage requested on a host that cannot run it."""
