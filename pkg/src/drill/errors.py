"""Exception types shared across the package."""


class DrillError(Exception):
    """Base class for all package errors."""


# --- task loading ---

class MalformedSpec(DrillError):
    """Task document could not be parsed at all."""


class InvalidSpec(DrillError):
    """Task document parsed but violates an invariant; names the field."""

    def __init__(self, field: str, reason: str = ""):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}" if reason else field)


# --- sanitizer report parsing ---

class NoReport(DrillError):
    """No sanitizer error line found in the given text."""


class NoSourceFrames(DrillError):
    """Backtrace contains only raw binary addresses, no source locations."""


class RefinerFailure(DrillError):
    """Trace refiner agent exhausted its loop without a valid trace."""


# --- coverage ---

class ToolchainMissing(DrillError):
    """No usable coverage toolchain (external or built-in) for this request."""


class MalformedProfile(DrillError):
    """Raw profile merge or export failed; carries tool stderr."""


class UnknownFunction(DrillError):
    pass


class UnknownFile(DrillError):
    pass


class RangeOutOfBounds(DrillError):
    pass


# --- build ---

class PlanNotFound(DrillError):
    """Build-plan agent exhausted its turn cap without producing a plan."""


class BuildFailed(DrillError):
    def __init__(self, attempts: int, last_error_excerpt: str):
        self.attempts = attempts
        self.last_error_excerpt = last_error_excerpt
        super().__init__(f"build failed after {attempts} attempt(s)")


class BinaryNotFound(DrillError):
    """Entry point script references no existing binary in the build tree."""


class FileUnreadable(DrillError):
    pass


# --- llm gateway ---

class ProviderError(DrillError):
    def __init__(self, status: int, body_excerpt: str):
        self.status = status
        self.body_excerpt = body_excerpt
        super().__init__(f"provider returned {status}: {body_excerpt[:200]}")


class ReplayMismatch(DrillError):
    """Replay transcript digest did not match the actual request."""


class ReplayExhausted(DrillError):
    """Replay transcript ran out of scripted responses."""


# --- agent runtime ---

class UnknownTool(DrillError):
    pass


class ToolDenied(DrillError):
    """Tool exists but is not in the agent's allowed list."""


class PathEscape(DrillError):
    """Tool argument resolved to a path outside the task work directory."""


class TurnCapReached(DrillError):
    """Agent loop hit max_turns without calling finish."""


class AnalysisFailed(DrillError):
    """Vulnerability-analysis agent did not produce a usable report."""


# --- cli / reporting ---

class EmptyBatch(DrillError):
    pass


class EmptyInput(DrillError):
    pass
