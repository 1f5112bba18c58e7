"""Task specification, run configuration, and cross-module domain types.

A task document is a JSON file naming one target vulnerability in one
repository. Loading validates invariants and fills defaults; the loaded
values are immutable and freely shareable afterwards.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import InvalidSpec, MalformedSpec

# Phases, in fixed execution order.
PHASE_VULN_ANALYSIS = "vuln_analysis"
PHASE_INSTRUMENTATION = "instrumentation"
PHASE_PATH_EXPLORE = "path_explore"
PHASE_CRASH_TRIGGER = "crash_trigger"
PHASE_REFINE = "refine"

ALL_PHASES = (
    PHASE_VULN_ANALYSIS,
    PHASE_INSTRUMENTATION,
    PHASE_PATH_EXPLORE,
    PHASE_CRASH_TRIGGER,
    PHASE_REFINE,
)

# Generation phases sample with diversity; analysis phases stay near-greedy.
_DEFAULT_TEMPERATURES = {
    PHASE_VULN_ANALYSIS: 0.1,
    PHASE_INSTRUMENTATION: 0.1,
    PHASE_REFINE: 0.1,
    PHASE_PATH_EXPLORE: 0.7,
    PHASE_CRASH_TRIGGER: 0.7,
}

DEFAULT_BUDGET_USD = 1.50
DEFAULT_N1 = 10
DEFAULT_N2 = 10
DEFAULT_TOOL_OUTPUT_LIMIT = 8000
DEFAULT_EXEC_TIMEOUT_SECS = 60
DEFAULT_PRICE_IN = 3.0  # USD per 1M input tokens
DEFAULT_PRICE_OUT = 15.0  # USD per 1M output tokens


@dataclass(frozen=True)
class CrashKind:
    """A sanitizer error class, identified by its canonical token.

    Known classes are exposed as module-level constants; anything else is
    carried verbatim so unknown sanitizer errors stay distinguishable.
    """

    token: str

    def __post_init__(self):
        if not self.token:
            raise ValueError("CrashKind token must be non-empty")

    @property
    def is_known(self) -> bool:
        return self.token in _KNOWN_KIND_TOKENS

    @property
    def is_heap(self) -> bool:
        """Heap-related kinds carry allocation (and maybe free) backtraces."""
        return self.token in (
            "heap-buffer-overflow",
            "heap-use-after-free",
            "memory-leak",
        )

    @classmethod
    def from_token(cls, token: str) -> "CrashKind":
        token = token.strip()
        if not token:
            raise ValueError("empty crash kind token")
        return cls(_KIND_ALIASES.get(token, token))

    def __str__(self) -> str:
        return self.token


STACK_BUFFER_OVERFLOW = CrashKind("stack-buffer-overflow")
HEAP_BUFFER_OVERFLOW = CrashKind("heap-buffer-overflow")
USE_AFTER_FREE = CrashKind("heap-use-after-free")
NULL_DEREFERENCE = CrashKind("null-dereference")
MEMORY_LEAK = CrashKind("memory-leak")
GLOBAL_BUFFER_OVERFLOW = CrashKind("global-buffer-overflow")
USE_AFTER_RETURN = CrashKind("stack-use-after-return")

_KNOWN_KIND_TOKENS = frozenset(
    k.token
    for k in (
        STACK_BUFFER_OVERFLOW,
        HEAP_BUFFER_OVERFLOW,
        USE_AFTER_FREE,
        NULL_DEREFERENCE,
        MEMORY_LEAK,
        GLOBAL_BUFFER_OVERFLOW,
        USE_AFTER_RETURN,
    )
)

# Accepted spellings in task documents, normalized to canonical tokens.
_KIND_ALIASES = {
    "use-after-free": USE_AFTER_FREE.token,
    "null-deref": NULL_DEREFERENCE.token,
    "SEGV": NULL_DEREFERENCE.token,
    "detected memory leaks": MEMORY_LEAK.token,
    "leak": MEMORY_LEAK.token,
    "use-after-return": USE_AFTER_RETURN.token,
}


@dataclass(frozen=True)
class SourceLocation:
    file: str  # repo-relative path
    line: int
    function: Optional[str] = None

    def __post_init__(self):
        if not self.file:
            raise InvalidSpec("v_location.file", "must be non-empty")
        if self.line < 1:
            raise InvalidSpec("v_location.line", "must be >= 1")


@dataclass(frozen=True)
class VulnSpec:
    """Ground-truth target: where the bug lives and what effect it has."""

    project_id: str
    repo_path: Path
    v_location: SourceLocation
    v_effect: CrashKind
    sanitizer_report: Optional[str] = None
    cve_id: Optional[str] = None


@dataclass(frozen=True)
class ModelAssignment:
    model_id: str
    temperature: float
    price_in_per_mtok: float = DEFAULT_PRICE_IN
    price_out_per_mtok: float = DEFAULT_PRICE_OUT

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidSpec("models.temperature", "must be in [0, 2]")
        if self.price_in_per_mtok < 0 or self.price_out_per_mtok < 0:
            raise InvalidSpec("models.pricing", "must be nonnegative")


@dataclass(frozen=True)
class TaskConfig:
    budget_usd: float = DEFAULT_BUDGET_USD
    n1_max_iterations: int = DEFAULT_N1
    n2_max_iterations: int = DEFAULT_N2
    model_assignments: dict[str, ModelAssignment] = field(default_factory=dict)
    tool_output_limit_chars: int = DEFAULT_TOOL_OUTPUT_LIMIT
    exec_timeout_secs: int = DEFAULT_EXEC_TIMEOUT_SECS
    work_dir: Optional[Path] = None
    early_exit_pe: bool = False
    match_frames: int = 3  # K innermost frames eligible for a location match
    match_line_tolerance: int = 2  # L max |line delta| for a frame match

    def __post_init__(self):
        if self.budget_usd <= 0:
            raise InvalidSpec("budget_usd", "must be > 0")
        if self.n1_max_iterations < 1:
            raise InvalidSpec("n1", "must be >= 1")
        if self.n2_max_iterations < 1:
            raise InvalidSpec("n2", "must be >= 1")
        if self.tool_output_limit_chars < 1:
            raise InvalidSpec("tool_output_limit_chars", "must be >= 1")
        if self.exec_timeout_secs < 1:
            raise InvalidSpec("exec_timeout_secs", "must be >= 1s")
        for phase in ALL_PHASES:
            if phase not in self.model_assignments:
                raise InvalidSpec("models", f"phase {phase!r} has no model assignment")

    def model_for(self, phase: str) -> ModelAssignment:
        return self.model_assignments[phase]


@dataclass(frozen=True)
class PhaseStats:
    wall_time_secs: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0
    cost_usd: float = 0.0


@dataclass(frozen=True)
class TaskReport:
    verdict: str  # "validated" | "variant" | "nocrash"
    pov_path: Optional[Path] = None
    useful_tc_count: int = 0
    n1_used: int = 0
    n2_used: int = 0
    cost_usd: float = 0.0
    wall_time_secs: float = 0.0
    phase_breakdown: dict[str, PhaseStats] = field(default_factory=dict)
    failing_phase: Optional[str] = None
    failure_reason: Optional[str] = None
    observed_kind: Optional[str] = None
    flaky: bool = False
    project_id: str = ""

    def __post_init__(self):
        if self.verdict in ("validated", "variant") and self.pov_path is None:
            raise ValueError("crash verdicts require a pov_path")
        if self.cost_usd < 0:
            raise ValueError("cost_usd must be >= 0")

    def to_document(self) -> dict:
        return {
            "project_id": self.project_id,
            "verdict": self.verdict,
            "pov_path": str(self.pov_path) if self.pov_path else None,
            "useful_tc_count": self.useful_tc_count,
            "iterations_used": {"n1": self.n1_used, "n2": self.n2_used},
            "cost_usd": round(self.cost_usd, 6),
            "wall_time_secs": self.wall_time_secs,
            "phase_breakdown": {
                phase: {
                    "wall_time_secs": st.wall_time_secs,
                    "input_tokens": st.input_tokens,
                    "output_tokens": st.output_tokens,
                    "cost_usd": round(st.cost_usd, 6),
                }
                for phase, st in self.phase_breakdown.items()
            },
            "failing_phase": self.failing_phase,
            "failure_reason": self.failure_reason,
            "observed_kind": self.observed_kind,
            "flaky": self.flaky,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "TaskReport":
        iters = doc.get("iterations_used", {})
        breakdown = {
            phase: PhaseStats(
                wall_time_secs=st.get("wall_time_secs", 0.0),
                input_tokens=st.get("input_tokens", 0),
                output_tokens=st.get("output_tokens", 0),
                cost_usd=st.get("cost_usd", 0.0),
            )
            for phase, st in doc.get("phase_breakdown", {}).items()
        }
        return cls(
            verdict=doc["verdict"],
            pov_path=Path(doc["pov_path"]) if doc.get("pov_path") else None,
            useful_tc_count=doc.get("useful_tc_count", 0),
            n1_used=iters.get("n1", 0),
            n2_used=iters.get("n2", 0),
            cost_usd=doc.get("cost_usd", 0.0),
            wall_time_secs=doc.get("wall_time_secs", 0.0),
            phase_breakdown=breakdown,
            failing_phase=doc.get("failing_phase"),
            failure_reason=doc.get("failure_reason"),
            observed_kind=doc.get("observed_kind"),
            flaky=doc.get("flaky", False),
            project_id=doc.get("project_id", ""),
        )


_BUILD_RELEVANT = (
    "Makefile",
    "makefile",
    "GNUmakefile",
    "configure",
    "CMakeLists.txt",
    "build.sh",
)


def _has_build_relevant_file(repo: Path) -> bool:
    for name in _BUILD_RELEVANT:
        if (repo / name).exists():
            return True
    for pattern in ("*.c", "*.cc", "*.cpp", "README*"):
        if next(repo.glob(pattern), None) is not None:
            return True
        if next(repo.glob("*/" + pattern), None) is not None:
            return True
    return False


def default_model_assignments(
    model_id: str = "default", overrides: Optional[dict] = None
) -> dict[str, ModelAssignment]:
    """One assignment per phase, with the stock per-phase temperatures."""
    out = {}
    overrides = overrides or {}
    for phase in ALL_PHASES:
        o = overrides.get(phase, {})
        out[phase] = ModelAssignment(
            model_id=o.get("model", model_id),
            temperature=o.get("temperature", _DEFAULT_TEMPERATURES[phase]),
            price_in_per_mtok=o.get("price_in_per_mtok", DEFAULT_PRICE_IN),
            price_out_per_mtok=o.get("price_out_per_mtok", DEFAULT_PRICE_OUT),
        )
    return out


def load_task_spec(path: Path | str) -> tuple[VulnSpec, TaskConfig]:
    """Load and validate a task document, filling defaults for omitted keys.

    Raises MalformedSpec on parse failure and InvalidSpec (naming the field)
    on invariant violations.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise MalformedSpec(f"cannot read {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedSpec(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise MalformedSpec(f"{path}: top level must be an object")
    return parse_task_document(doc, base_dir=path.parent)


def parse_task_document(doc: dict, base_dir: Path) -> tuple[VulnSpec, TaskConfig]:
    repo_raw = doc.get("repo_path")
    if not repo_raw:
        raise InvalidSpec("repo_path", "missing")
    repo_path = Path(repo_raw)
    if not repo_path.is_absolute():
        repo_path = (base_dir / repo_path).resolve()
    if not repo_path.is_dir():
        raise InvalidSpec("repo_path", f"{repo_path} does not exist")
    if not _has_build_relevant_file(repo_path):
        raise InvalidSpec("repo_path", "contains no build-relevant file")

    loc_doc = doc.get("v_location")
    if not isinstance(loc_doc, dict):
        raise InvalidSpec("v_location", "missing or not an object")
    if "file" not in loc_doc or not loc_doc["file"]:
        raise InvalidSpec("v_location.file", "missing")
    if "line" not in loc_doc:
        raise InvalidSpec("v_location.line", "missing")
    if Path(loc_doc["file"]).is_absolute():
        raise InvalidSpec("v_location.file", "must be repo-relative")
    try:
        line = int(loc_doc["line"])
    except (TypeError, ValueError):
        raise InvalidSpec("v_location.line", "must be an integer")
    location = SourceLocation(
        file=str(loc_doc["file"]), line=line, function=loc_doc.get("function")
    )

    effect_raw = doc.get("v_effect")
    if not effect_raw:
        raise InvalidSpec("v_effect", "missing")
    v_effect = CrashKind.from_token(str(effect_raw))

    spec = VulnSpec(
        project_id=str(doc.get("project_id", repo_path.name)),
        repo_path=repo_path,
        v_location=location,
        v_effect=v_effect,
        sanitizer_report=doc.get("sanitizer_report"),
        cve_id=doc.get("cve_id"),
    )

    models_doc = doc.get("models") or {}
    if not isinstance(models_doc, dict):
        raise InvalidSpec("models", "must be an object")
    assignments = default_model_assignments(
        model_id=models_doc.get("default", {}).get("model", "default")
        if isinstance(models_doc.get("default"), dict)
        else "default",
        overrides={k: v for k, v in models_doc.items() if k in ALL_PHASES},
    )

    work_dir = doc.get("work_dir")
    config = TaskConfig(
        budget_usd=float(doc.get("budget_usd", DEFAULT_BUDGET_USD)),
        n1_max_iterations=int(doc.get("n1", DEFAULT_N1)),
        n2_max_iterations=int(doc.get("n2", DEFAULT_N2)),
        model_assignments=assignments,
        tool_output_limit_chars=int(
            doc.get("tool_output_limit_chars", DEFAULT_TOOL_OUTPUT_LIMIT)
        ),
        exec_timeout_secs=int(doc.get("exec_timeout_secs", DEFAULT_EXEC_TIMEOUT_SECS)),
        work_dir=Path(work_dir) if work_dir else None,
        early_exit_pe=bool(doc.get("early_exit_pe", False)),
        match_frames=int(doc.get("match_frames", 3)),
        match_line_tolerance=int(doc.get("match_line_tolerance", 2)),
    )
    return spec, config


def dump_task_document(spec: VulnSpec, config: TaskConfig) -> dict:
    """Inverse of parse_task_document; round-trips through load."""
    models = {
        phase: {
            "model": a.model_id,
            "temperature": a.temperature,
            "price_in_per_mtok": a.price_in_per_mtok,
            "price_out_per_mtok": a.price_out_per_mtok,
        }
        for phase, a in config.model_assignments.items()
    }
    doc = {
        "project_id": spec.project_id,
        "repo_path": str(spec.repo_path),
        "v_location": {
            "file": spec.v_location.file,
            "line": spec.v_location.line,
        },
        "v_effect": spec.v_effect.token,
        "budget_usd": config.budget_usd,
        "n1": config.n1_max_iterations,
        "n2": config.n2_max_iterations,
        "models": models,
        "tool_output_limit_chars": config.tool_output_limit_chars,
        "exec_timeout_secs": config.exec_timeout_secs,
        "match_frames": config.match_frames,
        "match_line_tolerance": config.match_line_tolerance,
    }
    if spec.v_location.function:
        doc["v_location"]["function"] = spec.v_location.function
    if spec.sanitizer_report is not None:
        doc["sanitizer_report"] = spec.sanitizer_report
    if spec.cve_id:
        doc["cve_id"] = spec.cve_id
    if config.work_dir:
        doc["work_dir"] = str(config.work_dir)
    if config.early_exit_pe:
        doc["early_exit_pe"] = True
    return doc


def with_overrides(config: TaskConfig, **kwargs) -> TaskConfig:
    """A copy of config with the given fields replaced (CLI flag overrides)."""
    return replace(config, **kwargs)
