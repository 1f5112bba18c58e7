"""Instrumented builds: plan extraction, flag injection, compile-retry loop.

Produces the two binaries the feedback loop needs: a coverage-instrumented
one and a sanitizer-instrumented one, each built in its own pristine copy of
the repository. A byte-level marker scan guards against builds that compiled
fine but silently dropped the instrumentation flags.
"""
from __future__ import annotations

import json
import os
import re
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import taskmodel
from .errors import BinaryNotFound, BuildFailed, FileUnreadable, PlanNotFound
from .taskmodel import CrashKind

COVERAGE_FLAGS = "-fprofile-instr-generate -fcoverage-mapping"
# Debug info uses DWARF 4 so the runtime's addr2line fallback can symbolize
# reports on hosts without llvm-symbolizer.
SANITIZER_FLAGS = {
    "address": "-fsanitize=address -fno-omit-frame-pointer -gdwarf-4",
    "undefined": "-fsanitize=undefined -fno-sanitize-recover=all -fno-omit-frame-pointer -gdwarf-4",
}

COVERAGE_MARKERS = (b"__llvm_profile", b"__llvm_covmap")
SANITIZER_MARKERS = (b"__sanitizer", b"__asan")

BUILD_STEP_TIMEOUT_SECS = 600
DEFAULT_MAX_ATTEMPTS = 4


@dataclass(frozen=True)
class InstrumentationKind:
    mode: str  # "coverage" | "sanitizer"
    flavor: Optional[str] = None  # sanitizer: "address" | "undefined"

    @classmethod
    def coverage(cls) -> "InstrumentationKind":
        return cls("coverage")

    @classmethod
    def sanitizer(cls, flavor: str = "address") -> "InstrumentationKind":
        if flavor not in SANITIZER_FLAGS:
            raise ValueError(f"unsupported sanitizer flavor {flavor!r}")
        return cls("sanitizer", flavor)

    @classmethod
    def sanitizer_for_effect(cls, effect: CrashKind) -> "InstrumentationKind":
        if effect.token == "undefined-behavior":
            return cls.sanitizer("undefined")
        # Memory kinds, including leaks: leak detection is an address-build
        # runtime option, not a separate build.
        return cls.sanitizer("address")

    @property
    def flags(self) -> str:
        if self.mode == "coverage":
            return COVERAGE_FLAGS
        return SANITIZER_FLAGS[self.flavor or "address"]

    @property
    def markers(self) -> tuple[bytes, ...]:
        return COVERAGE_MARKERS if self.mode == "coverage" else SANITIZER_MARKERS


@dataclass(frozen=True)
class BuildPlan:
    steps: tuple[str, ...]
    env: dict[str, str] = field(default_factory=dict)
    entry_point: str = ""
    workdir: Optional[Path] = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a build plan needs at least one step")

    def to_document(self) -> dict:
        return {
            "steps": list(self.steps),
            "env": dict(self.env),
            "entry_point": self.entry_point,
        }

    @classmethod
    def from_document(cls, doc: dict, workdir: Optional[Path] = None) -> "BuildPlan":
        steps = doc.get("steps") or []
        if not steps or not all(isinstance(s, str) for s in steps):
            raise ValueError("plan steps must be a non-empty list of strings")
        return cls(
            steps=tuple(steps),
            env={str(k): str(v) for k, v in (doc.get("env") or {}).items()},
            entry_point=str(doc.get("entry_point", "")),
            workdir=workdir,
        )


@dataclass(frozen=True)
class BuildResult:
    success: bool
    binary_path: Optional[Path]
    attempts: int
    last_error_excerpt: str = ""
    effective: bool = False

    def __post_init__(self):
        if self.success and self.binary_path is None:
            raise ValueError("successful builds must name the binary")


def _prepend_flags(existing: str, flags: str) -> str:
    missing = [f for f in flags.split() if f not in existing.split()]
    if not missing:
        return existing
    return (" ".join(missing) + " " + existing).strip()


def inject_flags(plan: BuildPlan, kind: InstrumentationKind) -> BuildPlan:
    """Prepend the kind's compiler flags to CFLAGS/CXXFLAGS/LDFLAGS and pin a
    coverage-capable compiler. Steps are untouched; applying twice is a no-op."""
    env = dict(plan.env)
    for var in ("CFLAGS", "CXXFLAGS", "LDFLAGS"):
        env[var] = _prepend_flags(env.get(var, ""), kind.flags)
    env.setdefault("CC", "clang")
    env.setdefault("CXX", "clang++")
    return replace(plan, env=env)


def check_instrumentation(binary: Path, kind: InstrumentationKind) -> bool:
    """Byte-scan for the kind's characteristic marker strings."""
    binary = Path(binary)
    try:
        data = binary.read_bytes()
    except OSError as e:
        raise FileUnreadable(f"{binary}: {e}") from e
    return any(marker in data for marker in kind.markers)


_PATH_TOKEN = re.compile(r"(?:\./)?[\w./+-]+")


def resolve_entry_binary(entry: Path) -> Path:
    """The actual executable: the entry itself, or the first binary a wrapper
    script references inside the build tree."""
    entry = Path(entry)
    if not entry.exists():
        raise BinaryNotFound(f"{entry} does not exist")
    if _is_elf(entry):
        return entry
    tree = entry.parent.resolve()
    try:
        text = entry.read_text(errors="replace")
    except OSError as e:
        raise FileUnreadable(f"{entry}: {e}") from e
    for token in _PATH_TOKEN.findall(text):
        if token.startswith("/"):
            candidate = Path(token)
            if tree not in candidate.resolve().parents:
                continue
        else:
            candidate = tree / token
        if candidate.is_file() and _is_elf(candidate):
            return candidate
    raise BinaryNotFound(f"{entry} references no binary inside {tree}")


def _is_elf(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == b"\x7fELF"
    except OSError:
        return False


# --- agent-driven operations -------------------------------------------------

DERIVE_PLAN_INSTRUCTION = (
    "Inspect this repository's documentation and build files (README, "
    "Makefile, configure, CMakeLists) and produce the project's default build "
    "procedure. Call finish with JSON: "
    '{"steps": ["<shell command>", ...], "env": {}, "entry_point": "<path to '
    'the built binary or launcher script>"}'
)


def derive_build_plan(repo: Path, agent) -> BuildPlan:
    """Ask the plan agent for the project's base build commands.

    The agent explores the repo through its tools and must finish with a plan
    document; anything unusable raises PlanNotFound.
    """
    from .errors import TurnCapReached

    try:
        payload = agent.run(DERIVE_PLAN_INSTRUCTION)
    except TurnCapReached as e:
        raise PlanNotFound(str(e)) from e
    try:
        doc = json.loads(payload)
        plan = BuildPlan.from_document(doc, workdir=Path(repo))
    except (json.JSONDecodeError, ValueError, KeyError) as e:
        raise PlanNotFound(f"agent payload is not a valid plan: {e}") from e
    if not plan.entry_point:
        raise PlanNotFound("plan has no entry_point")
    return plan


REVISE_PLAN_INSTRUCTION = (
    "The build failed. Diagnose the error output below, adjust the build "
    "commands or environment (never the project sources), and call finish "
    "with the corrected plan JSON in the same shape.\n\n"
    "current plan:\n{plan}\n\nfailure:\n{error}"
)


def run_build(
    plan: BuildPlan,
    agent,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    kind: Optional[InstrumentationKind] = None,
    log_path: Optional[Path] = None,
) -> BuildResult:
    """Execute the plan; on compile errors or an ineffective binary, let the
    agent revise the commands and retry up to max_attempts.

    Raises BuildFailed when every attempt is exhausted.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    workdir = plan.workdir
    if workdir is None or not Path(workdir).is_dir():
        raise ValueError("plan.workdir must be an existing directory")
    log_lines: list[str] = []
    last_error = ""
    current = plan
    for attempt in range(1, max_attempts + 1):
        ok, output = _execute_steps(current, Path(workdir))
        log_lines.append(f"=== attempt {attempt} ===\n{output}")
        if ok:
            try:
                binary = resolve_entry_binary(Path(workdir) / current.entry_point)
            except (BinaryNotFound, FileUnreadable) as e:
                ok, output = False, f"entry point problem: {e}"
                last_error = output
                log_lines.append(output)
            else:
                effective = (
                    check_instrumentation(binary, kind) if kind is not None else True
                )
                if effective:
                    _write_log(log_path, log_lines)
                    return BuildResult(
                        success=True,
                        binary_path=binary,
                        attempts=attempt,
                        last_error_excerpt="",
                        effective=True,
                    )
                output = (
                    f"build succeeded but {binary.name} lacks the expected "
                    f"instrumentation markers {[m.decode() for m in (kind.markers if kind else ())]}; "
                    "the compile flags were probably dropped by the build system. "
                    "Current environment already defines CFLAGS/CXXFLAGS/LDFLAGS; "
                    "make sure the build actually honors them."
                )
                last_error = output
                log_lines.append(output)
        else:
            last_error = output[-2000:]
        if attempt == max_attempts:
            break
        current = _revise_plan(current, agent, last_error, kind)
    _write_log(log_path, log_lines)
    raise BuildFailed(max_attempts, last_error[-2000:])


def _execute_steps(plan: BuildPlan, workdir: Path) -> tuple[bool, str]:
    env = dict(os.environ)
    env.update(plan.env)
    chunks = []
    for step in plan.steps:
        try:
            proc = subprocess.run(
                ["bash", "-c", step],
                cwd=workdir,
                env=env,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                timeout=BUILD_STEP_TIMEOUT_SECS,
            )
        except subprocess.TimeoutExpired:
            chunks.append(f"$ {step}\n[timed out]")
            return False, "\n".join(chunks)
        except OSError as e:
            chunks.append(f"$ {step}\n[{e}]")
            return False, "\n".join(chunks)
        chunks.append(f"$ {step}\n{proc.stdout.decode(errors='replace')}")
        if proc.returncode != 0:
            chunks.append(f"[step exited {proc.returncode}]")
            return False, "\n".join(chunks)
    return True, "\n".join(chunks)


def _revise_plan(current, agent, error: str, kind) -> BuildPlan:
    prompt = REVISE_PLAN_INSTRUCTION.format(
        plan=json.dumps(current.to_document(), indent=1), error=error[-2000:]
    )
    try:
        payload = agent.run(prompt)
        doc = json.loads(payload)
        revised = BuildPlan.from_document(doc, workdir=current.workdir)
    except Exception:
        return current  # unusable revision: retry the old plan
    if not revised.entry_point:
        revised = replace(revised, entry_point=current.entry_point)
    # Re-pin instrumentation: the agent may rewrite env wholesale.
    if kind is not None:
        revised = inject_flags(revised, kind)
    return revised


def _write_log(log_path: Optional[Path], lines: list[str]) -> None:
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("\n".join(lines))


def plan_for_repo_copy(plan: BuildPlan, copy_dir: Path) -> BuildPlan:
    return replace(plan, workdir=Path(copy_dir))


def sanitizer_runtime_env(
    kind: InstrumentationKind,
    log_dir: Path,
    detect_leaks: bool,
) -> dict[str, str]:
    """Environment for sanitizer-instrumented executions: reports land in
    files under log_dir, and the symbolizer fallback is enabled for hosts
    without llvm-symbolizer."""
    import shutil as _shutil

    env = {}
    opts = [
        "abort_on_error=0",
        f"detect_leaks={1 if detect_leaks else 0}",
        f"log_path={log_dir}/asan",
        "allow_addr2line=1",
    ]
    env["ASAN_OPTIONS"] = ":".join(opts)
    env["UBSAN_OPTIONS"] = f"print_stacktrace=1:halt_on_error=1:log_path={log_dir}/asan:allow_addr2line=1"
    if not _shutil.which("llvm-symbolizer"):
        addr2line = _shutil.which("addr2line")
        if addr2line:
            env["ASAN_SYMBOLIZER_PATH"] = addr2line
            env["UBSAN_SYMBOLIZER_PATH"] = addr2line
    return env
