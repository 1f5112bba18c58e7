"""Sanitizer report parsing and the crash validation oracle.

Turns raw AddressSanitizer / LeakSanitizer / UndefinedBehaviorSanitizer text
into structured crash info, and classifies an observed crash against the
ground-truth vulnerability spec as validated, variant, or no-crash.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath
from typing import Optional, Sequence

from . import taskmodel
from .errors import NoReport, NoSourceFrames, RefinerFailure
from .taskmodel import CrashKind, VulnSpec

log = logging.getLogger(__name__)

MAX_EXCERPT_CHARS = 4000
PAGE_SIZE = 4096


@dataclass(frozen=True)
class StackFrame:
    index: int  # 0 = innermost / crash site
    function: str
    file: str
    line: int
    column: Optional[int] = None

    def location(self) -> str:
        return f"{self.file}:{self.line}"


@dataclass(frozen=True)
class CrashTrace:
    frames: tuple[StackFrame, ...]
    alloc_frames: tuple[StackFrame, ...] = ()
    free_frames: tuple[StackFrame, ...] = ()

    def __post_init__(self):
        if not self.frames:
            raise ValueError("CrashTrace requires at least one frame")


@dataclass(frozen=True)
class CrashInfo:
    kind: CrashKind
    trace: CrashTrace
    raw_excerpt: str
    summary_line: str


@dataclass(frozen=True)
class Verdict:
    label: str  # "validated" | "variant" | "nocrash"
    observed: Optional[CrashInfo] = None

    @property
    def is_validated(self) -> bool:
        return self.label == "validated"

    @property
    def is_crash(self) -> bool:
        return self.label in ("validated", "variant")


def validated(observed: Optional[CrashInfo] = None) -> Verdict:
    return Verdict("validated", observed)


def variant(observed: CrashInfo) -> Verdict:
    return Verdict("variant", observed)


def nocrash() -> Verdict:
    return Verdict("nocrash")


# --- report parsing -------------------------------------------------------

_ERROR_LINE = re.compile(
    r"ERROR:\s*(?P<tool>AddressSanitizer|LeakSanitizer|UndefinedBehaviorSanitizer)"
    r":?\s*(?P<rest>.*)"
)
_UBSAN_INLINE = re.compile(
    r"^(?P<file>\S+?):(?P<line>\d+):(?:(?P<col>\d+):)?\s*runtime error:\s*(?P<msg>.+)$",
    re.MULTILINE,
)
# "#1 0x5591 in main /src/t.c:23:9" / "#2 0x7f in f (/lib/x.so+0x29)" both match;
# source info is picked out by the optional groups.
_FRAME_LINE = re.compile(
    r"^\s*#(?P<index>\d+)\s+0x[0-9a-fA-F]+"
    r"(?:\s+in\s+(?P<function>.+?))?"
    r"(?:\s+(?P<file>[^\s():]+):(?P<line>\d+)(?::(?P<col>\d+))?)?"
    r"(?:\s+\((?P<module>[^)]+)\))?\s*$"
)
_SEGV_ADDR = re.compile(r"SEGV on unknown address 0x(?P<addr>[0-9a-fA-F]+)")
_KIND_TOKEN = re.compile(r"^(?P<token>[A-Za-z][A-Za-z0-9_-]*)")
_SUMMARY_LINE = re.compile(r"^SUMMARY:.*$", re.MULTILINE)

# Section headers that start allocation / free backtrace blocks.
_ALLOC_HEADERS = ("allocated by thread", "previously allocated by thread", "allocated from:")
_FREE_HEADERS = ("freed by thread",)


def _parse_frames(lines: Sequence[str]) -> list[StackFrame]:
    """Parse consecutive `#N ...` lines, keeping only source-mapped frames."""
    frames = []
    for line in lines:
        m = _FRAME_LINE.match(line)
        if not m:
            continue
        file, lineno = m.group("file"), m.group("line")
        if not file or not lineno or file.startswith("?"):
            continue  # raw address or unsymbolized frame
        frames.append(
            StackFrame(
                index=len(frames),
                function=(m.group("function") or "<unknown>").strip(),
                file=file,
                line=int(lineno),
                column=int(m.group("col")) if m.group("col") else None,
            )
        )
    return frames


def _frame_blocks(text: str) -> list[tuple[str, list[str]]]:
    """Split report text into (header, frame-lines) blocks.

    A block starts at any non-frame line and collects the `#N` lines that
    follow it; blocks without frame lines are dropped.
    """
    blocks: list[tuple[str, list[str]]] = []
    header = ""
    current: list[str] = []
    for line in text.splitlines():
        if _FRAME_LINE.match(line):
            current.append(line)
        else:
            if current:
                blocks.append((header, current))
                current = []
            if line.strip():
                header = line.strip()
    if current:
        blocks.append((header, current))
    return blocks


def _classify_kind(tool: str, rest: str) -> CrashKind:
    if tool == "LeakSanitizer":
        return taskmodel.MEMORY_LEAK
    segv = _SEGV_ADDR.search(rest)
    if segv:
        addr = int(segv.group("addr"), 16)
        if addr < PAGE_SIZE:
            return taskmodel.NULL_DEREFERENCE
        return CrashKind("SEGV")
    rest = rest.strip()
    # "attempting double-free on 0x..." / "attempting free on address which
    # was not malloc()-ed" bury the token behind a verb.
    if rest.startswith("attempting "):
        rest = rest[len("attempting "):]
    m = _KIND_TOKEN.match(rest)
    if not m:
        return CrashKind("unknown")
    return CrashKind.from_token(m.group("token"))


def parse_sanitizer_report(text: str) -> CrashInfo:
    """Parse the first error block of a sanitizer report.

    Frames lacking source info are dropped and survivors reindexed from the
    crash site outward. Raises NoReport when no error line exists at all and
    NoSourceFrames when every frame is a bare binary address.
    """
    if not text:
        raise NoReport("empty report text")

    err = _ERROR_LINE.search(text)
    ubsan = _UBSAN_INLINE.search(text)
    if err is None and ubsan is None:
        raise NoReport("no sanitizer error line found")
    if err is not None and (ubsan is None or err.start() < ubsan.start()):
        kind = _classify_kind(err.group("tool"), err.group("rest"))
        body = text[err.start():]
    else:
        # Standalone UBSan diagnostics name the location inline, with an
        # optional backtrace below when print_stacktrace=1 is set.
        msg = ubsan.group("msg").strip()
        if "null pointer" in msg:
            kind = taskmodel.NULL_DEREFERENCE
        else:
            kind = CrashKind("undefined-behavior")
        body = text[ubsan.start():]
        summary = _SUMMARY_LINE.search(body)
        excerpt = body[: summary.end()] if summary else body
        excerpt = excerpt[:MAX_EXCERPT_CHARS]
        frames = _parse_frames(body.splitlines())
        if not frames:
            frames = [
                StackFrame(
                    index=0,
                    function=ubsan.group("msg").strip(),
                    file=ubsan.group("file"),
                    line=int(ubsan.group("line")),
                    column=int(ubsan.group("col")) if ubsan.group("col") else None,
                )
            ]
        return CrashInfo(
            kind=kind,
            trace=CrashTrace(frames=tuple(frames)),
            raw_excerpt=excerpt,
            summary_line=summary.group(0) if summary else body.splitlines()[0],
        )

    summary = _SUMMARY_LINE.search(body)
    excerpt = body[: summary.end()] if summary else body
    excerpt = excerpt[:MAX_EXCERPT_CHARS]

    blocks = _frame_blocks(body)
    if not blocks:
        raise NoSourceFrames("report contains no backtrace frames with source info")

    crash_frames: list[StackFrame] = []
    alloc: list[StackFrame] = []
    free: list[StackFrame] = []
    for header, lines in blocks:
        frames = _parse_frames(lines)
        lower = header.lower()
        if any(h in lower for h in _FREE_HEADERS):
            if not free:
                free = frames
        elif any(h in lower for h in _ALLOC_HEADERS):
            if not alloc:
                alloc = frames
        elif not crash_frames:
            crash_frames = frames

    if kind == taskmodel.MEMORY_LEAK and not crash_frames and alloc:
        # Leaks have no crash site; the allocation stack locates the bug.
        crash_frames = alloc
    if not crash_frames:
        raise NoSourceFrames("no source-mapped frames in the first backtrace block")
    if kind == taskmodel.MEMORY_LEAK and not alloc:
        alloc = crash_frames

    if not kind.is_heap:
        alloc, free = [], []

    return CrashInfo(
        kind=kind,
        trace=CrashTrace(
            frames=tuple(crash_frames),
            alloc_frames=tuple(alloc),
            free_frames=tuple(free),
        ),
        raw_excerpt=excerpt,
        summary_line=summary.group(0) if summary else body.splitlines()[0].strip(),
    )


# --- crash trace document (crash_trace.json) ------------------------------

def _frames_to_doc(frames: Sequence[StackFrame]) -> list[dict]:
    return [
        {"index": f.index, "function": f.function, "file": f.file, "line": f.line}
        for f in frames
    ]


def _frames_from_doc(items: Sequence[dict]) -> tuple[StackFrame, ...]:
    return tuple(
        StackFrame(
            index=int(d["index"]),
            function=d["function"],
            file=d["file"],
            line=int(d["line"]),
        )
        for d in items
    )


def crash_trace_document(kind: CrashKind, trace: CrashTrace) -> dict:
    doc = {"crash_type": kind.token, "frames": _frames_to_doc(trace.frames)}
    if trace.alloc_frames:
        doc["alloc_frames"] = _frames_to_doc(trace.alloc_frames)
    if trace.free_frames:
        doc["free_frames"] = _frames_to_doc(trace.free_frames)
    return doc


def parse_crash_trace_document(doc: dict) -> tuple[CrashKind, CrashTrace]:
    return (
        CrashKind(doc["crash_type"]),
        CrashTrace(
            frames=_frames_from_doc(doc["frames"]),
            alloc_frames=_frames_from_doc(doc.get("alloc_frames", [])),
            free_frames=_frames_from_doc(doc.get("free_frames", [])),
        ),
    )


def write_crash_trace(path: Path, kind: CrashKind, trace: CrashTrace) -> None:
    path.write_text(json.dumps(crash_trace_document(kind, trace), indent=2) + "\n")


# --- the oracle -----------------------------------------------------------

def paths_suffix_match(a: str, b: str) -> bool:
    """Match the last two path components; absorbs absolute-vs-relative."""
    pa = PurePosixPath(a.replace("\\", "/")).parts
    pb = PurePosixPath(b.replace("\\", "/")).parts
    n = min(2, len(pa), len(pb))
    if n == 0:
        return False
    return pa[-n:] == pb[-n:]


def match_crash(
    observed: CrashInfo,
    expected: VulnSpec,
    k: int = 3,
    line_tolerance: int = 2,
) -> Verdict:
    """Classify an observed crash against the ground truth.

    Validated requires the observed kind to equal the expected effect AND one
    of the k innermost frames to land on the expected location (same file
    suffix, line within tolerance). Anything else that crashed is a variant.
    """
    if observed.kind == expected.v_effect:
        frames = observed.trace.frames[: max(k, 1)]
        loc = expected.v_location
        for frame in frames:
            if paths_suffix_match(frame.file, loc.file) and abs(frame.line - loc.line) <= line_tolerance:
                return validated(observed)
    return variant(observed)


def render_crash_feedback(info: CrashInfo, max_frames: int = 6) -> str:
    """Deterministic, address-free description of a crash for agent context."""
    lines = [f"sanitizer reported: {info.kind.token}"]
    for f in info.trace.frames[:max_frames]:
        lines.append(f"  frame #{f.index}: {f.function} at {f.file}:{f.line}")
    if len(info.trace.frames) > max_frames:
        lines.append(f"  ... {len(info.trace.frames) - max_frames} more frame(s)")
    if info.trace.free_frames:
        f = info.trace.free_frames[0]
        lines.append(f"  freed at: {f.function} {f.file}:{f.line}")
    if info.trace.alloc_frames:
        f = info.trace.alloc_frames[0]
        lines.append(f"  allocated at: {f.function} {f.file}:{f.line}")
    return "\n".join(lines)


# --- trace line refinement ------------------------------------------------

_FUNC_DEF = re.compile(
    r"^[A-Za-z_][\w\s\*\(\),]*?\b(?P<name>[A-Za-z_]\w*)\s*\([^;{]*\)\s*\{?\s*$"
)


def function_extent(text: str, function: str) -> Optional[tuple[int, int]]:
    """(start_line, end_line), 1-based inclusive, of a C function definition.

    Heuristic: find the definition line, then match braces. Returns None when
    the function cannot be located.
    """
    lines = text.splitlines()
    def_line = None
    pattern = re.compile(r"\b" + re.escape(function) + r"\s*\(")
    for i, line in enumerate(lines):
        if pattern.search(line) and not line.lstrip().startswith(("//", "*", "/*")):
            stripped = line.strip()
            if stripped.endswith(";") or "=" in stripped.split(function)[0]:
                continue  # prototype or call-assignment, not a definition
            m = _FUNC_DEF.match(stripped)
            if m and m.group("name") == function:
                def_line = i
                break
            # Definition split across lines: `int\nfoo(...)`.
            if stripped.startswith(function) and i > 0:
                def_line = i
                break
    if def_line is None:
        return None
    depth = 0
    seen_open = False
    for j in range(def_line, len(lines)):
        depth += lines[j].count("{") - lines[j].count("}")
        if "{" in lines[j]:
            seen_open = True
        if seen_open and depth <= 0:
            return (def_line + 1, j + 1)
    return (def_line + 1, len(lines))


def _call_site_ok(repo: Path, frame: StackFrame, callee: str) -> bool:
    """True when frame's line text contains a call to callee inside frame's function."""
    path = _resolve_in_repo(repo, frame.file)
    if path is None:
        return False
    text = path.read_text(errors="replace")
    lines = text.splitlines()
    if not 1 <= frame.line <= len(lines):
        return False
    if not re.search(r"\b" + re.escape(callee) + r"\s*\(", lines[frame.line - 1]):
        return False
    extent = function_extent(text, frame.function)
    if extent and not (extent[0] <= frame.line <= extent[1]):
        return False
    return True


def _resolve_in_repo(repo: Path, file: str) -> Optional[Path]:
    p = Path(file)
    if p.is_absolute():
        if p.exists():
            return p
        # Absolute container path: retry by suffix under the repo.
        for n in range(len(p.parts) - 1, 0, -1):
            candidate = repo / Path(*p.parts[n:])
            if candidate.exists():
                return candidate
        return None
    candidate = repo / p
    return candidate if candidate.exists() else None


REFINER_SYSTEM_PROMPT = (
    "You are given a crash backtrace as JSON and source excerpts. For every "
    "frame except frame 0, the line number must point at the exact source "
    "line where that frame's function calls the next-inner frame's function. "
    "Reply by calling finish with the corrected trace JSON (same frames, "
    "same order, only line numbers adjusted)."
)


def refine_trace_lines(trace: CrashTrace, repo: Path, refiner) -> CrashTrace:
    """Adjust caller-frame lines to the call sites of their callee frames.

    The refiner agent proposes corrected lines; every proposal is checked
    against the source text and rejected frames keep their original lines.
    Raises RefinerFailure when the agent produces no usable trace at all.
    """
    needs_fix = []
    source_view = []
    for j in range(1, len(trace.frames)):
        caller, callee = trace.frames[j], trace.frames[j - 1]
        if _call_site_ok(repo, caller, callee.function):
            continue
        path = _resolve_in_repo(repo, caller.file)
        if path is None:
            log.warning("refine: %s not found under %s; frame kept", caller.file, repo)
            continue
        needs_fix.append(j)
        text = path.read_text(errors="replace")
        extent = function_extent(text, caller.function)
        lines = text.splitlines()
        lo, hi = extent if extent else (max(1, caller.line - 20), min(len(lines), caller.line + 20))
        snippet = "\n".join(
            f"{n} | {lines[n - 1]}" for n in range(lo, min(hi, len(lines)) + 1)
        )
        source_view.append(
            f"frame #{j} {caller.function} (reported {caller.file}:{caller.line}), "
            f"must call {callee.function}():\n{snippet}"
        )

    if not needs_fix:
        return trace

    payload = json.dumps(
        {"trace": _frames_to_doc(trace.frames), "source": "\n\n".join(source_view)},
        indent=1,
    )
    try:
        answer = refiner.run(payload)
        proposed = json.loads(answer)
        frames_doc = proposed["trace"] if isinstance(proposed, dict) else proposed
        proposed_frames = _frames_from_doc(frames_doc)
    except Exception as e:
        raise RefinerFailure(f"refiner produced no valid trace: {e}") from e
    if len(proposed_frames) != len(trace.frames):
        raise RefinerFailure("refiner changed the number of frames")

    fixed = list(trace.frames)
    for j in needs_fix:
        cand = proposed_frames[j]
        if cand.function != trace.frames[j].function or cand.file != trace.frames[j].file:
            continue  # only line adjustments are allowed
        if _call_site_ok(repo, cand, trace.frames[j - 1].function):
            fixed[j] = replace(trace.frames[j], line=cand.line)
        else:
            log.warning(
                "refine: rejected line %d for frame #%d (%s)",
                cand.line, j, trace.frames[j].function,
            )
    return CrashTrace(
        frames=tuple(fixed),
        alloc_frames=trace.alloc_frames,
        free_frames=trace.free_frames,
    )
