"""Queryable coverage model and agent-facing renderings.

A CoverageMap is built from per-function mapping regions (either the external
toolchain's JSON export or the built-in profile decoder; both feed the same
construction path). Line execution counts follow the toolchain's convention:
a line's count is the maximum count of the code regions that start on it, or
the count of the innermost enclosing region when none starts there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..errors import RangeOutOfBounds, UnknownFile, UnknownFunction
from ..sanitizer import CrashTrace, StackFrame

KIND_CODE = "code"
KIND_EXPANSION = "expansion"
KIND_SKIPPED = "skipped"
KIND_GAP = "gap"
KIND_BRANCH = "branch"

TRUNCATION_MARKER = "\n…[truncated]"


@dataclass(frozen=True)
class Region:
    kind: str
    count: int
    line_start: int
    col_start: int
    line_end: int
    col_end: int


def line_counts_from_regions(regions: Sequence[Region]) -> dict[int, int]:
    """Per-line execution counts for one function's regions."""
    code = [r for r in regions if r.kind == KIND_CODE]
    gaps = [r for r in regions if r.kind == KIND_GAP]
    counts: dict[int, int] = {}
    if not code and not gaps:
        return counts
    lines = set()
    for r in code + gaps:
        lines.update(range(r.line_start, r.line_end + 1))
    for line in sorted(lines):
        starting = [r for r in code if r.line_start == line]
        if starting:
            counts[line] = max(r.count for r in starting)
            continue
        enclosing = [r for r in code if r.line_start < line <= r.line_end]
        if enclosing:
            # Innermost region: the one starting latest.
            inner = max(enclosing, key=lambda r: (r.line_start, r.col_start))
            counts[line] = inner.count
            continue
        gap_here = [r for r in gaps if r.line_start <= line <= r.line_end]
        if gap_here:
            counts[line] = max(r.count for r in gap_here)
    return counts


def _uncovered_ranges(line_counts: dict[int, int]) -> tuple[tuple[int, int], ...]:
    ranges = []
    start = None
    prev = None
    for line in sorted(line_counts):
        uncovered = line_counts[line] == 0
        if uncovered and start is not None and prev == line - 1:
            prev = line
            continue
        if start is not None:
            ranges.append((start, prev))
            start = None
        if uncovered:
            start = prev = line
    if start is not None:
        ranges.append((start, prev))
    return tuple(ranges)


@dataclass(frozen=True)
class FunctionCoverage:
    name: str
    file: str
    entry_count: int
    line_counts: dict[int, int] = field(default_factory=dict)

    @property
    def total_lines(self) -> int:
        return len(self.line_counts)

    @property
    def covered_lines(self) -> int:
        return sum(1 for c in self.line_counts.values() if c > 0)

    @property
    def uncovered_line_ranges(self) -> tuple[tuple[int, int], ...]:
        return _uncovered_ranges(self.line_counts)


@dataclass(frozen=True)
class CoverageMap:
    functions: dict[str, FunctionCoverage]
    files: dict[str, dict[int, int]]
    binary_id: str = ""
    source_root: Optional[Path] = None

    def lookup_function(self, name: str) -> Optional[FunctionCoverage]:
        """Exact match first; static functions are keyed `file.c:name` by the
        toolchain, and decorated C++ names are matched by stripped prefix."""
        if name in self.functions:
            return self.functions[name]
        for key, fc in self.functions.items():
            if key.split(":")[-1] == name:
                return fc
        bare = name.split("(")[0]
        candidates = [
            fc for key, fc in self.functions.items() if key.split("(")[0] == bare
        ]
        if len(candidates) == 1:
            return candidates[0]
        return None

    def lookup_file(self, path: str) -> Optional[dict[int, int]]:
        if path in self.files:
            return self.files[path]
        from ..sanitizer import paths_suffix_match

        matches = [p for p in self.files if paths_suffix_match(p, path)]
        if len(matches) == 1:
            return self.files[matches[0]]
        return None


def build_map(
    function_regions: Sequence[tuple[str, str, int, Sequence[Region]]],
    binary_id: str = "",
    source_root: Optional[Path] = None,
) -> CoverageMap:
    """Assemble a CoverageMap from (name, file, entry_count, regions) tuples."""
    functions: dict[str, FunctionCoverage] = {}
    files: dict[str, dict[int, int]] = {}
    for name, file, entry_count, regions in function_regions:
        counts = line_counts_from_regions(regions)
        functions[name] = FunctionCoverage(
            name=name, file=file, entry_count=entry_count, line_counts=counts
        )
        per_file = files.setdefault(file, {})
        for line, count in counts.items():
            per_file[line] = max(per_file.get(line, 0), count)
    return CoverageMap(
        functions=functions, files=files, binary_id=binary_id, source_root=source_root
    )


def merge_maps(a: CoverageMap, b: CoverageMap) -> CoverageMap:
    """Counts add; merging k identical maps multiplies every count by k."""
    functions = {}
    for name in set(a.functions) | set(b.functions):
        fa, fb = a.functions.get(name), b.functions.get(name)
        if fa is None or fb is None:
            functions[name] = fa or fb
            continue
        counts = dict(fa.line_counts)
        for line, c in fb.line_counts.items():
            counts[line] = counts.get(line, 0) + c
        functions[name] = FunctionCoverage(
            name=name,
            file=fa.file,
            entry_count=fa.entry_count + fb.entry_count,
            line_counts=counts,
        )
    files: dict[str, dict[int, int]] = {}
    for path in set(a.files) | set(b.files):
        merged: dict[int, int] = {}
        for src in (a.files.get(path, {}), b.files.get(path, {})):
            for line, c in src.items():
                merged[line] = merged.get(line, 0) + c
        files[path] = merged
    return CoverageMap(
        functions=functions,
        files=files,
        binary_id=a.binary_id or b.binary_id,
        source_root=a.source_root or b.source_root,
    )


# --- backtrace coverage ----------------------------------------------------

@dataclass(frozen=True)
class FrameCoverage:
    frame: StackFrame
    reached: bool
    entry_count: int
    in_mapping: bool  # False: absent from the coverage mapping (inlined?)


@dataclass(frozen=True)
class TraceCoverageSummary:
    per_frame: tuple[FrameCoverage, ...]
    deepest_reached_index: int  # -1 when nothing on the trace executed


def collect_trace_coverage(cov: CoverageMap, trace: CrashTrace) -> TraceCoverageSummary:
    """Function-level reach status for every frame on the crash backtrace."""
    per_frame = []
    deepest = -1
    for frame in trace.frames:
        fc = cov.lookup_function(frame.function)
        if fc is None:
            per_frame.append(FrameCoverage(frame, False, 0, in_mapping=False))
            continue
        reached = fc.entry_count > 0
        per_frame.append(FrameCoverage(frame, reached, fc.entry_count, in_mapping=True))
    for item in per_frame:
        if item.reached:
            deepest = item.frame.index
            break
    return TraceCoverageSummary(per_frame=tuple(per_frame), deepest_reached_index=deepest)


def reaches_vuln_func(summary: TraceCoverageSummary, trace: CrashTrace) -> bool:
    """True when the three frames nearest the crash site all executed."""
    need = min(3, len(trace.frames))
    gate = summary.per_frame[:need]
    return all(item.reached for item in gate)


# --- queries ----------------------------------------------------------------

@dataclass(frozen=True)
class CoverageQuery:
    kind: str  # "function" | "file_lines" | "uncovered_in_function"
    name: Optional[str] = None
    path: Optional[str] = None
    start: Optional[int] = None
    end: Optional[int] = None

    @classmethod
    def from_arguments(cls, args: dict) -> "CoverageQuery":
        kind = args.get("kind", "")
        if kind not in ("function", "file_lines", "uncovered_in_function"):
            raise ValueError(f"unknown coverage query kind: {kind!r}")
        return cls(
            kind=kind,
            name=args.get("name"),
            path=args.get("path"),
            start=int(args["start"]) if args.get("start") is not None else None,
            end=int(args["end"]) if args.get("end") is not None else None,
        )


def _source_lines(cov: CoverageMap, path: str) -> Optional[list[str]]:
    if cov.source_root is None:
        return None
    candidate = cov.source_root / path
    if not candidate.exists():
        matches = list(cov.source_root.rglob(Path(path).name))
        if len(matches) != 1:
            return None
        candidate = matches[0]
    return candidate.read_text(errors="replace").splitlines()


def _bound(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    return text[: max(0, limit - len(TRUNCATION_MARKER))] + TRUNCATION_MARKER


def query_coverage(cov: CoverageMap, query: CoverageQuery, limit: int = 8000) -> str:
    """Bounded textual rendering of one coverage query."""
    if query.kind == "function":
        out = _render_function(cov, query.name or "")
    elif query.kind == "uncovered_in_function":
        out = _render_uncovered(cov, query.name or "")
    else:
        out = _render_file_lines(cov, query.path or "", query.start or 1, query.end or 1)
    return _bound(out, limit)


def _render_function(cov: CoverageMap, name: str) -> str:
    fc = cov.lookup_function(name)
    if fc is None:
        raise UnknownFunction(name)
    if fc.total_lines and fc.covered_lines == fc.total_lines:
        return (
            f"{fc.name} ({fc.file}): entry_count={fc.entry_count}; "
            f"all {fc.total_lines} lines covered"
        )
    lines = [
        f"{fc.name} ({fc.file}): entry_count={fc.entry_count}; "
        f"{fc.covered_lines}/{fc.total_lines} lines covered"
    ]
    for start, end in fc.uncovered_line_ranges:
        lines.append(f"  uncovered: lines {start}-{end}")
    return "\n".join(lines)


def _render_uncovered(cov: CoverageMap, name: str) -> str:
    fc = cov.lookup_function(name)
    if fc is None:
        raise UnknownFunction(name)
    ranges = fc.uncovered_line_ranges
    if not ranges:
        return f"{fc.name}: no uncovered lines ({fc.total_lines} instrumented)"
    src = _source_lines(cov, fc.file)
    out = [f"{fc.name} ({fc.file}): {len(ranges)} uncovered range(s)"]
    for start, end in ranges:
        excerpt = ""
        if src and 1 <= start <= len(src):
            excerpt = f" | {src[start - 1].strip()}"
        out.append(f"  lines {start}-{end}{excerpt}")
    return "\n".join(out)


def _render_file_lines(cov: CoverageMap, path: str, start: int, end: int) -> str:
    counts = cov.lookup_file(path)
    if counts is None:
        raise UnknownFile(path)
    if start < 1 or end < start:
        raise RangeOutOfBounds(f"{path}:{start}-{end}")
    src = _source_lines(cov, path)
    if src is not None and start > len(src):
        raise RangeOutOfBounds(f"{path}:{start} beyond end of file ({len(src)} lines)")
    out = []
    for line in range(start, end + 1):
        count = counts.get(line)
        text = src[line - 1] if src and line <= len(src) else ""
        shown = str(count) if count is not None else "-"
        out.append(f"{line:5d} | {shown:>5s} | {text}")
    return "\n".join(out)


def render_trace_feedback(summary: TraceCoverageSummary) -> str:
    """Compact, deterministic description of backtrace reach for the agent."""
    lines = ["coverage along the crash backtrace (frame 0 = crash site):"]
    for item in summary.per_frame:
        f = item.frame
        if item.reached:
            status = f"reached (entry_count={item.entry_count})"
        elif item.in_mapping:
            status = "NOT reached (entry_count=0)"
        else:
            status = "absent from coverage mapping (possibly inlined)"
        lines.append(f"  #{f.index} {f.function} at {f.file}:{f.line} — {status}")
    deepest = summary.deepest_reached_index
    if deepest == 0:
        lines.append("execution reached the vulnerable function (frame 0).")
    elif deepest == -1:
        lines.append("no function on the crash backtrace was executed.")
    else:
        stall = summary.per_frame[deepest - 1].frame
        lines.append(
            f"execution stalled before {stall.function} at {stall.file}:{stall.line}"
        )
    return "\n".join(lines)
