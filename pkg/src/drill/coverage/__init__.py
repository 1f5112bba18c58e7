"""Source-mapped coverage: collection, querying, and agent-facing rendering."""

from .model import (
    CoverageMap,
    CoverageQuery,
    FrameCoverage,
    FunctionCoverage,
    Region,
    TraceCoverageSummary,
    collect_trace_coverage,
    merge_maps,
    query_coverage,
    reaches_vuln_func,
    render_trace_feedback,
)
from .llvm_export import parse_export_document
from .toolchain import CoverageRunner, collect_profile

__all__ = [
    "CoverageMap",
    "CoverageQuery",
    "CoverageRunner",
    "FrameCoverage",
    "FunctionCoverage",
    "Region",
    "TraceCoverageSummary",
    "collect_profile",
    "collect_trace_coverage",
    "merge_maps",
    "parse_export_document",
    "query_coverage",
    "reaches_vuln_func",
    "render_trace_feedback",
]
