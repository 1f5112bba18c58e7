"""Raw-profile collection: external toolchain when present, decoder otherwise.

The external route shells out to `llvm-profdata merge` and `llvm-cov export`
exactly as documented; the built-in route decodes the raw profiles and the
binary's own mapping sections. Both produce the same CoverageMap model.
"""
from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from ..errors import MalformedProfile, ToolchainMissing
from .llvm_export import parse_export_document
from .model import CoverageMap
from .profdecode import build_coverage_map

PROFILE_PATTERN = "cov-%p.profraw"


def _find_tool(name: str) -> Optional[str]:
    found = shutil.which(name)
    if found:
        return found
    for suffix in range(20, 11, -1):
        found = shutil.which(f"{name}-{suffix}")
        if found:
            return found
    return None


def external_toolchain_available() -> bool:
    return _find_tool("llvm-profdata") is not None and _find_tool("llvm-cov") is not None


def collect_profile(
    raw_profile_paths: Sequence[Path],
    instrumented_binary: Path,
    source_root: Optional[Path] = None,
    backend: str = "auto",
) -> CoverageMap:
    """Merge raw profiles and map them to source, yielding a CoverageMap.

    backend: "external" (toolchain only), "builtin" (decoder only), or
    "auto" (external when installed, decoder otherwise).
    """
    paths = [Path(p) for p in raw_profile_paths]
    if not paths:
        raise MalformedProfile("no raw profiles to merge (was the binary executed?)")
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MalformedProfile(f"raw profiles vanished: {missing}")

    if backend not in ("auto", "external", "builtin"):
        raise ValueError(f"unknown coverage backend {backend!r}")
    if backend == "external" and not external_toolchain_available():
        raise ToolchainMissing("llvm-profdata / llvm-cov not on PATH")
    use_external = backend == "external" or (
        backend == "auto" and external_toolchain_available()
    )
    if use_external:
        return _collect_external(paths, instrumented_binary, source_root)
    return build_coverage_map(instrumented_binary, paths, source_root=source_root)


def _collect_external(
    paths: Sequence[Path], binary: Path, source_root: Optional[Path]
) -> CoverageMap:
    profdata_tool = _find_tool("llvm-profdata")
    cov_tool = _find_tool("llvm-cov")
    with tempfile.TemporaryDirectory(prefix="drill-cov-") as tmp:
        merged = Path(tmp) / "merged.profdata"
        merge_cmd = [profdata_tool, "merge", "-sparse"] + [str(p) for p in paths] + [
            "-o",
            str(merged),
        ]
        proc = subprocess.run(merge_cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise MalformedProfile(f"profile merge failed: {proc.stderr.strip()}")
        export_cmd = [cov_tool, "export", str(binary), "-instr-profile", str(merged)]
        proc = subprocess.run(export_cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise MalformedProfile(f"coverage export failed: {proc.stderr.strip()}")
        try:
            doc = json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise MalformedProfile(f"export emitted invalid JSON: {e}") from e
    return parse_export_document(doc, binary_id=str(binary), source_root=source_root)


class CoverageRunner:
    """Owns one task's profile directory and its collect-then-reset cycle.

    Every instrumented execution must run with this runner's environment so
    profiles land in the owned directory; collect() consumes and removes
    them, guaranteeing stale profiles never leak into the next iteration.
    """

    def __init__(
        self,
        profile_dir: Path,
        binary: Path,
        source_root: Optional[Path] = None,
        backend: str = "auto",
    ):
        self.profile_dir = Path(profile_dir)
        self.binary = Path(binary)
        self.source_root = source_root
        self.backend = backend
        self.profile_dir.mkdir(parents=True, exist_ok=True)

    def environment(self) -> dict[str, str]:
        return {"LLVM_PROFILE_FILE": str(self.profile_dir / PROFILE_PATTERN)}

    def pending_profiles(self) -> list[Path]:
        return sorted(self.profile_dir.glob("*.profraw"))

    def reset(self) -> None:
        for p in self.pending_profiles():
            p.unlink(missing_ok=True)

    def collect(self) -> CoverageMap:
        paths = self.pending_profiles()
        try:
            cov = collect_profile(
                paths, self.binary, source_root=self.source_root, backend=self.backend
            )
        finally:
            self.reset()
        return cov
