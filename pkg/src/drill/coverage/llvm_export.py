"""Parser for the coverage toolchain's JSON export (schema version 2.x).

Only the `functions` array is consumed: each entry carries the function name,
its execution count, the mapping regions, and the filenames the region
file-ids index into. Line counts are derived through the shared region
semantics in model.py so the external and built-in collection routes agree.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from ..errors import MalformedProfile
from .model import (
    KIND_BRANCH,
    KIND_CODE,
    KIND_EXPANSION,
    KIND_GAP,
    KIND_SKIPPED,
    CoverageMap,
    Region,
    build_map,
)

_EXPORT_KINDS = {
    0: KIND_CODE,
    1: KIND_EXPANSION,
    2: KIND_SKIPPED,
    3: KIND_GAP,
    4: KIND_BRANCH,
}


def parse_export_document(
    doc: dict,
    binary_id: str = "",
    source_root: Optional[Path] = None,
) -> CoverageMap:
    if doc.get("type") != "llvm.coverage.json.export":
        raise MalformedProfile(f"not a coverage export: type={doc.get('type')!r}")
    version = str(doc.get("version", ""))
    if not version.startswith("2."):
        raise MalformedProfile(f"unsupported export schema version {version!r}")
    data = doc.get("data") or []
    if not data:
        raise MalformedProfile("export has no data entries")

    function_regions = []
    for entry in data:
        for fn in entry.get("functions", []):
            filenames = fn.get("filenames") or [""]
            regions = []
            main_file = filenames[0]
            for raw in fn.get("regions", []):
                ls, cs, le, ce, count, file_id, _expanded, kind = raw[:8]
                regions.append(
                    (
                        filenames[file_id] if file_id < len(filenames) else main_file,
                        Region(
                            kind=_EXPORT_KINDS.get(kind, KIND_CODE),
                            count=int(count),
                            line_start=int(ls),
                            col_start=int(cs),
                            line_end=int(le),
                            col_end=int(ce),
                        ),
                    )
                )
            # Regions may span headers; attribute the function to the file
            # where most of its code regions live.
            by_file: dict[str, list[Region]] = {}
            for file, region in regions:
                by_file.setdefault(file, []).append(region)
            if not by_file:
                continue
            home = max(by_file, key=lambda f: len(by_file[f]))
            function_regions.append(
                (fn["name"], home, int(fn.get("count", 0)), by_file[home])
            )
    return build_map(function_regions, binary_id=binary_id, source_root=source_root)


def load_export_file(
    path: Path, binary_id: str = "", source_root: Optional[Path] = None
) -> CoverageMap:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedProfile(f"cannot parse export {path}: {e}") from e
    return parse_export_document(doc, binary_id=binary_id, source_root=source_root)
