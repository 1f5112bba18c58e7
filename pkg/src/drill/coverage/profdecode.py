"""Built-in decoder for raw coverage profiles and binary mapping data.

Used when the external coverage toolchain is not installed: reads the raw
profile counter payloads and the mapping sections embedded in the
instrumented ELF binary, evaluates counter expressions, and yields the same
per-function regions the toolchain's JSON export would.

Supports raw profile format version 8 (the version emitted by the compiler
this decoder is validated against) and the mapping encoding it pairs with.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

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

_PROFRAW_MAGIC = 0xFF6C70726F667281
_DATA_RECORD_SIZE = 48
_U64 = 1 << 64


def _read_uleb(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise MalformedProfile("truncated ULEB128 value")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def _md5_64(data: bytes) -> int:
    return struct.unpack("<Q", hashlib.md5(data).digest()[:8])[0]


# --- ELF --------------------------------------------------------------------

def elf_sections(path: Path) -> dict[str, list[bytes]]:
    data = path.read_bytes()
    if data[:4] != b"\x7fELF":
        raise MalformedProfile(f"{path} is not an ELF binary")
    if data[4] != 2:
        raise MalformedProfile(f"{path}: only 64-bit ELF is supported")
    shoff = struct.unpack_from("<Q", data, 0x28)[0]
    shentsize = struct.unpack_from("<H", data, 0x3A)[0]
    shnum = struct.unpack_from("<H", data, 0x3C)[0]
    shstrndx = struct.unpack_from("<H", data, 0x3E)[0]
    raw = []
    for i in range(shnum):
        off = shoff + i * shentsize
        name_off = struct.unpack_from("<I", data, off)[0]
        sec_off, sec_size = struct.unpack_from("<QQ", data, off + 0x18)
        raw.append((name_off, sec_off, sec_size))
    str_off = raw[shstrndx][1]
    sections: dict[str, list[bytes]] = {}
    for name_off, sec_off, sec_size in raw:
        end = data.index(b"\0", str_off + name_off)
        name = data[str_off + name_off : end].decode()
        sections.setdefault(name, []).append(data[sec_off : sec_off + sec_size])
    return sections


# --- raw profiles -----------------------------------------------------------

def parse_profraw(path: Path) -> dict[tuple[int, int], list[int]]:
    """Counter vectors keyed by (function name hash, structural hash)."""
    data = Path(path).read_bytes()
    if len(data) < 88:
        raise MalformedProfile(f"{path}: too small for a raw profile header")
    magic, version_raw = struct.unpack_from("<QQ", data, 0)
    if magic != _PROFRAW_MAGIC:
        raise MalformedProfile(f"{path}: bad raw profile magic {magic:#x}")
    version = version_raw & 0xFFFFFF
    if version != 8:
        raise MalformedProfile(f"{path}: unsupported raw profile version {version}")
    (
        binary_ids_size,
        n_data,
        pad_before,
        n_counters,
        pad_after,
        names_size,
        counters_delta,
        _names_delta,
        _value_kind_last,
    ) = struct.unpack_from("<9Q", data, 16)

    pos = 88 + binary_ids_size
    records = []
    for _ in range(n_data):
        if pos + _DATA_RECORD_SIZE > len(data):
            raise MalformedProfile(f"{path}: truncated data records")
        name_ref, func_hash, counter_ptr = struct.unpack_from("<3Q", data, pos)
        (num_counters,) = struct.unpack_from("<I", data, pos + 40)
        records.append((name_ref, func_hash, counter_ptr, num_counters))
        pos += _DATA_RECORD_SIZE
    pos += pad_before
    if pos + 8 * n_counters > len(data):
        raise MalformedProfile(f"{path}: truncated counter payload")
    counters = struct.unpack_from(f"<{n_counters}Q", data, pos)

    out: dict[tuple[int, int], list[int]] = {}
    for i, (name_ref, func_hash, counter_ptr, num_counters) in enumerate(records):
        # Counter pointers are relative to the record's own address; the
        # header delta shifts by one record size per record consumed.
        delta = (counters_delta - i * _DATA_RECORD_SIZE) % _U64
        offset = (counter_ptr - delta) % _U64
        index = offset // 8
        if index + num_counters > n_counters:
            raise MalformedProfile(f"{path}: counter range out of bounds")
        out[(name_ref, func_hash)] = list(counters[index : index + num_counters])
    return out


def merge_profraw_counts(paths: Sequence[Path]) -> dict[tuple[int, int], list[int]]:
    merged: dict[tuple[int, int], list[int]] = {}
    for path in paths:
        for key, vals in parse_profraw(path).items():
            if key in merged:
                prev = merged[key]
                if len(prev) != len(vals):
                    raise MalformedProfile(
                        f"{path}: counter arity mismatch for {key[0]:#x}"
                    )
                merged[key] = [a + b for a, b in zip(prev, vals)]
            else:
                merged[key] = list(vals)
    return merged


# --- mapping sections -------------------------------------------------------

def _decode_name_blob(blob: bytes) -> dict[int, str]:
    names: dict[int, str] = {}
    pos = 0
    while pos < len(blob):
        ulen, pos = _read_uleb(blob, pos)
        clen, pos = _read_uleb(blob, pos)
        if clen:
            chunk = zlib.decompress(blob[pos : pos + clen])
            pos += clen
        else:
            chunk = blob[pos : pos + ulen]
            pos += ulen
        for name in chunk.split(b"\x01"):
            if name:
                names[_md5_64(name)] = name.decode(errors="replace")
    return names


def _decode_filename_tables(chunks: list[bytes]) -> dict[int, list[str]]:
    tables: dict[int, list[str]] = {}
    for chunk in chunks:
        pos = 0
        while pos + 16 <= len(chunk):
            _n_rec, fn_size, _cov_size, version = struct.unpack_from("<IIII", chunk, pos)
            pos += 16
            blob = chunk[pos : pos + fn_size]
            if not blob:
                break
            n_files, p = _read_uleb(blob, 0)
            ulen, p = _read_uleb(blob, p)
            clen, p = _read_uleb(blob, p)
            payload = (
                zlib.decompress(blob[p : p + clen]) if clen else blob[p : p + ulen]
            )
            q = 0
            files = []
            for _ in range(n_files):
                ln, q = _read_uleb(payload, q)
                files.append(payload[q : q + ln].decode(errors="replace"))
                q += ln
            # The first table entry is the compilation directory; relative
            # source paths are resolved against it.
            if version >= 5 and files:
                base = files[0]
                resolved = []
                for f in files[1:]:
                    if f.startswith("/"):
                        resolved.append(f)
                    else:
                        resolved.append(str(Path(base) / f))
                files = [base] + resolved
            tables[_md5_64(blob)] = files
            pos += fn_size
            pos = (pos + 7) & ~7
    return tables


@dataclass(frozen=True)
class FunctionMapping:
    name_md5: int
    func_hash: int
    filenames_ref: int
    file_ids: tuple[int, ...]
    expressions: tuple[tuple[int, int], ...]
    # (file_slot, kind, raw_counter, line_start, col_start, line_end, col_end)
    regions: tuple[tuple[int, str, int, int, int, int, int], ...]


def _decode_mapping_data(mapping: bytes) -> tuple[tuple, tuple, tuple]:
    pos = 0
    n_indices, pos = _read_uleb(mapping, pos)
    file_ids = []
    for _ in range(n_indices):
        v, pos = _read_uleb(mapping, pos)
        file_ids.append(v)
    n_exprs, pos = _read_uleb(mapping, pos)
    exprs = []
    for _ in range(n_exprs):
        lhs, pos = _read_uleb(mapping, pos)
        rhs, pos = _read_uleb(mapping, pos)
        exprs.append((lhs, rhs))
    regions = []
    for slot in range(n_indices):
        n_regions, pos = _read_uleb(mapping, pos)
        line = 0
        for _ in range(n_regions):
            header, pos = _read_uleb(mapping, pos)
            tag = header & 3
            kind = KIND_CODE
            raw_counter = header
            if tag == 0:
                raw_counter = 0
                if header & 0b100:
                    kind = KIND_EXPANSION
                else:
                    pseudo = header >> 3
                    if pseudo == 0:
                        kind = KIND_CODE
                    elif pseudo == 2:
                        kind = KIND_SKIPPED
                    elif pseudo == 4:
                        kind = KIND_BRANCH
                        raw_counter, pos = _read_uleb(mapping, pos)
                        _false_counter, pos = _read_uleb(mapping, pos)
                    else:
                        raise MalformedProfile(
                            f"unknown pseudo region kind {pseudo}"
                        )
            delta_line, pos = _read_uleb(mapping, pos)
            col_start, pos = _read_uleb(mapping, pos)
            num_lines, pos = _read_uleb(mapping, pos)
            col_end, pos = _read_uleb(mapping, pos)
            if col_end & (1 << 31):
                kind = KIND_GAP
                col_end &= ~(1 << 31)
            line += delta_line
            regions.append((slot, kind, raw_counter, line, col_start, line + num_lines, col_end))
    return tuple(file_ids), tuple(exprs), tuple(regions)


def decode_binary_mapping(binary: Path) -> tuple[list[FunctionMapping], dict[int, list[str]], dict[int, str]]:
    sections = elf_sections(binary)
    covfun_chunks = sections.get("__llvm_covfun")
    covmap_chunks = sections.get("__llvm_covmap")
    if not covfun_chunks or not covmap_chunks:
        raise MalformedProfile(f"{binary}: no coverage mapping sections")
    tables = _decode_filename_tables(covmap_chunks)
    names: dict[int, str] = {}
    for blob in sections.get("__llvm_prf_names", []):
        names.update(_decode_name_blob(blob))

    functions: list[FunctionMapping] = []
    seen: set[tuple[int, int]] = set()
    for chunk in covfun_chunks:
        pos = 0
        while pos + 28 <= len(chunk):
            name_md5, data_len = struct.unpack_from("<QI", chunk, pos)
            func_hash, filenames_ref = struct.unpack_from("<QQ", chunk, pos + 12)
            mapping = chunk[pos + 28 : pos + 28 + data_len]
            pos += 28 + data_len
            pos = (pos + 7) & ~7
            if (name_md5, func_hash) in seen:
                continue  # duplicate comdat copy
            seen.add((name_md5, func_hash))
            file_ids, exprs, regions = _decode_mapping_data(mapping)
            functions.append(
                FunctionMapping(
                    name_md5=name_md5,
                    func_hash=func_hash,
                    filenames_ref=filenames_ref,
                    file_ids=file_ids,
                    expressions=exprs,
                    regions=regions,
                )
            )
    return functions, tables, names


def _eval_counter(raw: int, exprs: tuple, counters: Sequence[int], depth: int = 0) -> int:
    if depth > 256:
        raise MalformedProfile("counter expression too deep")
    tag = raw & 3
    value = raw >> 2
    if tag == 0:
        return 0
    if tag == 1:
        return counters[value] if value < len(counters) else 0
    if value >= len(exprs):
        raise MalformedProfile(f"expression index {value} out of range")
    lhs, rhs = exprs[value]
    left = _eval_counter(lhs, exprs, counters, depth + 1)
    right = _eval_counter(rhs, exprs, counters, depth + 1)
    return max(0, left - right) if tag == 2 else left + right


def build_coverage_map(
    binary: Path,
    profraw_paths: Sequence[Path],
    source_root: Optional[Path] = None,
) -> CoverageMap:
    """Decode binary mapping + raw profiles into a CoverageMap."""
    functions, tables, names = decode_binary_mapping(binary)
    counts = merge_profraw_counts(profraw_paths)

    function_regions = []
    for fm in functions:
        table = tables.get(fm.filenames_ref)
        if table is None:
            continue
        counters = counts.get((fm.name_md5, fm.func_hash), [])
        by_file: dict[str, list[Region]] = {}
        for slot, kind, raw_counter, ls, cs, le, ce in fm.regions:
            if kind == KIND_BRANCH:
                continue  # line counts come from code/gap regions
            count = _eval_counter(raw_counter, fm.expressions, counters)
            idx = fm.file_ids[slot]
            file = table[idx] if idx < len(table) else table[-1]
            by_file.setdefault(file, []).append(
                Region(
                    kind=kind,
                    count=count,
                    line_start=ls,
                    col_start=cs,
                    line_end=le,
                    col_end=ce,
                )
            )
        if not by_file:
            continue
        home = max(by_file, key=lambda f: len(by_file[f]))
        home_regions = by_file[home]
        code = [r for r in home_regions if r.kind == KIND_CODE]
        entry = 0
        if code:
            body = min(code, key=lambda r: (r.line_start, r.col_start))
            entry = body.count
        name = names.get(fm.name_md5, f"<unnamed:{fm.name_md5:#x}>")
        function_regions.append((name, home, entry, home_regions))
    return build_map(
        function_regions, binary_id=str(binary), source_root=source_root
    )
