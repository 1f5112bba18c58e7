"""Regenerates each corpus target's ground truth: the benign and crashing
inputs, and a task document embedding a real sanitizer report.

Build-time flags relativize debug paths so the embedded reports are
machine-independent. Run from the repository root:

    python3 corpus/make_truth.py
"""
import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

CORPUS = Path(__file__).parent
sys.path.insert(0, str(CORPUS.parent / "src"))

from drill.sanitizer import match_crash, parse_sanitizer_report  # noqa: E402
from drill.taskmodel import parse_task_document  # noqa: E402

TARGETS = {
    "magic_gate": {
        "v_effect": "heap-buffer-overflow",
        "benign": b"MGK1" + bytes([1]) + (4).to_bytes(2, "little") + (8).to_bytes(2, "little") + b"ABCD",
        "crash": b"MGK1" + bytes([1]) + (32).to_bytes(2, "little") + (4).to_bytes(2, "little") + bytes(range(32)),
        "n1": 2,
        "n2": 1,
        "entry": "target_bin",
        "detect_leaks": False,
    },
    "uaf_order": {
        "v_effect": "heap-use-after-free",
        "benign": b"UF01" + bytes([3]) + b"owc",
        "crash": b"UF01" + bytes([3]) + b"ocw",
        "n1": 1,
        "n2": 1,
        "entry": "target_bin",
        "detect_leaks": False,
    },
    "flag_override": {
        "v_effect": "heap-buffer-overflow",
        "benign": b"FO01" + bytes([3]),
        "crash": b"FO01" + bytes([32]),
        "n1": 1,
        "n2": 1,
        "entry": "target_bin",
        "detect_leaks": False,
    },
    "leak_exit": {
        "v_effect": "memory-leak",
        "benign": b"LK01" + bytes([2]) + b"aa",
        "crash": b"LK01" + bytes([5]) + b"aaaaq",
        "n1": 1,
        "n2": 1,
        "entry": "target_bin",
        "detect_leaks": True,
    },
    "wrapper_entry": {
        "v_effect": "global-buffer-overflow",
        "benign": b"WR01" + bytes([2]),
        "crash": b"WR01" + bytes([9]),
        "n1": 1,
        "n2": 1,
        "entry": "run.sh",
        "detect_leaks": False,
    },
}

SAN_FLAGS = "-fsanitize=address -fno-omit-frame-pointer -gdwarf-4 -O0 -Wall -Werror"


def build_with_asan(target_dir: Path) -> None:
    subprocess.run(["make", "clean"], cwd=target_dir, check=True, capture_output=True)
    env = dict(os.environ)
    env["CC"] = "clang"
    flags = f"{SAN_FLAGS} -fdebug-prefix-map={target_dir}=."
    # flag_override drops env CFLAGS by design: pass them as a make variable.
    subprocess.run(
        ["make", f"CFLAGS={flags}"],
        cwd=target_dir,
        env=env,
        check=True,
        capture_output=True,
    )


def run_target(target_dir: Path, entry: str, input_file: Path, detect_leaks: bool, log_dir: Path):
    env = dict(os.environ)
    sym = shutil.which("llvm-symbolizer") or shutil.which("addr2line")
    env["ASAN_SYMBOLIZER_PATH"] = sym
    env["ASAN_OPTIONS"] = (
        f"abort_on_error=0:detect_leaks={1 if detect_leaks else 0}:"
        f"log_path={log_dir}/asan:allow_addr2line=1"
    )
    return subprocess.run(
        [f"./{entry}", str(input_file)],
        cwd=target_dir,
        env=env,
        capture_output=True,
        text=True,
    )


def main():
    for name, meta in TARGETS.items():
        target_dir = CORPUS / name
        truth = target_dir / "truth"
        truth.mkdir(exist_ok=True)
        (truth / "benign_input.bin").write_bytes(meta["benign"])
        (truth / "crash_input.bin").write_bytes(meta["crash"])

        build_with_asan(target_dir)
        log_dir = truth / "_logs"
        log_dir.mkdir(exist_ok=True)
        for stale in log_dir.glob("asan.*"):
            stale.unlink()

        benign = run_target(
            target_dir, meta["entry"], truth / "benign_input.bin",
            meta["detect_leaks"], log_dir,
        )
        assert benign.returncode == 0, (name, "benign input must exit 0", benign.stderr)
        assert not list(log_dir.glob("asan.*")), (name, "benign input crashed")

        crash = run_target(
            target_dir, meta["entry"], truth / "crash_input.bin",
            meta["detect_leaks"], log_dir,
        )
        logs = sorted(log_dir.glob("asan.*"))
        assert logs, (name, "crash input produced no sanitizer report", crash.stderr)
        report = logs[-1].read_text()

        info = parse_sanitizer_report(report)
        assert info.kind.token == meta["v_effect"], (name, info.kind.token)
        assert len(info.trace.frames) >= 3, (name, "needs >= 3 source frames")
        frame0 = info.trace.frames[0]
        file = frame0.file[2:] if frame0.file.startswith("./") else frame0.file

        doc = {
            "project_id": name,
            "repo_path": "..",
            "v_location": {
                "file": file,
                "line": frame0.line,
                "function": frame0.function,
            },
            "v_effect": meta["v_effect"],
            "sanitizer_report": report,
            "n1": meta["n1"],
            "n2": meta["n2"],
        }
        spec, config = parse_task_document(dict(doc), base_dir=truth)
        verdict = match_crash(info, spec)
        assert verdict.is_validated, (name, "self-check failed", verdict.label)
        (truth / "task.json").write_text(json.dumps(doc, indent=2) + "\n")

        shutil.rmtree(log_dir)
        subprocess.run(["make", "clean"], cwd=target_dir, check=True, capture_output=True)
        print(f"{name}: frame0={frame0.function} {file}:{frame0.line} "
              f"frames={len(info.trace.frames)}")


if __name__ == "__main__":
    main()
