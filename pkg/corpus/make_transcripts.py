"""Regenerates the pinned replay transcripts for the corpus targets.

Each transcript scripts one full pipeline run (analysis, build plan, test
cases, PoV candidates). Running here in fill mode executes the real pipeline
against the real toolchain, captures the request digest of every call, and
pins it so later replays verify byte-identical prompts.

Run from the repository root: python3 corpus/make_transcripts.py
"""
import json
import sys
import tempfile
from pathlib import Path

CORPUS = Path(__file__).parent
sys.path.insert(0, str(CORPUS.parent / "src"))

from drill.llm import ReplayBackend, ReplayEntry, ToolCall, Usage  # noqa: E402
from drill.pipeline import TaskRunner  # noqa: E402
from drill.taskmodel import load_task_spec, with_overrides  # noqa: E402

USAGE = Usage(input_tokens=2200, output_tokens=180)


def ent(calls=(), content=""):
    return ReplayEntry(
        response_content=content,
        tool_calls=tuple(
            ToolCall(call_id=f"call_{i}", name=name, arguments=args)
            for i, (name, args) in enumerate(calls)
        ),
        usage=USAGE,
    )


def finish(payload) -> ReplayEntry:
    if not isinstance(payload, str):
        payload = json.dumps(payload)
    return ent([("finish", {"payload": payload})])


def va_flow(harness_cmd: str, forward: str, backward: str, type_specific: str):
    return [
        ent([("read_file", {"path": "work/repo_src/README.md"})]),
        finish(
            {
                "harness_cmd": harness_cmd,
                "input_extension": None,
                "root_cause": {
                    "forward": forward,
                    "backward": backward,
                    "type_specific": type_specific,
                },
            }
        ),
    ]


def plan_flow(entry_point: str):
    return [finish({"steps": ["make"], "env": {}, "entry_point": entry_point})]


def plan_fix(entry_point: str):
    return [
        finish(
            {
                "steps": ["rm -f target_bin", 'make CFLAGS="$CFLAGS"'],
                "env": {},
                "entry_point": entry_point,
            }
        )
    ]


def gen_write(kind: str, i: int, content: str):
    path = f"iters/{kind}_{i}/input.bin"
    return [
        ent([("write_file", {"path": path, "content": content})]),
        finish({"input_path": path, "script_path": None}),
    ]


def gen_script(kind: str, i: int, code: str):
    base = f"iters/{kind}_{i}"
    return [
        ent([("write_file", {"path": f"{base}/gen.py", "content": code})]),
        ent([("execute_bash", {"cmd": f"python3 {base}/gen.py"})]),
        finish({"input_path": f"{base}/input.bin", "script_path": f"{base}/gen.py"}),
    ]


MAGIC_GATE_POV_SCRIPT = """\
import struct
payload = bytes(range(32))
data = b"MGK1" + bytes([1]) + struct.pack("<H", len(payload)) + struct.pack("<H", 4) + payload
open("iters/ct_1/input.bin", "wb").write(data)
"""

FLOWS = {
    "magic_gate": {
        "file": "transcript.json",
        "verdict": "validated",
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input needs the MGK1 magic, a record count byte, then records "
                "of [len:2][hint:2][payload:len].",
                "copy_payload memcpy's the declared payload length into a "
                "buffer sized by the separate allocation hint.",
                "declare a payload length larger than the allocation hint to "
                "overflow the heap buffer.",
            )
            + plan_flow("target_bin")
            + gen_write("pe", 1, "HELLO")
            + gen_write("pe", 2, "MGK1\x01\x04\x00\x08\x00ABCD")
            + gen_script("ct", 1, MAGIC_GATE_POV_SCRIPT)
        ),
    },
    "magic_gate_budget": {
        "target": "magic_gate",
        "file": "transcript_budget.json",
        "verdict": "validated",
        "budget": 0.000001,
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input needs the MGK1 magic, a record count byte, then records "
                "of [len:2][hint:2][payload:len].",
                "copy_payload memcpy's the declared payload length into a "
                "buffer sized by the separate allocation hint.",
                "declare a payload length larger than the allocation hint to "
                "overflow the heap buffer.",
            )
            + plan_flow("target_bin")
            + gen_write("pe", 1, "MGK1\x01\x04\x00\x08\x00ABCD")
            + gen_script("ct", 1, MAGIC_GATE_POV_SCRIPT)
        ),
    },
    "uaf_order": {
        "file": "transcript.json",
        "verdict": "validated",
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input is UF01 magic, an op count byte, then opcode bytes "
                "(o open, c close, w write, g+idx peek).",
                "handle_write dereferences the handle after handle_close "
                "already freed it.",
                "order the ops so close precedes write on the same handle.",
            )
            + plan_flow("target_bin")
            + gen_write("pe", 1, "UF01\x03owc")
            + gen_write("ct", 1, "UF01\x03ocw")
        ),
    },
    "uaf_order_variant": {
        "target": "uaf_order",
        "file": "transcript_variant.json",
        "verdict": "variant",
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input is UF01 magic, an op count byte, then opcode bytes "
                "(o open, c close, w write, g+idx peek).",
                "handle_write dereferences the handle after handle_close "
                "already freed it.",
                "order the ops so close precedes write on the same handle.",
            )
            + plan_flow("target_bin")
            + gen_write("pe", 1, "UF01\x03owc")
            # Deliberately wrong: overruns the mode table instead of the UAF.
            + gen_write("ct", 1, "UF01\x02g\x09")
        ),
    },
    "flag_override": {
        "file": "transcript.json",
        "verdict": "validated",
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input is FO01 magic plus one slot index byte.",
                "poke writes to scratch[idx] with no bound check against the "
                "8-byte allocation.",
                "pick a slot index of 8 or more.",
            )
            + plan_flow("target_bin")
            + plan_fix("target_bin")  # coverage build: flags were dropped
            + plan_fix("target_bin")  # sanitizer build: same repair
            + gen_write("pe", 1, "FO01\x03")
            + gen_write("ct", 1, "FO01\x20")
        ),
    },
    "leak_exit": {
        "file": "transcript.json",
        "verdict": "validated",
        "entries": (
            va_flow(
                "./target_bin {input}",
                "input is LK01 magic, an entry count byte, then tag bytes "
                "(a add entry, q quit).",
                "the q tag returns from load_entries before the cleanup loop "
                "frees the added entries.",
                "add several entries and then quit early so the allocations "
                "leak.",
            )
            + plan_flow("target_bin")
            + gen_write("pe", 1, "LK01\x02aa")
            + gen_write("ct", 1, "LK01\x05aaaaq")
        ),
    },
    "wrapper_entry": {
        "file": "transcript.json",
        "verdict": "validated",
        "entries": (
            va_flow(
                "./run.sh {input}",
                "input is WR01 magic plus one selector byte.",
                "table_get indexes the fixed 4-entry mode table without any "
                "bound check.",
                "select an index of 4 or more.",
            )
            + plan_flow("run.sh")
            + gen_write("pe", 1, "WR01\x02")
            + gen_write("ct", 1, "WR01\x09")
        ),
    },
}


def main():
    only = sys.argv[1:] or list(FLOWS)
    for flow_name in only:
        meta = FLOWS[flow_name]
        target = meta.get("target", flow_name)
        target_dir = CORPUS / target
        spec, config = load_task_spec(target_dir / "truth" / "task.json")
        if "budget" in meta:
            config = with_overrides(config, budget_usd=meta["budget"])
        backend = ReplayBackend(
            [ReplayEntry(**vars(e)) for e in meta["entries"]], fill=True
        )
        with tempfile.TemporaryDirectory() as tmp:
            runner = TaskRunner(spec, config, backend, Path(tmp) / "run")
            report = runner.run()
        assert report.verdict == meta["verdict"], (
            flow_name,
            report.verdict,
            report.failing_phase,
            report.failure_reason,
        )
        assert backend.cursor == len(backend.entries), (
            flow_name,
            f"consumed {backend.cursor} of {len(backend.entries)} entries",
        )
        out = target_dir / "truth" / meta["file"]
        out.write_text(json.dumps(backend.to_document(), indent=1) + "\n")
        print(f"{flow_name}: verdict={report.verdict} entries={backend.cursor} -> {out}")


if __name__ == "__main__":
    main()
