"""Four-phase task orchestration: analyze, instrument, explore, trigger.

One task runs strictly sequentially through the phases; each phase is driven
by its own role-specialized agent. Execution feedback is injected into the
agent context deterministically (function-level backtrace coverage plus the
parsed sanitizer outcome), and finer-grained coverage is available on demand
through the coverage_query tool.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import build as buildmod
from . import sanitizer as oracle
from . import taskmodel
from .agent import (
    AgentConfig,
    AgentContext,
    BudgetDecision,
    Sandbox,
    Tool,
    Toolbox,
    check_budget,
    run_agent,
)
from .coverage import (
    CoverageMap,
    CoverageQuery,
    CoverageRunner,
    collect_trace_coverage,
    query_coverage,
    reaches_vuln_func,
    render_trace_feedback,
)
from .errors import (
    AnalysisFailed,
    BuildFailed,
    DrillError,
    MalformedProfile,
    PlanNotFound,
    RefinerFailure,
    TurnCapReached,
)
from .llm import ModelParams, UsageLedger
from .sanitizer import CrashInfo, CrashTrace, Verdict, match_crash, nocrash
from .taskmodel import (
    PHASE_CRASH_TRIGGER,
    PHASE_INSTRUMENTATION,
    PHASE_PATH_EXPLORE,
    PHASE_REFINE,
    PHASE_VULN_ANALYSIS,
    CrashKind,
    PhaseStats,
    TaskConfig,
    TaskReport,
    VulnSpec,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RootCause:
    forward: str  # input-format prerequisites, entry inward
    backward: str  # security-violating conditions, crash site outward
    type_specific: str  # instance pattern for this vulnerability class

    def __post_init__(self):
        if not (self.forward and self.backward and self.type_specific):
            raise AnalysisFailed("root cause must fill all three sections")

    def render(self) -> str:
        return (
            f"forward (input format): {self.forward}\n"
            f"backward (violation conditions): {self.backward}\n"
            f"type-specific pattern: {self.type_specific}"
        )


@dataclass(frozen=True)
class VAReport:
    crash_kind: CrashKind
    crash_trace: CrashTrace
    harness_cmd: str  # contains exactly one {input} placeholder
    input_extension: Optional[str]
    root_cause: RootCause

    def __post_init__(self):
        if self.harness_cmd.count("{input}") != 1:
            raise AnalysisFailed(
                f"harness command needs exactly one {{input}} placeholder: "
                f"{self.harness_cmd!r}"
            )

    def to_document(self) -> dict:
        return {
            "crash_trace": oracle.crash_trace_document(self.crash_kind, self.crash_trace),
            "harness_cmd": self.harness_cmd,
            "input_extension": self.input_extension,
            "root_cause": {
                "forward": self.root_cause.forward,
                "backward": self.root_cause.backward,
                "type_specific": self.root_cause.type_specific,
            },
        }

    @classmethod
    def from_document(cls, doc: dict) -> "VAReport":
        kind, trace = oracle.parse_crash_trace_document(doc["crash_trace"])
        rc = doc["root_cause"]
        return cls(
            crash_kind=kind,
            crash_trace=trace,
            harness_cmd=doc["harness_cmd"],
            input_extension=doc.get("input_extension"),
            root_cause=RootCause(
                forward=rc["forward"],
                backward=rc["backward"],
                type_specific=rc["type_specific"],
            ),
        )


@dataclass
class TestCase:
    id: int
    path: Path
    producer_script: Optional[Path]
    reaches_vuln: bool
    deepest_reached: int


@dataclass(frozen=True)
class Guidance:
    vuln_type: CrashKind
    hint_text: str


# Strategy hints per vulnerability class; the fallback keeps the loop moving
# for classes without a dedicated entry.
GUIDANCE_TABLE = {
    "heap-buffer-overflow": (
        "Target the heap allocation feeding the crash site: make a length or "
        "count field in the input larger than the bytes actually allocated, "
        "or shrink the allocation while keeping the consumer's loop bound "
        "high. Off-by-one on size fields and mismatched declared-vs-actual "
        "payload sizes are the usual levers."
    ),
    "stack-buffer-overflow": (
        "Overflow the fixed-size stack buffer: supply a field longer than "
        "the destination array (watch for strcpy/sprintf/memcpy into locals) "
        "and push well past the bound rather than one byte."
    ),
    "heap-use-after-free": (
        "Order operations so the object is freed before its last use: craft "
        "input with records that first release the object (delete/close/"
        "reset paths) and then force a path that touches it again."
    ),
    "null-dereference": (
        "Make the dereferenced object absent: omit the section/record that "
        "initializes it, or force the lookup/open/parse step to fail so the "
        "code proceeds with a null pointer."
    ),
    "memory-leak": (
        "Drive allocations down a path that exits before the matching free: "
        "trigger the early-return or error branch right after the allocation "
        "succeeds, ideally repeatedly."
    ),
    "global-buffer-overflow": (
        "Index the global table out of range: supply an index or selector "
        "field beyond the table size, minding any validation on the way."
    ),
    "stack-use-after-return": (
        "Make the program retain a pointer to a stack frame that has "
        "returned, then force a later access through it."
    ),
}
GENERIC_GUIDANCE = (
    "Reach the crash site with a structurally valid input first, then "
    "perturb the fields that control sizes, counts, offsets, and object "
    "lifetimes until the sanitizer fires."
)

_TRIAGE_KEYWORDS = [
    ("use-after-free", "heap-use-after-free"),
    ("use after free", "heap-use-after-free"),
    ("double-free", "heap-use-after-free"),
    ("heap-buffer-overflow", "heap-buffer-overflow"),
    ("heap overflow", "heap-buffer-overflow"),
    ("stack-buffer-overflow", "stack-buffer-overflow"),
    ("stack overflow", "stack-buffer-overflow"),
    ("global-buffer-overflow", "global-buffer-overflow"),
    ("null pointer", "null-dereference"),
    ("null-dereference", "null-dereference"),
    ("memory leak", "memory-leak"),
    ("leak", "memory-leak"),
    ("use-after-return", "stack-use-after-return"),
]


def sample_vuln_type_hints(root_cause: str, spec: Optional[VulnSpec]) -> Guidance:
    """Pick the vulnerability class (ground truth when given, keyword triage
    of the root cause otherwise) and return its generation strategy hint."""
    if not root_cause:
        raise ValueError("root cause must be non-empty")
    if spec is not None:
        kind = spec.v_effect
    else:
        lowered = root_cause.lower()
        kind = CrashKind("unknown")
        for needle, token in _TRIAGE_KEYWORDS:
            if needle in lowered:
                kind = CrashKind(token)
                break
    return Guidance(
        vuln_type=kind, hint_text=GUIDANCE_TABLE.get(kind.token, GENERIC_GUIDANCE)
    )


# --- agent plumbing -----------------------------------------------------------

SYSTEM_PROMPTS = {
    PHASE_VULN_ANALYSIS: (
        "You are a vulnerability analyst. Study the target repository and the "
        "crash information, work out how the program is invoked and why the "
        "bug fires, and report findings exactly in the JSON shape requested."
    ),
    PHASE_REFINE: oracle.REFINER_SYSTEM_PROMPT,
    PHASE_INSTRUMENTATION: (
        "You are a build engineer. Derive and repair build commands for this "
        "project; never modify its source files. Reply only through tool "
        "calls, finishing with the JSON payload requested."
    ),
    PHASE_PATH_EXPLORE: (
        "You generate test inputs that drive execution toward the crash "
        "location. Use the coverage feedback to see where execution stalls, "
        "satisfy format checks one by one, and produce each input file "
        "exactly where instructed."
    ),
    PHASE_CRASH_TRIGGER: (
        "You craft proof-of-vulnerability inputs. Start from the useful test "
        "cases that already reach the vulnerable code, apply the guidance, "
        "and aim to trigger the exact crash type at the target location."
    ),
}

_AGENT_TOOLS = (
    "read_file",
    "write_file",
    "execute_bash",
    "ast_grep_search_function",
    "ast_grep_search_pattern",
    "coverage_query",
    "finish",
)

MAX_TURNS = {
    PHASE_VULN_ANALYSIS: 16,
    PHASE_REFINE: 4,
    PHASE_INSTRUMENTATION: 8,
    PHASE_PATH_EXPLORE: 10,
    PHASE_CRASH_TRIGGER: 10,
}


class PhaseAgent:
    """One phase's bound agent: config + shared context + toolbox + backend."""

    def __init__(self, runner: "TaskRunner", phase: str):
        self.runner = runner
        self.phase = phase
        assignment = runner.config.model_for(phase)
        self.params = ModelParams(
            model_id=assignment.model_id,
            temperature=assignment.temperature,
            price_in_per_mtok=assignment.price_in_per_mtok,
            price_out_per_mtok=assignment.price_out_per_mtok,
        )

    def run(self, instruction: str) -> str:
        config = AgentConfig(
            phase=self.phase,
            system_prompt=SYSTEM_PROMPTS[self.phase],
            allowed_tools=_AGENT_TOOLS,
            max_turns=MAX_TURNS[self.phase],
            params=self.params,
        )
        outcome = run_agent(
            config,
            self.runner.context,
            self.runner.toolbox,
            self.runner.backend,
            instruction=instruction,
        )
        return outcome.payload


# --- instructions ----------------------------------------------------------------

VA_INSTRUCTION = (
    "Analyze the vulnerability described above. The repository sources are "
    "under {repo_rel}/.\n"
    "1. Determine the harness command that runs the built program on one "
    "input file (inspect entry points, argument parsing, usage strings); use "
    "the literal token {{input}} as the input-file placeholder.\n"
    "2. If the program only accepts particular file extensions, name the "
    "required extension.\n"
    "3. Explain the root cause in three sections: forward (what input "
    "structure the parser requires to reach the code), backward (what "
    "conditions at the crash site violate memory safety), type_specific "
    "(how this instance of the vulnerability class is triggered).\n"
    'Finish with JSON: {{"harness_cmd": "...", "input_extension": ".ext"|null, '
    '"root_cause": {{"forward": "...", "backward": "...", "type_specific": "..."}}}}'
)

GEN_INSTRUCTION = (
    "{role_line}\n"
    "Write the input file to {input_rel} — directly with write_file for "
    "textual formats, or by writing a small generator script to "
    "{script_rel} and running it with execute_bash for binary formats. "
    'When the file exists, call finish with JSON: {{"input_path": '
    '"{input_rel}", "script_path": "<path or null>"}}.'
)


# --- the task runner ---------------------------------------------------------------

@dataclass
class PhaseClock:
    started: float = 0.0
    stats: dict[str, float] = field(default_factory=dict)

    def start(self):
        self.started = time.monotonic()

    def stop(self, phase: str):
        self.stats[phase] = self.stats.get(phase, 0.0) + time.monotonic() - self.started


class TaskRunner:
    """Runs one task end to end inside its own run directory."""

    def __init__(
        self,
        spec: VulnSpec,
        config: TaskConfig,
        backend,
        run_dir: Path,
    ):
        self.spec = spec
        self.config = config
        self.backend = backend
        self.run_dir = Path(run_dir).resolve()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.work_dir = self.run_dir / "work"
        self.ledger = UsageLedger()
        self.context = AgentContext(ledger=self.ledger)
        self.sandbox = Sandbox(
            self.run_dir, exec_timeout_secs=config.exec_timeout_secs
        )
        self.toolbox = Toolbox(
            self.sandbox, output_limit=config.tool_output_limit_chars
        )
        self._latest_cov: Optional[CoverageMap] = None
        self.toolbox.register(
            Tool(
                "coverage_query",
                "Query the latest execution's source coverage: "
                '{"kind": "function"|"uncovered_in_function", "name": ...} or '
                '{"kind": "file_lines", "path": ..., "start": N, "end": N}.',
                {
                    "type": "object",
                    "properties": {
                        "kind": {"type": "string"},
                        "name": {"type": "string"},
                        "path": {"type": "string"},
                        "start": {"type": "integer"},
                        "end": {"type": "integer"},
                    },
                    "required": ["kind"],
                },
                self._tool_coverage_query,
            )
        )
        self._clock = PhaseClock()
        self._pe_cycles = 0
        self._ct_cycles = 0

    # -- helpers ---------------------------------------------------------------

    def _tool_coverage_query(self, args: dict) -> str:
        if self._latest_cov is None:
            return "no coverage collected yet in this phase"
        query = CoverageQuery.from_arguments(args)
        return query_coverage(
            self._latest_cov, query, limit=self.config.tool_output_limit_chars
        )

    def _rel(self, path: Path) -> str:
        return os.path.relpath(path, self.run_dir)

    def _agent(self, phase: str) -> PhaseAgent:
        return PhaseAgent(self, phase)

    def _copy_repo(self, name: str) -> Path:
        dest = self.work_dir / name
        if dest.exists():
            shutil.rmtree(dest)
        shutil.copytree(self.spec.repo_path, dest, symlinks=True)
        return dest

    # -- phase 1: vulnerability analysis ----------------------------------------

    def phase_vuln_analysis(self) -> VAReport:
        spec = self.spec
        if spec.sanitizer_report:
            info = oracle.parse_sanitizer_report(spec.sanitizer_report)
            kind, trace = info.kind, info.trace
        else:
            if not spec.v_location.function:
                raise AnalysisFailed(
                    "no sanitizer report and no function name in v_location"
                )
            kind = spec.v_effect
            trace = CrashTrace(
                frames=(
                    oracle.StackFrame(
                        index=0,
                        function=spec.v_location.function,
                        file=spec.v_location.file,
                        line=spec.v_location.line,
                    ),
                )
            )

        repo_src = self._copy_repo("repo_src")
        try:
            trace = oracle.refine_trace_lines(trace, repo_src, self._agent(PHASE_REFINE))
        except RefinerFailure as e:
            log.warning("trace refinement failed, using raw trace: %s", e)
        oracle.write_crash_trace(self.run_dir / "crash_trace.json", kind, trace)

        self.context.update(
            [
                ("vulnerability", self._render_vuln_block(kind)),
                (
                    "crash_backtrace",
                    json.dumps(oracle.crash_trace_document(kind, trace), indent=1),
                ),
            ]
        )
        payload = self._agent(PHASE_VULN_ANALYSIS).run(
            VA_INSTRUCTION.format(repo_rel=self._rel(repo_src))
        )
        try:
            doc = json.loads(payload)
            rc = doc["root_cause"]
            va = VAReport(
                crash_kind=kind,
                crash_trace=trace,
                harness_cmd=doc["harness_cmd"],
                input_extension=doc.get("input_extension"),
                root_cause=RootCause(
                    forward=rc.get("forward", ""),
                    backward=rc.get("backward", ""),
                    type_specific=rc.get("type_specific", ""),
                ),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise AnalysisFailed(f"analysis payload unusable: {e}") from e
        (self.run_dir / "va_report.json").write_text(
            json.dumps(va.to_document(), indent=2) + "\n"
        )
        self.context.update([("root_cause", va.root_cause.render())])
        return va

    def _render_vuln_block(self, kind: CrashKind) -> str:
        spec = self.spec
        lines = [
            f"project: {spec.project_id}",
            f"expected effect: {spec.v_effect.token}",
            f"target location: {spec.v_location.file}:{spec.v_location.line}"
            + (f" (function {spec.v_location.function})" if spec.v_location.function else ""),
        ]
        if spec.cve_id:
            lines.append(f"cve: {spec.cve_id}")
        if kind != spec.v_effect:
            lines.append(f"report shows: {kind.token}")
        return "\n".join(lines)

    # -- phase 2: instrumentation -------------------------------------------------

    def phase_instrumentation(self) -> tuple[Path, Path]:
        agent = self._agent(PHASE_INSTRUMENTATION)
        repo_src = self.work_dir / "repo_src"
        if not repo_src.exists():
            repo_src = self._copy_repo("repo_src")
        base_plan = buildmod.derive_build_plan(repo_src, agent)
        (self.run_dir / "build_plan.json").write_text(
            json.dumps(base_plan.to_document(), indent=2) + "\n"
        )

        binaries = {}
        for label, kind in (
            ("cov", buildmod.InstrumentationKind.coverage()),
            (
                "san",
                buildmod.InstrumentationKind.sanitizer_for_effect(self.spec.v_effect),
            ),
        ):
            repo_copy = self._copy_repo(f"repo_{label}")
            plan = buildmod.inject_flags(
                buildmod.plan_for_repo_copy(base_plan, repo_copy), kind
            )
            result = buildmod.run_build(
                plan,
                agent,
                max_attempts=buildmod.DEFAULT_MAX_ATTEMPTS,
                kind=kind,
                log_path=self.run_dir / f"build_{label}.log",
            )
            binaries[label] = result.binary_path
        return binaries["cov"], binaries["san"]

    # -- execution helpers ----------------------------------------------------------

    def _harness_cmd(self, va: VAReport, input_path: Path, cwd: Path) -> str:
        rel = os.path.relpath(input_path, cwd)
        return va.harness_cmd.replace("{input}", rel)

    def _run_on_cov(
        self, va: VAReport, input_path: Path, runner: CoverageRunner
    ) -> tuple[str, int, CoverageMap]:
        cwd = self.work_dir / "repo_cov"
        runner.reset()
        ok, output, code = self.sandbox.execute(
            self._harness_cmd(va, input_path, cwd),
            env=runner.environment(),
            cwd=cwd,
        )
        try:
            cov = runner.collect()
        except MalformedProfile:
            cov = CoverageMap(functions={}, files={})
            output += "\n[no coverage profile was produced; the run likely crashed]"
        self._latest_cov = cov
        return output, code, cov

    def _run_on_san(
        self, va: VAReport, input_path: Path, iter_dir: Path
    ) -> Optional[CrashInfo]:
        cwd = self.work_dir / "repo_san"
        kind = buildmod.InstrumentationKind.sanitizer_for_effect(self.spec.v_effect)
        env = buildmod.sanitizer_runtime_env(
            kind,
            log_dir=iter_dir,
            detect_leaks=self.spec.v_effect == taskmodel.MEMORY_LEAK,
        )
        ok, output, code = self.sandbox.execute(
            self._harness_cmd(va, input_path, cwd), env=env, cwd=cwd
        )
        report_text = self._newest_sanitizer_log(iter_dir)
        if report_text is None and "ERROR:" in output:
            report_text = output
        if report_text is None:
            return None
        (iter_dir / "asan_report.txt").write_text(report_text)
        try:
            return oracle.parse_sanitizer_report(report_text)
        except DrillError as e:
            log.warning("unparseable sanitizer report: %s", e)
            return None

    @staticmethod
    def _newest_sanitizer_log(iter_dir: Path) -> Optional[str]:
        logs = sorted(iter_dir.glob("asan.*"), key=lambda p: p.stat().st_mtime)
        if not logs:
            return None
        return logs[-1].read_text(errors="replace")

    def _resolve_input(self, payload: str, iter_dir: Path) -> tuple[Optional[Path], Optional[Path]]:
        """The generator agents finish with an input path (JSON or bare)."""
        script = None
        path_str = payload.strip()
        try:
            doc = json.loads(payload)
            if isinstance(doc, dict):
                path_str = doc.get("input_path", "")
                if doc.get("script_path"):
                    script = doc["script_path"]
        except json.JSONDecodeError:
            pass
        if not path_str:
            return None, None
        candidate = (self.run_dir / path_str).resolve()
        if self.run_dir not in candidate.parents or not candidate.is_file():
            return None, None
        script_path = None
        if script:
            sp = (self.run_dir / script).resolve()
            if self.run_dir in sp.parents and sp.is_file():
                script_path = sp
        return candidate, script_path

    def _budget_gate(self, cycles_done: int) -> BudgetDecision:
        return check_budget(self.ledger, self.config.budget_usd, cycles_done >= 1)

    @staticmethod
    def _digest(path: Path) -> str:
        return hashlib.sha256(path.read_bytes()).hexdigest()[:8]

    # -- phase 3: path exploration -----------------------------------------------

    def phase_path_explore(self, va: VAReport, p_cov: Path) -> list[TestCase]:
        useful: list[TestCase] = []
        runner = CoverageRunner(
            self.work_dir / "profiles",
            p_cov,
            source_root=self.work_dir / "repo_cov",
        )
        self._latest_cov = None
        history: list[str] = []
        ext_note = (
            f" The program expects inputs with extension {va.input_extension}."
            if va.input_extension
            else ""
        )
        n1 = self.config.n1_max_iterations
        agent = self._agent(PHASE_PATH_EXPLORE)
        for i in range(1, n1 + 1):
            decision = self._budget_gate(self._pe_cycles)
            if decision is BudgetDecision.HARD_STOP:
                break
            last_cycle = decision is BudgetDecision.FINISH_AFTER_CURRENT_CYCLE
            iter_dir = self.run_dir / "iters" / f"pe_{i}"
            iter_dir.mkdir(parents=True, exist_ok=True)
            input_name = f"input{va.input_extension or '.bin'}"
            instruction = GEN_INSTRUCTION.format(
                role_line=(
                    f"Path-exploration iteration {i} of {n1}: generate a test "
                    f"case that gets execution as deep into the crash "
                    f"backtrace as possible.{ext_note}"
                ),
                input_rel=f"iters/pe_{i}/{input_name}",
                script_rel=f"iters/pe_{i}/gen.py",
            )
            try:
                payload = agent.run(instruction)
            except TurnCapReached:
                payload = ""
            input_path, script = self._resolve_input(payload, iter_dir)
            self._pe_cycles += 1
            if input_path is None:
                log.warning("pe_%d: no input file materialized; skipping", i)
                history.append(f"pe_{i}: no input produced")
                self.context.update(
                    [("iteration_history", "\n".join(history))]
                )
                if last_cycle:
                    break
                continue
            output, code, cov = self._run_on_cov(va, input_path, runner)
            summary = collect_trace_coverage(cov, va.crash_trace)
            reaches = reaches_vuln_func(summary, va.crash_trace)
            feedback = render_trace_feedback(summary)
            exec_note = f"harness exit code {code}; output:\n{output.strip()[:800]}"
            (iter_dir / "feedback.txt").write_text(feedback + "\n" + exec_note + "\n")
            (iter_dir / "coverage.json").write_text(
                json.dumps(
                    {
                        "reaches_vuln": reaches,
                        "deepest_reached_index": summary.deepest_reached_index,
                        "frames": [
                            {
                                "index": fc.frame.index,
                                "function": fc.frame.function,
                                "reached": fc.reached,
                                "entry_count": fc.entry_count,
                                "in_mapping": fc.in_mapping,
                            }
                            for fc in summary.per_frame
                        ],
                    },
                    indent=1,
                )
                + "\n"
            )
            tc = TestCase(
                id=i,
                path=input_path,
                producer_script=script,
                reaches_vuln=reaches,
                deepest_reached=summary.deepest_reached_index,
            )
            if reaches:
                useful.append(tc)
            history.append(
                f"pe_{i}: input {self._digest(input_path)} — "
                + ("reached the vulnerable frames" if reaches else f"deepest frame {summary.deepest_reached_index}")
            )
            self.context.update(
                [
                    (
                        "latest_coverage_feedback",
                        f"iteration pe_{i}\n{feedback}\n{exec_note}",
                    ),
                    ("iteration_history", "\n".join(history)),
                ]
            )
            if last_cycle:
                break
            if self.config.early_exit_pe and reaches:
                break
        return useful

    # -- phase 4: crash triggering --------------------------------------------------

    def phase_crash_trigger(
        self,
        va: VAReport,
        useful_tcs: list[TestCase],
        p_cov: Path,
        p_san: Path,
    ) -> tuple[Verdict, Optional[Path]]:
        guidance = sample_vuln_type_hints(va.root_cause.render(), self.spec)
        runner = CoverageRunner(
            self.work_dir / "profiles",
            p_cov,
            source_root=self.work_dir / "repo_cov",
        )
        tc_block = "none — build the input from the root cause and guidance"
        if useful_tcs:
            parts = []
            for tc in useful_tcs:
                preview = tc.path.read_bytes()[:48].hex()
                parts.append(
                    f"- {self._rel(tc.path)} ({tc.path.stat().st_size} bytes, "
                    f"head hex {preview})"
                    + (f", generator {self._rel(tc.producer_script)}" if tc.producer_script else "")
                )
            tc_block = "\n".join(parts)
        self.context.update(
            [
                ("guidance", f"[{guidance.vuln_type.token}] {guidance.hint_text}"),
                ("useful_test_cases", tc_block),
            ]
        )
        best_variant: Optional[tuple[CrashInfo, Path]] = None
        history: list[str] = []
        n2 = self.config.n2_max_iterations
        agent = self._agent(PHASE_CRASH_TRIGGER)
        pov_dir = self.run_dir / "pov"
        for j in range(1, n2 + 1):
            decision = self._budget_gate(self._ct_cycles)
            if decision is BudgetDecision.HARD_STOP:
                break
            last_cycle = decision is BudgetDecision.FINISH_AFTER_CURRENT_CYCLE
            iter_dir = self.run_dir / "iters" / f"ct_{j}"
            iter_dir.mkdir(parents=True, exist_ok=True)
            input_name = f"input{va.input_extension or '.bin'}"
            instruction = GEN_INSTRUCTION.format(
                role_line=(
                    f"Crash-triggering iteration {j} of {n2}: craft a PoV "
                    f"candidate that triggers {self.spec.v_effect.token} at "
                    f"{self.spec.v_location.file}:{self.spec.v_location.line}. "
                    "Reuse the useful test cases as the starting point."
                ),
                input_rel=f"iters/ct_{j}/{input_name}",
                script_rel=f"iters/ct_{j}/gen.py",
            )
            try:
                payload = agent.run(instruction)
            except TurnCapReached:
                payload = ""
            candidate, _script = self._resolve_input(payload, iter_dir)
            self._ct_cycles += 1
            if candidate is None:
                history.append(f"ct_{j}: no candidate produced")
                self.context.update([("iteration_history", "\n".join(history))])
                if last_cycle:
                    break
                continue
            exec_output, exec_code, _cov = self._run_on_cov(va, candidate, runner)
            info = self._run_on_san(va, candidate, iter_dir)
            if info is None:
                outcome_note = "no sanitizer crash"
                history.append(f"ct_{j}: input {self._digest(candidate)} — no crash")
            else:
                verdict = match_crash(
                    info,
                    self.spec,
                    k=self.config.match_frames,
                    line_tolerance=self.config.match_line_tolerance,
                )
                if verdict.is_validated:
                    confirmed = self._confirm_pov(va, candidate, pov_dir)
                    if confirmed:
                        history.append(f"ct_{j}: validated PoV")
                        return verdict, pov_dir / "pov.bin"
                    # Crashed once but not reproducibly: a flaky variant.
                    outcome_note = (
                        oracle.render_crash_feedback(info)
                        + "\n(crash did not reproduce on re-execution)"
                    )
                    best_variant = best_variant or (info, candidate)
                    history.append(f"ct_{j}: flaky crash (not reproducible)")
                else:
                    outcome_note = oracle.render_crash_feedback(info)
                    best_variant = best_variant or (info, candidate)
                    history.append(
                        f"ct_{j}: variant crash {info.kind.token} at "
                        f"{info.trace.frames[0].location()}"
                    )
            exec_note = f"exec exit code {exec_code}; output:\n{exec_output.strip()[:800]}"
            self.context.update(
                [
                    (
                        "latest_execution_feedback",
                        f"iteration ct_{j}\n{outcome_note}\n{exec_note}",
                    ),
                    ("iteration_history", "\n".join(history)),
                ]
            )
            if last_cycle:
                break
        if best_variant is not None:
            info, candidate = best_variant
            pov_dir.mkdir(parents=True, exist_ok=True)
            shutil.copy2(candidate, pov_dir / "pov.bin")
            return oracle.variant(info), pov_dir / "pov.bin"
        return nocrash(), None

    def _confirm_pov(self, va: VAReport, candidate: Path, pov_dir: Path) -> bool:
        """A PoV must trigger twice in a row: store it, then re-validate the
        stored copy. Nondeterministic crashes are demoted to variants."""
        pov_dir.mkdir(parents=True, exist_ok=True)
        stored = pov_dir / "pov.bin"
        shutil.copy2(candidate, stored)
        info = self._run_on_san(va, stored, pov_dir)
        if info is None:
            return False
        verdict = match_crash(
            info,
            self.spec,
            k=self.config.match_frames,
            line_tolerance=self.config.match_line_tolerance,
        )
        return verdict.is_validated

    # -- the whole pipeline ------------------------------------------------------------

    def run(self) -> TaskReport:
        started = time.monotonic()
        verdict: Verdict = nocrash()
        pov_path: Optional[Path] = None
        useful_count = 0
        failing_phase = None
        failure_reason = None
        (self.run_dir / "task.json").write_text(
            json.dumps(taskmodel.dump_task_document(self.spec, self.config), indent=2)
            + "\n"
        )
        va = None
        p_cov = p_san = None
        useful: list[TestCase] = []
        for phase in (
            PHASE_VULN_ANALYSIS,
            PHASE_INSTRUMENTATION,
            PHASE_PATH_EXPLORE,
            PHASE_CRASH_TRIGGER,
        ):
            self._clock.start()
            try:
                if phase == PHASE_VULN_ANALYSIS:
                    va = self.phase_vuln_analysis()
                elif phase == PHASE_INSTRUMENTATION:
                    p_cov, p_san = self.phase_instrumentation()
                elif phase == PHASE_PATH_EXPLORE:
                    useful = self.phase_path_explore(va, p_cov)
                    useful_count = len(useful)
                else:
                    verdict, pov_path = self.phase_crash_trigger(
                        va, useful, p_cov, p_san
                    )
            except (DrillError, OSError, ValueError) as e:
                failing_phase = phase
                failure_reason = f"{type(e).__name__}: {e}"
                log.warning("%s failed: %s", phase, failure_reason)
                self._clock.stop(phase)
                break
            self._clock.stop(phase)

        report = self._build_report(
            verdict,
            pov_path,
            useful_count,
            failing_phase,
            failure_reason,
            wall_time=time.monotonic() - started,
        )
        extra = report.to_document()
        extra["binaries"] = {
            "cov": self._rel(p_cov) if p_cov else None,
            "san": self._rel(p_san) if p_san else None,
        }
        (self.run_dir / "report.json").write_text(json.dumps(extra, indent=2) + "\n")
        return report

    def _build_report(
        self,
        verdict: Verdict,
        pov_path: Optional[Path],
        useful_count: int,
        failing_phase: Optional[str],
        failure_reason: Optional[str],
        wall_time: float,
    ) -> TaskReport:
        breakdown = {}
        for phase in (
            PHASE_VULN_ANALYSIS,
            PHASE_INSTRUMENTATION,
            PHASE_PATH_EXPLORE,
            PHASE_CRASH_TRIGGER,
            PHASE_REFINE,
        ):
            bucket = self.ledger.per_phase.get(phase, {})
            if not bucket and phase not in self._clock.stats:
                continue
            breakdown[phase] = PhaseStats(
                wall_time_secs=round(self._clock.stats.get(phase, 0.0), 3),
                input_tokens=bucket.get("input_tokens", 0),
                output_tokens=bucket.get("output_tokens", 0),
                cost_usd=bucket.get("cost_usd", 0.0),
            )
        return TaskReport(
            verdict=verdict.label,
            pov_path=pov_path,
            useful_tc_count=useful_count,
            n1_used=self._pe_cycles,
            n2_used=self._ct_cycles,
            cost_usd=self.ledger.cost_usd,
            wall_time_secs=round(wall_time, 3),
            phase_breakdown=breakdown,
            failing_phase=failing_phase,
            failure_reason=failure_reason,
            observed_kind=(
                verdict.observed.kind.token if verdict.observed is not None else None
            ),
            project_id=self.spec.project_id,
        )


def run_pipeline(
    spec: VulnSpec, config: TaskConfig, backend, run_dir: Path
) -> TaskReport:
    """Execute all four phases; failures surface in the report, not as
    exceptions."""
    return TaskRunner(spec, config, backend, run_dir).run()


# --- re-validation of stored runs ----------------------------------------------------

def validate_run(run_dir: Path) -> Verdict:
    """Re-execute a stored PoV against the sanitizer binary and re-classify."""
    run_dir = Path(run_dir).resolve()
    report_doc = json.loads((run_dir / "report.json").read_text())
    pov = report_doc.get("pov_path")
    if not pov:
        return nocrash()
    pov_path = Path(pov)
    if not pov_path.is_absolute():
        pov_path = run_dir / pov
    spec, config = taskmodel.load_task_spec(run_dir / "task.json")
    va = VAReport.from_document(
        json.loads((run_dir / "va_report.json").read_text())
    )
    san_rel = (report_doc.get("binaries") or {}).get("san")
    if not san_rel:
        raise DrillError("run records no sanitizer binary")
    runner = TaskRunner(spec, config, backend=None, run_dir=run_dir)
    verdict = _revalidate(runner, va, pov_path)
    return verdict


def _revalidate(runner: TaskRunner, va: VAReport, pov_path: Path) -> Verdict:
    check_dir = runner.run_dir / "pov" / "revalidate"
    check_dir.mkdir(parents=True, exist_ok=True)
    for stale in check_dir.glob("asan.*"):
        stale.unlink()
    info = runner._run_on_san(va, pov_path, check_dir)
    if info is None:
        return nocrash()
    return match_crash(
        info,
        runner.spec,
        k=runner.config.match_frames,
        line_tolerance=runner.config.match_line_tolerance,
    )
