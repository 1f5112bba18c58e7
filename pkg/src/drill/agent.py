"""Generic sub-agent engine: conversation loop, tool dispatch, sandboxing.

Each phase runs a role-specialized agent through run_agent: chat, dispatch
the requested tools inside a directory-scoped sandbox, feed truncated results
back, and stop when the agent calls finish (or the turn cap trips). Budget
accounting is cooperative: phases consult check_budget between cycles and are
guaranteed at least one full generate-and-validate cycle before a hard stop.
"""
from __future__ import annotations

import enum
import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import PathEscape, ToolDenied, TurnCapReached, UnknownTool
from .llm import (
    ROLE_ASSISTANT,
    ROLE_SYSTEM,
    ROLE_TOOL,
    ROLE_USER,
    ChatTurn,
    ModelParams,
    ToolCall,
    Usage,
    UsageLedger,
)

FINISH_TOOL = "finish"


# --- output truncation -------------------------------------------------------

def truncate_output(text: str, limit: int) -> str:
    """Keep the head and tail of oversized output; the middle is where the
    least signal lives (build errors end-load, file headers front-load)."""
    if len(text) <= limit:
        return text
    head = (limit + 1) // 2
    tail = limit // 2
    dropped = len(text) - head - tail
    marker = f"…[truncated {dropped} chars]…"
    return text[:head] + marker + (text[-tail:] if tail else "")


@dataclass(frozen=True)
class ToolResult:
    tool: str
    ok: bool
    output: str
    duration_ms: int = 0


# --- sandbox -------------------------------------------------------------------

class Sandbox:
    """Directory-scoped execution: file tools cannot leave the work dir and
    shell commands run inside it under a wall-clock timeout."""

    def __init__(
        self,
        work_dir: Path,
        exec_timeout_secs: int = 60,
        extra_env: Optional[dict[str, str]] = None,
    ):
        self.work_dir = Path(work_dir).resolve()
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.exec_timeout_secs = exec_timeout_secs
        self.extra_env = dict(extra_env or {})

    def resolve(self, path: str) -> Path:
        """Resolve a tool-supplied path; raise PathEscape if it leaves the
        work directory (after symlink resolution)."""
        if not path:
            raise PathEscape("empty path")
        candidate = Path(path)
        if not candidate.is_absolute():
            candidate = self.work_dir / candidate
        resolved = candidate.resolve()
        if resolved != self.work_dir and self.work_dir not in resolved.parents:
            raise PathEscape(f"{path} resolves outside the work directory")
        return resolved

    def execute(
        self,
        cmd: str,
        timeout: Optional[int] = None,
        env: Optional[dict] = None,
        cwd: Optional[Path] = None,
    ) -> tuple[bool, str, int]:
        """(ok, combined output, exit code); timeouts report ok=False with
        whatever output was produced. cwd, when given, must lie inside the
        work directory."""
        import os

        timeout = timeout or self.exec_timeout_secs
        run_dir = self.work_dir
        if cwd is not None:
            run_dir = Path(cwd).resolve()
            if run_dir != self.work_dir and self.work_dir not in run_dir.parents:
                raise PathEscape(f"cwd {cwd} outside the work directory")
        full_env = dict(os.environ)
        full_env.update(self.extra_env)
        if env:
            full_env.update(env)
        proc = subprocess.Popen(
            ["bash", "-c", cmd],
            cwd=run_dir,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            env=full_env,
            start_new_session=True,
        )
        try:
            out, _ = proc.communicate(timeout=timeout)
            return proc.returncode == 0, out.decode(errors="replace"), proc.returncode
        except subprocess.TimeoutExpired:
            import signal

            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, _ = proc.communicate()
            partial = out.decode(errors="replace") if out else ""
            return False, partial + f"\n[timed out after {timeout}s]", -9


# --- tool registry --------------------------------------------------------------

@dataclass(frozen=True)
class Tool:
    name: str
    description: str
    parameters: dict
    handler: Callable[[dict], str]

    def schema(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": self.parameters,
        }


class Toolbox:
    def __init__(self, sandbox: Sandbox, output_limit: int = 8000):
        self.sandbox = sandbox
        self.output_limit = output_limit
        self._tools: dict[str, Tool] = {}
        self._register_core()

    def register(self, tool: Tool) -> None:
        self._tools[tool.name] = tool

    def names(self) -> list[str]:
        return sorted(self._tools) + [FINISH_TOOL]

    def schemas(self, allowed: Sequence[str]) -> list[dict]:
        out = []
        for name in allowed:
            if name == FINISH_TOOL:
                out.append(
                    {
                        "name": FINISH_TOOL,
                        "description": "Finish this task and hand back the payload.",
                        "parameters": {
                            "type": "object",
                            "properties": {"payload": {"type": "string"}},
                            "required": ["payload"],
                        },
                    }
                )
            elif name in self._tools:
                out.append(self._tools[name].schema())
        return out

    def dispatch(self, call: ToolCall, allowed: Sequence[str]) -> ToolResult:
        if call.name not in allowed:
            if call.name in self._tools or call.name == FINISH_TOOL:
                raise ToolDenied(call.name)
            raise UnknownTool(call.name)
        tool = self._tools.get(call.name)
        if tool is None:
            raise UnknownTool(call.name)
        started = time.monotonic()
        try:
            raw = tool.handler(call.arguments)
            ok, output = raw if isinstance(raw, tuple) else (True, raw)
        except PathEscape:
            raise
        except Exception as e:  # tool errors are feedback, not crashes
            output = f"{type(e).__name__}: {e}"
            ok = False
        duration = int((time.monotonic() - started) * 1000)
        return ToolResult(
            tool=call.name,
            ok=ok,
            output=truncate_output(output, self.output_limit),
            duration_ms=duration,
        )

    # core tools ---------------------------------------------------------------

    def _register_core(self) -> None:
        self.register(
            Tool(
                "read_file",
                "Read a file (optionally a 1-based inclusive line range).",
                {
                    "type": "object",
                    "properties": {
                        "path": {"type": "string"},
                        "start": {"type": "integer"},
                        "end": {"type": "integer"},
                    },
                    "required": ["path"],
                },
                self._tool_read_file,
            )
        )
        self.register(
            Tool(
                "write_file",
                "Create or overwrite a file inside the work directory.",
                {
                    "type": "object",
                    "properties": {
                        "path": {"type": "string"},
                        "content": {"type": "string"},
                    },
                    "required": ["path", "content"],
                },
                self._tool_write_file,
            )
        )
        self.register(
            Tool(
                "execute_bash",
                "Run a shell command in the work directory (wall-clock timeout).",
                {
                    "type": "object",
                    "properties": {"cmd": {"type": "string"}},
                    "required": ["cmd"],
                },
                self._tool_execute_bash,
            )
        )
        self.register(
            Tool(
                "ast_grep_search_function",
                "Find C/C++ function definitions by name; returns file:line snippets.",
                {
                    "type": "object",
                    "properties": {"name": {"type": "string"}},
                    "required": ["name"],
                },
                self._tool_search_function,
            )
        )
        self.register(
            Tool(
                "ast_grep_search_pattern",
                "Structural/text search over the sources; returns file:line matches.",
                {
                    "type": "object",
                    "properties": {"pattern": {"type": "string"}},
                    "required": ["pattern"],
                },
                self._tool_search_pattern,
            )
        )

    def _tool_read_file(self, args: dict) -> str:
        path = self.sandbox.resolve(args["path"])
        if not path.is_file():
            raise FileNotFoundError(args["path"])
        lines = path.read_text(errors="replace").splitlines()
        start = int(args.get("start") or 1)
        end = int(args.get("end") or len(lines))
        start = max(1, start)
        end = min(len(lines), end)
        return "\n".join(
            f"{n} | {lines[n - 1]}" for n in range(start, end + 1)
        )

    def _tool_write_file(self, args: dict) -> str:
        path = self.sandbox.resolve(args["path"])
        path.parent.mkdir(parents=True, exist_ok=True)
        content = args.get("content", "")
        path.write_text(content)
        return f"wrote {len(content)} chars to {args['path']}"

    def _tool_execute_bash(self, args: dict) -> tuple[bool, str]:
        ok, output, code = self.sandbox.execute(args["cmd"])
        return ok, f"[exit {code}]\n{output}"

    def _source_files(self) -> list[Path]:
        exts = (".c", ".h", ".cc", ".cpp", ".hpp", ".cxx")
        return sorted(
            p
            for p in self.sandbox.work_dir.rglob("*")
            if p.suffix in exts and p.is_file()
        )

    def _tool_search_function(self, args: dict) -> str:
        name = args["name"]
        external = _ast_grep_executable()
        if external:
            ok, out, _ = self.sandbox.execute(
                f"{external} run --pattern '{name}($$$ARGS) {{ $$$BODY }}' --lang c ."
            )
            if ok and out.strip():
                return out
        pattern = re.compile(
            r"^[A-Za-z_][\w \t\*]*\b" + re.escape(name) + r"\s*\([^;]*$|"
            r"^[A-Za-z_][\w \t\*]*\b" + re.escape(name) + r"\s*\([^;{]*\)\s*\{"
        )
        hits = []
        for path in self._source_files():
            rel = path.relative_to(self.sandbox.work_dir)
            lines = path.read_text(errors="replace").splitlines()
            for i, line in enumerate(lines, 1):
                if pattern.match(line.strip()) and not line.strip().endswith(";"):
                    snippet = "\n".join(lines[i - 1 : min(len(lines), i + 11)])
                    hits.append(f"{rel}:{i}\n{snippet}")
        return "\n---\n".join(hits) if hits else f"no definition of {name} found"

    def _tool_search_pattern(self, args: dict) -> str:
        pattern = args["pattern"]
        try:
            rx = re.compile(pattern)
        except re.error:
            rx = re.compile(re.escape(pattern))
        hits = []
        for path in self._source_files():
            rel = path.relative_to(self.sandbox.work_dir)
            for i, line in enumerate(path.read_text(errors="replace").splitlines(), 1):
                if rx.search(line):
                    hits.append(f"{rel}:{i}: {line.strip()}")
                    if len(hits) >= 200:
                        return "\n".join(hits)
        return "\n".join(hits) if hits else "no matches"


def _ast_grep_executable() -> Optional[str]:
    """Real ast-grep only; /usr/bin/sg is usually the setgroups utility."""
    path = shutil.which("ast-grep")
    if not path:
        return None
    try:
        probe = subprocess.run(
            [path, "--version"], capture_output=True, text=True, timeout=10
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    return path if "ast-grep" in probe.stdout + probe.stderr else None


# --- agent context ----------------------------------------------------------------

@dataclass
class AgentContext:
    """Pinned labeled blocks rendered into every prompt, in insertion order."""

    pinned: list[tuple[str, str]] = field(default_factory=list)
    ledger: Optional[UsageLedger] = None

    def update(self, items: Sequence[tuple[str, str]]) -> "AgentContext":
        for label, text in items:
            for i, (existing, _) in enumerate(self.pinned):
                if existing == label:
                    self.pinned[i] = (label, text)
                    break
            else:
                self.pinned.append((label, text))
        return self

    def render(self) -> str:
        return "\n\n".join(f"## {label}\n{text}" for label, text in self.pinned)


def update_context(context: AgentContext, items: Sequence[tuple[str, str]]) -> AgentContext:
    return context.update(items)


# --- budget --------------------------------------------------------------------------

class BudgetDecision(enum.Enum):
    PROCEED = "proceed"
    FINISH_AFTER_CURRENT_CYCLE = "finish_after_current_cycle"
    HARD_STOP = "hard_stop"


def check_budget(ledger: UsageLedger, budget_usd: float, cycle_complete: bool) -> BudgetDecision:
    """Soft overrun policy: once the budget is spent, the current phase may
    still finish one full generate-and-validate cycle before stopping."""
    if ledger.cost_usd < budget_usd:
        return BudgetDecision.PROCEED
    if not cycle_complete:
        return BudgetDecision.FINISH_AFTER_CURRENT_CYCLE
    return BudgetDecision.HARD_STOP


# --- the agent loop ---------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    phase: str
    system_prompt: str
    allowed_tools: tuple[str, ...]
    max_turns: int
    params: ModelParams

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass
class AgentOutcome:
    payload: str
    turns_used: int
    transcript: list[ChatTurn]


def run_agent(
    config: AgentConfig,
    context: AgentContext,
    toolbox: Toolbox,
    backend,
    instruction: str = "",
) -> AgentOutcome:
    """Loop chat → tool dispatch → chat until the agent calls finish.

    Raises TurnCapReached when max_turns passes without a finish call;
    provider errors propagate.
    """
    unknown = [t for t in config.allowed_tools if t not in toolbox.names()]
    if unknown:
        raise UnknownTool(f"allowed_tools not registered: {unknown}")
    ledger = context.ledger
    schemas = toolbox.schemas(config.allowed_tools)
    first_user = context.render()
    if instruction:
        first_user = f"{first_user}\n\n## task\n{instruction}" if first_user else instruction
    messages: list[ChatTurn] = [
        ChatTurn(role=ROLE_SYSTEM, content=config.system_prompt),
        ChatTurn(role=ROLE_USER, content=first_user),
    ]
    for turn_no in range(1, config.max_turns + 1):
        assistant, usage = backend.chat(messages, schemas, config.params)
        if ledger is not None:
            ledger.accrue(config.phase, usage, config.params)
        messages.append(assistant)
        if not assistant.tool_calls:
            messages.append(
                ChatTurn(
                    role=ROLE_USER,
                    content="Reply with a tool call; call finish(payload) when done.",
                )
            )
            continue
        for call in assistant.tool_calls:
            if call.name == FINISH_TOOL:
                payload = str(call.arguments.get("payload", ""))
                return AgentOutcome(
                    payload=payload, turns_used=turn_no, transcript=messages
                )
            try:
                result = toolbox.dispatch(call, config.allowed_tools)
            except PathEscape as e:
                result = ToolResult(tool=call.name, ok=False, output=f"PathEscape: {e}")
            messages.append(
                ChatTurn(
                    role=ROLE_TOOL,
                    content=result.output,
                    tool_call_id=call.call_id,
                )
            )
    raise TurnCapReached(f"{config.phase}: no finish within {config.max_turns} turns")
