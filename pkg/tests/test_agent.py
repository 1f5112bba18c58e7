import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from drill.agent import (
    AgentConfig,
    AgentContext,
    BudgetDecision,
    Sandbox,
    Toolbox,
    check_budget,
    run_agent,
    truncate_output,
    update_context,
)
from drill.errors import PathEscape, ToolDenied, TurnCapReached, UnknownTool
from drill.llm import (
    ChatTurn,
    ModelParams,
    ReplayBackend,
    ReplayEntry,
    ToolCall,
    Usage,
    UsageLedger,
)

PARAMS = ModelParams(model_id="m", temperature=0.1)


# --- truncation -----------------------------------------------------------------

def test_truncation_keeps_head_and_tail():
    text = "A" * 60 + "B" * 60
    out = truncate_output(text, 100)
    assert out.startswith("A" * 50)
    assert out.endswith("B" * 50)
    assert "…[truncated 20 chars]…" in out


def test_short_output_untouched():
    assert truncate_output("hello", 100) == "hello"


@given(st.text(min_size=0, max_size=4000), st.integers(min_value=4, max_value=500))
def test_truncation_bounds_property(text, limit):
    out = truncate_output(text, limit)
    marker_budget = len(f"…[truncated {len(text)} chars]…")
    assert len(out) <= limit + marker_budget
    if len(text) > limit:
        head = (limit + 1) // 2
        tail = limit // 2
        assert out[:head] == text[:head]
        if tail:
            assert out[-tail:] == text[-tail:]


# --- sandbox ---------------------------------------------------------------------

@pytest.fixture
def sandbox(tmp_path):
    return Sandbox(tmp_path / "work", exec_timeout_secs=5)


def test_resolve_inside(sandbox):
    p = sandbox.resolve("sub/file.txt")
    assert sandbox.work_dir in p.parents


def test_resolve_traversal_raises(sandbox):
    with pytest.raises(PathEscape):
        sandbox.resolve("../../etc/x")


def test_resolve_absolute_outside_raises(sandbox):
    with pytest.raises(PathEscape):
        sandbox.resolve("/etc/passwd")


def test_resolve_symlink_escape(sandbox, tmp_path):
    outside = tmp_path / "outside"
    outside.mkdir()
    link = sandbox.work_dir / "sneaky"
    link.symlink_to(outside)
    with pytest.raises(PathEscape):
        sandbox.resolve("sneaky/file.txt")


adversarial_paths = st.one_of(
    st.text(
        alphabet=st.sampled_from(list("abc./_-~ \\")),
        min_size=1,
        max_size=40,
    ),
    st.sampled_from(
        [
            "../../etc/x",
            "..\\..\\etc\\x",
            "/etc/shadow",
            "a/../../b",
            "a/./../..",
            "....//....//etc",
            "~/.bashrc",
            "sub/../../../tmp/zz",
        ]
    ),
)


@settings(max_examples=150, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(path=adversarial_paths)
def test_sandbox_containment_property(tmp_path_factory, path):
    """No generated path may ever place a write outside the work directory."""
    base = tmp_path_factory.mktemp("contain")
    sandbox = Sandbox(base / "work")
    toolbox = Toolbox(sandbox)
    try:
        toolbox.dispatch(
            ToolCall("c", "write_file", {"path": path, "content": "x"}),
            allowed=("write_file",),
        )
    except PathEscape:
        pass
    outside = [
        p
        for p in base.rglob("*")
        if p.is_file() and sandbox.work_dir not in p.parents and p != sandbox.work_dir
    ]
    assert outside == []


def test_execute_captures_output_and_exit(sandbox):
    ok, out, code = sandbox.execute("echo hi")
    assert ok and code == 0
    assert out == "hi\n"
    ok, out, code = sandbox.execute("echo oops >&2; exit 3")
    assert not ok and code == 3
    assert "oops" in out


def test_execute_timeout_enforced_within_half_second(sandbox):
    started = time.monotonic()
    ok, out, code = sandbox.execute("while true; do :; done", timeout=1)
    elapsed = time.monotonic() - started
    assert not ok
    assert "timed out" in out
    assert elapsed == pytest.approx(1.0, abs=0.5)


def test_execute_cwd_containment(sandbox, tmp_path):
    inner = sandbox.work_dir / "inner"
    inner.mkdir()
    ok, out, _ = sandbox.execute("pwd", cwd=inner)
    assert out.strip() == str(inner)
    with pytest.raises(PathEscape):
        sandbox.execute("pwd", cwd=tmp_path)


# --- toolbox ---------------------------------------------------------------------

@pytest.fixture
def toolbox(sandbox):
    (sandbox.work_dir / "hello.c").write_text(
        "#include <stdio.h>\n"
        "\n"
        "int greet(int n) {\n"
        "    return n + 1;\n"
        "}\n"
        "\n"
        "int main(void) {\n"
        "    return greet(41);\n"
        "}\n"
    )
    return Toolbox(sandbox, output_limit=2000)


ALL_TOOLS = (
    "read_file",
    "write_file",
    "execute_bash",
    "ast_grep_search_function",
    "ast_grep_search_pattern",
    "finish",
)


def test_read_file_slice(toolbox):
    result = toolbox.dispatch(
        ToolCall("c", "read_file", {"path": "hello.c", "start": 3, "end": 5}),
        ALL_TOOLS,
    )
    assert result.ok
    assert result.output.splitlines()[0] == "3 | int greet(int n) {"
    assert len(result.output.splitlines()) == 3


def test_write_then_read(toolbox):
    toolbox.dispatch(
        ToolCall("c", "write_file", {"path": "new/data.txt", "content": "payload"}),
        ALL_TOOLS,
    )
    result = toolbox.dispatch(
        ToolCall("c", "read_file", {"path": "new/data.txt"}), ALL_TOOLS
    )
    assert "payload" in result.output


def test_write_traversal_raises(toolbox):
    with pytest.raises(PathEscape):
        toolbox.dispatch(
            ToolCall("c", "write_file", {"path": "../../etc/x", "content": ""}),
            ALL_TOOLS,
        )


def test_execute_bash_tool(toolbox):
    result = toolbox.dispatch(ToolCall("c", "execute_bash", {"cmd": "echo hi"}), ALL_TOOLS)
    assert result.ok
    assert "[exit 0]" in result.output
    assert "hi" in result.output


def test_execute_bash_failure_not_ok(toolbox):
    result = toolbox.dispatch(ToolCall("c", "execute_bash", {"cmd": "false"}), ALL_TOOLS)
    assert not result.ok


def test_unknown_tool(toolbox):
    with pytest.raises(UnknownTool):
        toolbox.dispatch(ToolCall("c", "mystery", {}), ALL_TOOLS)


def test_denied_tool(toolbox):
    with pytest.raises(ToolDenied):
        toolbox.dispatch(ToolCall("c", "execute_bash", {"cmd": "true"}), ("read_file",))


def test_search_function_finds_definition(toolbox):
    result = toolbox.dispatch(
        ToolCall("c", "ast_grep_search_function", {"name": "greet"}), ALL_TOOLS
    )
    assert "hello.c:3" in result.output


def test_search_pattern(toolbox):
    result = toolbox.dispatch(
        ToolCall("c", "ast_grep_search_pattern", {"pattern": r"greet\(41\)"}), ALL_TOOLS
    )
    assert "hello.c:8" in result.output


def test_missing_file_feedback_not_crash(toolbox):
    result = toolbox.dispatch(ToolCall("c", "read_file", {"path": "ghost.c"}), ALL_TOOLS)
    assert not result.ok
    assert "ghost.c" in result.output


def test_tool_output_truncated(toolbox):
    result = toolbox.dispatch(
        ToolCall("c", "execute_bash", {"cmd": "yes A | head -c 9000"}), ALL_TOOLS
    )
    assert len(result.output) <= 2000 + len("…[truncated 99999 chars]…")
    assert "truncated" in result.output


# --- context ---------------------------------------------------------------------

def test_update_context_ordering_and_replacement():
    ctx = AgentContext()
    update_context(ctx, [("root_cause", "rc v1")])
    update_context(ctx, [("latest_coverage_feedback", "cov v1")])
    rendered = ctx.render()
    assert rendered.index("root_cause") < rendered.index("latest_coverage_feedback")

    update_context(ctx, [("latest_coverage_feedback", "cov v2")])
    rendered = ctx.render()
    assert "cov v2" in rendered
    assert "cov v1" not in rendered
    assert rendered.count("latest_coverage_feedback") == 1
    # Replacement preserves the original position.
    assert rendered.index("root_cause") < rendered.index("latest_coverage_feedback")


def test_render_after_iterations_has_single_blocks():
    ctx = AgentContext()
    update_context(ctx, [("root_cause", "rc")])
    for i in range(3):
        update_context(
            ctx,
            [
                ("latest_coverage_feedback", f"feedback {i}"),
                ("iteration_history", "\n".join(f"iter {j}" for j in range(i + 1))),
            ],
        )
    rendered = ctx.render()
    assert rendered.count("## latest_coverage_feedback") == 1
    assert rendered.count("## root_cause") == 1
    assert "feedback 2" in rendered
    assert "iter 0" in rendered and "iter 2" in rendered


# --- budget -----------------------------------------------------------------------

def _ledger_with(cost: float) -> UsageLedger:
    ledger = UsageLedger()
    ledger.cost_usd = cost
    return ledger


def test_budget_proceed():
    assert (
        check_budget(_ledger_with(0.90), 1.50, cycle_complete=False)
        is BudgetDecision.PROCEED
    )


def test_budget_soft_overrun_mid_cycle():
    assert (
        check_budget(_ledger_with(1.60), 1.50, cycle_complete=False)
        is BudgetDecision.FINISH_AFTER_CURRENT_CYCLE
    )


def test_budget_hard_stop_after_cycle():
    assert (
        check_budget(_ledger_with(1.60), 1.50, cycle_complete=True)
        is BudgetDecision.HARD_STOP
    )


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=20))
def test_first_hard_stop_needs_a_completed_cycle(costs):
    """Simulate a phase loop with any scripted per-cycle cost sequence: the
    first HARD_STOP can only be issued once at least one cycle completed."""
    ledger = UsageLedger()
    cycles = 0
    for cost in costs:
        decision = check_budget(ledger, 0.5, cycle_complete=cycles >= 1)
        if decision is BudgetDecision.HARD_STOP:
            assert cycles >= 1
            break
        ledger.cost_usd += cost  # the cycle runs, whatever it costs
        cycles += 1


# --- the loop ---------------------------------------------------------------------

def _agent_config(max_turns=4):
    return AgentConfig(
        phase="path_explore",
        system_prompt="You are a test agent.",
        allowed_tools=ALL_TOOLS,
        max_turns=max_turns,
        params=PARAMS,
    )


def _finish_entry(payload, usage=(10, 2)):
    return ReplayEntry(
        response_content="",
        tool_calls=(ToolCall("c1", "finish", {"payload": payload}),),
        usage=Usage(*usage),
    )


def test_run_agent_immediate_finish(toolbox):
    backend = ReplayBackend([_finish_entry("ok")])
    ctx = AgentContext(ledger=UsageLedger())
    outcome = run_agent(_agent_config(), ctx, toolbox, backend, instruction="go")
    assert outcome.payload == "ok"
    assert outcome.turns_used == 1
    assert ctx.ledger.input_tokens == 10


def test_run_agent_tool_then_finish(toolbox):
    backend = ReplayBackend(
        [
            ReplayEntry(
                response_content="",
                tool_calls=(ToolCall("c1", "read_file", {"path": "hello.c"}),),
                usage=Usage(5, 1),
            ),
            _finish_entry("done"),
        ]
    )
    ctx = AgentContext(ledger=UsageLedger())
    outcome = run_agent(_agent_config(), ctx, toolbox, backend, instruction="read it")
    assert outcome.payload == "done"
    tool_turns = [t for t in outcome.transcript if t.role == "tool"]
    assert len(tool_turns) == 1
    assert "int greet(int n) {" in tool_turns[0].content


def test_run_agent_turn_cap(toolbox):
    chatty = ReplayEntry(
        response_content="thinking...", tool_calls=(), usage=Usage(1, 1)
    )
    backend = ReplayBackend([chatty, chatty])
    with pytest.raises(TurnCapReached):
        run_agent(_agent_config(max_turns=2), AgentContext(), toolbox, backend)


def test_run_agent_replay_determinism(tmp_path):
    """The full loop over a fixed transcript is bit-identical across runs."""

    def run_once(base: Path):
        sandbox = Sandbox(base / "work")
        (sandbox.work_dir / "f.txt").write_text("stable content\n")
        toolbox = Toolbox(sandbox)
        backend = ReplayBackend(
            [
                ReplayEntry(
                    response_content="",
                    tool_calls=(ToolCall("c1", "read_file", {"path": "f.txt"}),),
                    usage=Usage(3, 1),
                ),
                _finish_entry("end"),
            ]
        )
        ctx = AgentContext(ledger=UsageLedger())
        outcome = run_agent(_agent_config(), ctx, toolbox, backend, instruction="x")
        return [
            (t.role, t.content, tuple((c.name, tuple(sorted(c.arguments.items()))) for c in t.tool_calls))
            for t in outcome.transcript
        ], outcome.payload

    first = run_once(tmp_path / "a")
    second = run_once(tmp_path / "b")
    assert first == second


def test_run_agent_rejects_unregistered_allowed_tool(toolbox):
    config = AgentConfig(
        phase="p",
        system_prompt="s",
        allowed_tools=("warp_drive",),
        max_turns=1,
        params=PARAMS,
    )
    with pytest.raises(UnknownTool):
        run_agent(config, AgentContext(), toolbox, ReplayBackend([]))
