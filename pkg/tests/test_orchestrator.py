from __future__ import annotations

import itertools
import json
from pathlib import Path

import pytest

from sheetsketch.llm import ChatMessage, CountingBackend, DecodingParams, ScriptedBackend, estimate_tokens
from sheetsketch.orchestrator import (
    FEEDBACK_HEADING,
    AgentCallStats,
    Backends,
    ConversationContext,
    LoopConfig,
    SolveFailed,
    Workspace,
    extraction_stage,
    extraction_verification_loop,
    load_prompt,
    run_tool_loop,
    solving_stage,
    verification_stage,
)
from sheetsketch.refs import CellRef, parse_a1
from sheetsketch.tools import FULL_REGISTRY, ToolEnv
from sheetsketch.workbook import get_cell, load_workbook

FIXTURES = Path(__file__).parent / "fixtures"
YAML_EXAMPLE = (FIXTURES / "yaml_structure_example.md").read_text()
VERIFICATION_EXAMPLE = (FIXTURES / "verification_example.txt").read_text()
LEAVE_SHEET = "Leave used by employee"
PASS = "```yaml\nverification: true\nissues: []\n```"
CONFIG = LoopConfig()


def fail(*issues):
    body = "\n".join(f'  - "{i}"' for i in issues)
    return f"```yaml\nverification: false\nissues:\n{body}\n```"


def tool_turn(name, **arguments):
    return {"content": "", "tool_calls": [{"name": name, "arguments": arguments}]}


class ToolRecorder:
    """Backend wrapper remembering which tool names each call offered."""

    def __init__(self, inner):
        self.inner = inner
        self.offered = []

    def complete(self, messages, tools, decoding):
        self.offered.append([t.name for t in tools])
        return self.inner.complete(messages, tools, decoding)


def seeded(text="go", decoding=None):
    ctx = ConversationContext("test", token_budget=decoding or DecodingParams())
    ctx.append(ChatMessage.user(text))
    return ctx


# -------------------------------------------------------------- tool loop


def test_immediate_answer():
    ctx = seeded()
    out = run_tool_loop(ctx, ScriptedBackend.of("final"), FULL_REGISTRY, ToolEnv(), CONFIG)
    assert out == "final"
    assert ctx.rounds_used == 1 and not ctx.cap_hit


def test_round_cap_is_exactly_twenty(styles_path):
    turns = [tool_turn("convert_excel_to_latex", path=str(styles_path), sheet_name="Styled", range="A1")] * 25
    backend = ScriptedBackend.of(*turns)
    ctx = seeded()
    run_tool_loop(ctx, backend, FULL_REGISTRY, ToolEnv(), CONFIG)
    assert ctx.rounds_used == 20 and ctx.cap_hit
    assert sum(m.role == "assistant" for m in ctx.messages) == 20
    assert backend.remaining == 5


def test_tool_error_fed_back_and_loop_continues():
    backend = ScriptedBackend.of(tool_turn("frobnicate"), "recovered")
    ctx = seeded()
    assert run_tool_loop(ctx, backend, FULL_REGISTRY, ToolEnv(), CONFIG) == "recovered"
    last_seen = backend.inputs[1][-1]
    assert last_seen.role == "tool" and "frobnicate" in last_seen.text


def test_big_tool_output_truncated_to_budget(tmp_path):
    config = LoopConfig(decoding=DecodingParams(max_tokens_per_round=256))
    with Workspace.create(tmp_path / "ws", FIXTURES / "grid.xlsx", Backends.single(ScriptedBackend.of()), config) as ws:
        backend = ScriptedBackend.of(tool_turn("execute_python", code="print('x' * 50000)"), "ok")
        ctx = seeded(decoding=config.decoding)
        run_tool_loop(ctx, backend, FULL_REGISTRY, ws.env, config)
    for sent in backend.inputs:
        for m in sent:
            assert estimate_tokens(m) <= 256
    assert "…[truncated" in ctx.messages[2].text


# ----------------------------------------------------------------- stages


def test_extraction_returns_candidate(leave_path):
    wb = load_workbook(leave_path)
    backend = ScriptedBackend.of(YAML_EXAMPLE)
    text, ctx = extraction_stage(wb, LEAVE_SHEET, backend, CONFIG, ToolEnv(), str(leave_path))
    from sheetsketch.sketch import parse_sketches

    assert len(parse_sketches(text)[0]) == 2
    first = backend.inputs[0][0].text
    assert LEAVE_SHEET in first and str(leave_path) in first and "A1:U194" in first
    assert "{sheet_name}" not in first


def test_extraction_prompt_is_the_asset(leave_path):
    wb = load_workbook(leave_path)
    backend = ScriptedBackend.of("none")
    extraction_stage(wb, LEAVE_SHEET, backend, CONFIG, ToolEnv(), "/mnt/data/input/leave.xlsx")
    template = load_prompt("extraction")
    expected = (
        template.replace("{spreadsheet_path}", "/mnt/data/input/leave.xlsx")
        .replace("{sheet_name}", LEAVE_SHEET)
        .replace("{used_range}", "A1:U194")
    )
    assert backend.inputs[0][0].text == expected


def test_extraction_empty_sheet(fixtures_dir):
    wb = load_workbook(fixtures_dir / "empty.xlsx")
    backend = ScriptedBackend.of("No tables found.")
    text, _ = extraction_stage(wb, "Sheet1", backend, CONFIG, ToolEnv(), "e.xlsx")
    assert text == "No tables found."
    assert backend.inputs[0][0].text.rstrip().endswith("### used_range\nempty")


def test_verification_pass_and_fail(leave_path):
    wb = load_workbook(leave_path)
    ok, _ = verification_stage("latex", wb, LEAVE_SHEET, YAML_EXAMPLE, ScriptedBackend.of(PASS), CONFIG, ToolEnv(), "p")
    assert ok.passed and ok.issues == ()
    bad, ctx = verification_stage(
        "vision", wb, LEAVE_SHEET, YAML_EXAMPLE, ScriptedBackend.of(VERIFICATION_EXAMPLE), CONFIG, ToolEnv(), "p"
    )
    assert not bad.passed and len(bad.issues) == 5
    assert YAML_EXAMPLE.strip() in ctx.messages[0].text


def test_vision_channel_cannot_use_latex_tool(leave_path):
    wb = load_workbook(leave_path)
    backend = ToolRecorder(ScriptedBackend.of(
        tool_turn("latex_question_answer", path=str(leave_path), sheet_name=LEAVE_SHEET, range="A1:B2", question="?"),
        PASS,
    ))
    report, ctx = verification_stage("vision", wb, LEAVE_SHEET, "x", backend, CONFIG, ToolEnv(), str(leave_path))
    assert report.passed
    assert ctx.messages[2].role == "tool" and "not available" in ctx.messages[2].text
    assert sorted(backend.offered[0]) == [
        "convert_excel_to_image",
        "vision_question_answer",
    ]
    latex = ToolRecorder(ScriptedBackend.of(PASS))
    verification_stage("latex", wb, LEAVE_SHEET, "x", latex, CONFIG, ToolEnv(), "p")
    assert sorted(latex.offered[0]) == ["convert_excel_to_latex", "latex_question_answer"]


# ------------------------------------------------------------- refinement


def loop_backends(outcomes, issue_of=lambda ch, i: f"{ch} issue {i}"):
    """Text and vision transcripts for a sequence of (vision_pass, latex_pass) outcomes."""
    text, vision = [], []
    for i, (v, l) in enumerate(outcomes, 1):
        text.append(f"candidate {i}\n" + YAML_EXAMPLE)
        vision.append(PASS if v else fail(issue_of("vision", i)))
        text.append(PASS if l else fail(issue_of("latex", i)))
    return ScriptedBackend.of(*text), ScriptedBackend.of(*vision)


@pytest.mark.parametrize("vision_pass,latex_pass", list(itertools.product([True, False], repeat=2)))
def test_gating_over_all_combinations(leave_path, vision_pass, latex_pass):
    wb = load_workbook(leave_path)
    config = LoopConfig(max_refine_iterations=1)
    text, vision = loop_backends([(vision_pass, latex_pass)])
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), config, ToolEnv(), "p")
    assert vs.verified == (vision_pass and latex_pass)
    assert vs.iterations_used == 1
    assert len(vs.sketches) == 2


def test_both_pass_first_iteration(leave_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(True, True)])
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), "p")
    assert vs.verified and vs.iterations_used == 1


def test_feedback_reaches_next_extraction(leave_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(False, True), (True, True)], issue_of=lambda ch, i: "row 194 is blank")
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), "p")
    assert vs.verified and vs.iterations_used == 2
    # second extraction call: its latest message is the feedback turn
    second_extraction = text.inputs[2]
    feedback = second_extraction[-1]
    assert feedback.role == "user"
    assert feedback.text.startswith(FEEDBACK_HEADING)
    assert "row 194 is blank" in feedback.text
    # and it sits in the same context as the first candidate
    assert second_extraction[1].text.startswith("candidate 1")


def test_all_issues_verbatim_in_feedback(leave_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(False, False), (False, False), (False, False)])
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), "p")
    assert not vs.verified and vs.iterations_used == 3
    assert vs.sketch_text.startswith("candidate 3")
    extraction_calls = [text.inputs[i] for i in (2, 4)]
    for i, call in enumerate(extraction_calls, 1):
        joined = "\n".join(m.text for m in call)
        assert f"vision issue {i}" in joined and f"latex issue {i}" in joined
    assert text.remaining == 0 and vision.remaining == 0


def test_stops_at_iteration_cap_with_leftover_transcript(leave_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(False, True)] * 5)
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), "p")
    assert vs.iterations_used == 3 and not vs.verified
    assert vision.remaining == 2


def test_stats_match_instrumented_backend(leave_path, styles_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(False, True), (True, True)])
    counted_text, counted_vision = CountingBackend(text), CountingBackend(vision)
    stats = AgentCallStats()
    backends = Backends(counted_text, counted_vision).counted(stats)
    extraction_verification_loop(wb, LEAVE_SHEET, backends, CONFIG, ToolEnv(), "p")
    assert stats.total_agent_calls == counted_text.calls + counted_vision.calls == 6


def test_qa_tool_calls_are_counted(leave_path):
    wb = load_workbook(leave_path)
    qa = tool_turn("vision_question_answer", path=str(leave_path), sheet_name=LEAVE_SHEET, range="A1:C4", question="bold?")
    vision = CountingBackend(ScriptedBackend.of(qa, "yes, row 4", PASS))
    text = CountingBackend(ScriptedBackend.of(YAML_EXAMPLE, PASS))
    stats = AgentCallStats()
    backends = Backends(text, vision).counted(stats)
    env = ToolEnv(text_backend=backends.text, vision_backend=backends.vision)
    vs = extraction_verification_loop(wb, LEAVE_SHEET, backends, CONFIG, env, str(leave_path))
    assert vs.verified
    assert stats.total_agent_calls == text.calls + vision.calls == 5


def test_channel_isolation(leave_path):
    wb = load_workbook(leave_path)
    args = dict(path=str(leave_path), sheet_name=LEAVE_SHEET, range="A1:C4")
    text = ScriptedBackend.of(YAML_EXAMPLE, tool_turn("convert_excel_to_latex", **args), PASS)
    vision = ScriptedBackend.of(tool_turn("convert_excel_to_image", **args), PASS)
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), str(leave_path))
    vctx, lctx = vs.transcripts["verify_vision_1"], vs.transcripts["verify_latex_1"]
    assert not any(r"\begin{tabular}" in m.text for m in vctx.messages if m.role == "tool")
    assert any(m.images for m in vctx.messages if m.role == "tool")
    assert not any(m.images for m in lctx.messages)
    assert any(r"\begin{tabular}" in m.text for m in lctx.messages if m.role == "tool")


def test_transcripts_archive(tmp_path, leave_path):
    wb = load_workbook(leave_path)
    text, vision = loop_backends([(True, True)])
    vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), CONFIG, ToolEnv(), "p")
    paths = vs.archive(tmp_path)
    assert sorted(p.name for p in paths) == ["extraction.json", "verify_latex_1.json", "verify_vision_1.json"]
    doc = json.loads((tmp_path / "extraction.json").read_text())
    assert doc["messages"][1]["role"] == "assistant"


# ---------------------------------------------------------------- solving

CASE1_CODE = """import openpyxl
wb = openpyxl.load_workbook('/mnt/data/input/leave.xlsx')
ws = wb['Leave used by employee']
for r in range(5, 9):
    emp = ws.cell(r, 12).value
    for c in range(13, 22):
        kind = ws.cell(4, c).value
        ws.cell(r, c).value = sum(
            ws.cell(i, 8).value for i in range(5, ws.max_row + 1)
            if ws.cell(i, 1).value == emp and ws.cell(i, 4).value == kind
        )
wb.save('/mnt/data/output/leave_output.xlsx')
print('saved')
"""


def brute_force_total(wb, employee, kind):
    sheet = wb.sheet(LEAVE_SHEET)
    total = 0.0
    for r in range(5, 195):
        who = get_cell(sheet, CellRef(1, r))[0].value
        what = get_cell(sheet, CellRef(4, r))[0].value
        if who == employee and what == kind:
            total += get_cell(sheet, CellRef(8, r))[0].value
    return total


def solve_with(tmp_path, input_path, *turns):
    from sheetsketch.orchestrator import VerifiedSketch

    backend = ToolRecorder(ScriptedBackend.of(*turns))
    vs = VerifiedSketch(YAML_EXAMPLE, [], True, 1)
    wb = load_workbook(input_path)
    with Workspace.create(tmp_path / "ws", input_path, Backends.single(backend), CONFIG) as ws:
        out, ctx = solving_stage(wb, "Sum the hours per employee and type.", vs, backend, CONFIG, ws)
    return out, ctx, backend


def test_solver_trivial_copy(tmp_path, fixtures_dir):
    code = "import shutil; shutil.copyfile('/mnt/data/input/grid.xlsx', '/mnt/data/output/grid_output.xlsx')"
    out, _, backend = solve_with(tmp_path, fixtures_dir / "grid.xlsx", tool_turn("execute_python", code=code), "done")
    assert out.name == "grid_output.xlsx" and out.exists()
    assert load_workbook(out).sheet_names == ["Grid"]
    prompt = backend.inner.inputs[0][0].text
    assert "/mnt/data/input/grid.xlsx" in prompt and "/mnt/data/output/grid_output.xlsx" in prompt
    assert YAML_EXAMPLE.strip() in prompt
    # only code execution is offered to the solver
    assert backend.offered == [["execute_python"], ["execute_python"]]


def test_solver_case1_sums(tmp_path, leave_path):
    out, _, _ = solve_with(tmp_path, leave_path, tool_turn("execute_python", code=CASE1_CODE), "done")
    before, after = load_workbook(leave_path), load_workbook(out)
    sheet = after.sheet(LEAVE_SHEET)
    for r, employee in zip(range(5, 9), ["Employee 1", "Employee 2", "Employee 3", "Employee 4"]):
        for c in range(13, 22):
            kind = get_cell(sheet, CellRef(c, 4))[0].value
            got = get_cell(sheet, CellRef(c, r))[0].value
            assert got == pytest.approx(brute_force_total(before, employee, kind), rel=1e-9)
    assert get_cell(sheet, parse_a1("M5"))[0].value > 0


def test_solver_writes_nothing(tmp_path, fixtures_dir):
    with pytest.raises(SolveFailed):
        solve_with(tmp_path, fixtures_dir / "grid.xlsx", "I could not do it.")


def test_input_naming_convention(tmp_path, fixtures_dir):
    src = tmp_path / "1_task_input.xlsx"
    src.write_bytes((fixtures_dir / "grid.xlsx").read_bytes())
    with Workspace.create(tmp_path / "ws", src, Backends.single(ScriptedBackend.of()), CONFIG) as ws:
        host, mount = ws.output_paths()
    assert mount == "/mnt/data/output/1_task_output.xlsx"
    assert ws.input_mount_path == "/mnt/data/input/1_task_input.xlsx"
