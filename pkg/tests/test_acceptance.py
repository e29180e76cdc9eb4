"""Acceptance suite: one check per primary criterion.

Each test records a PASS/FAIL line; the lines are printed together at the end
of the pytest run (see ``pytest_terminal_summary`` in conftest.py).
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import random
import socket
import string
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from PIL import Image

from sheetsketch.convert import RangeTooLarge, RenderOptions, image_size, range_to_image, range_to_latex
from sheetsketch.harness import BenchConfig, load_tasks, run_benchmark, scripted_backends
from sheetsketch.llm import ChatMessage, ScriptedBackend
from sheetsketch.orchestrator import (
    FEEDBACK_HEADING,
    AgentCallStats,
    Backends,
    ConversationContext,
    LoopConfig,
    extraction_verification_loop,
    run_tool_loop,
)
from sheetsketch.refs import CellRef, RangeRef, format_a1, parse_a1, parse_range
from sheetsketch.sketch import fence, parse_sketches, parse_verification, serialize_sketch
from sheetsketch.tools import CODE_TIMEOUT_S, FULL_REGISTRY, CodeSession, ToolCall, ToolEnv, dispatch_tool, load_tool_specs
from sheetsketch.workbook import DEFAULT_STYLE, Cell, CellStyle, CellValue, Sheet, get_cell, load_workbook, write_patched_workbook

from conftest import enumerate_labels
from latex_oracle import occupancy, tiles_exactly, unescaped_specials
from test_convert import random_sheet
from test_sketch import sketches

FIXTURES = Path(__file__).parent / "fixtures"
BENCH = Path(__file__).resolve().parents[1] / "bench"
YAML_EXAMPLE = (FIXTURES / "yaml_structure_example.md").read_text()
VERIFICATION_EXAMPLE = (FIXTURES / "verification_example.txt").read_text()
LEAVE_SHEET = "Leave used by employee"
PASS = "```yaml\nverification: true\nissues: []\n```"

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(name: str, budget_s: float | None = None):
    """Record PASS/FAIL for one criterion; a runtime budget is part of the check."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
    except pytest.skip.Exception as exc:
        RESULTS.append(f"SKIP {name}: {exc}")
        raise
    except BaseException as exc:
        RESULTS.append(f"FAIL {name}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    RESULTS.append(f"PASS {name} ({time.perf_counter() - start:.2f}s)")


# ---------------------------------------------------------------------------


def test_a1_addressing():
    with criterion("A1 addressing: exhaustive 1000x1000 round-trip, A4:U194 corners, < 5 s", budget_s=5.0):
        labels = enumerate_labels(1000)
        for col, label in enumerate(labels, 1):
            for row in range(1, 1001):
                text = f"{label}{row}"
                ref = parse_a1(text)
                assert ref.col == col and ref.row == row, text
                assert format_a1(ref) == text
        rng = parse_range("A4:U194")
        assert (rng.start.col, rng.start.row, rng.end.col, rng.end.row) == (1, 4, 21, 194)


def _cells(wb):
    return {(s.name, ref): c.value for s in wb.sheets for ref, c in s.cells.items() if not c.value.is_empty}


def test_ooxml_fidelity(tmp_path):
    with criterion("OOXML fidelity: fixture values, merges, styles; patch-write diff only on edits, < 10 s", budget_s=10.0):
        leave = load_workbook(FIXTURES / "leave.xlsx")
        sheet = leave.sheet(LEAVE_SHEET)
        assert get_cell(sheet, parse_a1("A4"))[0] == CellValue.text("User")
        assert get_cell(sheet, parse_a1("A5"))[0] == CellValue.text("Employee 1")
        assert get_cell(sheet, parse_a1("L8"))[0] == CellValue.text("Employee 4")

        styles = load_workbook(FIXTURES / "styles.xlsx").sheets[0]
        assert parse_range("B1:C1") in styles.merged
        value, style = get_cell(styles, parse_a1("B1"))
        assert value == CellValue.text("Country") and style.fill_color == "FF0000" and style.bold
        _, c2 = get_cell(styles, parse_a1("C2"))
        assert c2.italic and c2.font_color == "0000FF"
        assert get_cell(styles, parse_a1("A3"))[0] == CellValue.datetime("2021-07-31")

        sales = load_workbook(FIXTURES / "sales.xlsx")
        s1 = sales.sheet("Sheet1")
        assert s1.merged == (parse_range("B2:E2"),)
        assert get_cell(s1, parse_a1("C6"))[0] == CellValue.number(120)
        assert get_cell(s1, parse_a1("B8"))[0] == CellValue.text("Revenue")

        rnd = random.Random(3)
        for wb in (leave, load_workbook(FIXTURES / "styles.xlsx"), sales):
            name = wb.sheets[0].name
            edits = {
                (name, CellRef(rnd.randint(1, 30), rnd.randint(1, 60))): CellValue.number(rnd.randint(1, 999))
                for _ in range(12)
            }
            out = tmp_path / f"{wb.source_path.stem}_out.xlsx"
            write_patched_workbook(wb, edits, out)
            after = load_workbook(out)
            before_cells, after_cells = _cells(wb), _cells(after)
            changed = {
                k for k in before_cells.keys() | after_cells.keys()
                if before_cells.get(k, CellValue.empty()) != after_cells.get(k, CellValue.empty())
            }
            assert changed == {k for k, v in edits.items() if before_cells.get(k, CellValue.empty()) != v}
            for s_before, s_after in zip(wb.sheets, after.sheets):
                assert s_before.merged == s_after.merged
                for ref in s_before.cells:
                    if (s_before.name, ref) not in edits:
                        assert get_cell(s_before, ref)[1] == get_cell(s_after, ref)[1]


def test_latex_converter():
    with criterion("LaTeX converter: 200 random merge layouts tile exactly, no unescaped specials, < 30 s", budget_s=30.0):
        rng = random.Random(2024)
        for _ in range(200):
            nrows, ncols = rng.randint(1, 8), rng.randint(1, 8)
            sheet = random_sheet(rng, nrows, ncols)
            latex = range_to_latex(sheet, RangeRef.from_bounds(1, 1, ncols, nrows))
            assert tiles_exactly(latex, ncols, nrows), latex
            for emitted in occupancy(latex)[2]:
                assert unescaped_specials(emitted.text) == [], emitted.text


def test_image_converter():
    with criterion("Image converter: dimension law on 50 ranges, fill probes, RangeTooLarge past 8192x16384"):
        rng = random.Random(11)
        palette = ["FF0000", "00FF00", "0000FF", "FFFF00", "00FFFF"]
        styles = (DEFAULT_STYLE, *(CellStyle(fill_color=c) for c in palette))
        for _ in range(50):
            opts = RenderOptions(
                cell_width_px=rng.randint(8, 120), cell_height_px=rng.randint(8, 40), show_headers_ruler=rng.random() < 0.5
            )
            c1, r1 = rng.randint(1, 40), rng.randint(1, 200)
            rngref = RangeRef.from_bounds(c1, r1, c1 + rng.randint(0, 9), r1 + rng.randint(0, 14))
            fills = {ref: rng.randint(0, len(palette)) for ref in rngref.cells() if rng.random() < 0.5}
            sheet = Sheet("S", {ref: Cell(CellValue.empty(), sid) for ref, sid in fills.items()}, styles)
            img = range_to_image(sheet, rngref, opts)
            ruler_w, ruler_h = (40, opts.cell_height_px) if opts.show_headers_ruler else (0, 0)
            expected = (ruler_w + rngref.width * opts.cell_width_px, ruler_h + rngref.height * opts.cell_height_px)
            assert (img.width_px, img.height_px) == expected == image_size(rngref, opts)
            pil = Image.open(io.BytesIO(img.encoded_bytes)).convert("RGBA")
            assert pil.size == expected
            for ref, sid in list(fills.items())[:10]:
                x = ruler_w + (ref.col - rngref.start.col) * opts.cell_width_px + opts.cell_width_px // 2
                y = ruler_h + (ref.row - rngref.start.row) * opts.cell_height_px + opts.cell_height_px // 2
                want = (255, 255, 255, 255) if sid == 0 else tuple(int(palette[sid - 1][i : i + 2], 16) for i in (0, 2, 4)) + (255,)
                assert pil.getpixel((x, y)) == want, (ref, sid)
        empty = Sheet("S", {})
        with pytest.raises(RangeTooLarge):
            range_to_image(empty, RangeRef.from_bounds(1, 1, 86, 1), RenderOptions(show_headers_ruler=False))
        with pytest.raises(RangeTooLarge):
            range_to_image(empty, RangeRef.from_bounds(1, 1, 1, 683), RenderOptions(show_headers_ruler=False))
        assert image_size(RangeRef.from_bounds(1, 1, 85, 682), RenderOptions(show_headers_ruler=False)) == (8160, 16368)


ROUND_TRIPS: list[int] = []


@settings(max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(sketches())
def _round_trip(s):
    (again,), errors = parse_sketches(fence(serialize_sketch(s)))
    assert errors == [] and again == s
    ROUND_TRIPS.append(1)


def test_sketch_schema():
    with criterion("Sketch schema: example parses to 2 sketches; serialize/parse identity on 500 generated sketches"):
        parsed, errors = parse_sketches(YAML_EXAMPLE)
        assert errors == [] and len(parsed) == 2
        first = parsed[0]
        assert first.sheet_name == LEAVE_SHEET
        assert first.table_range == parse_range("A4:U194")
        root = first.row_header[0]
        assert (root.start_index, root.end_index, root.value) == (parse_a1("A5"), parse_a1("A50"), "Employee 1")
        ROUND_TRIPS.clear()
        _round_trip()
        assert len(ROUND_TRIPS) >= 500


def _fuzz_strings(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    pieces = [
        "verification:", " true", " false", "issues:", "\n", "  - ", "```yaml", "```", "[]", ",", '"', "'", ":", "{", "}",
        "[", "]", "- ", "...", "\t", "null", "~", "#", "&a", "*a", "!!python/object", "%", "@", "\x00", "é", "💡",
    ]
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            out.append("".join(rng.choice(pieces) for _ in range(rng.randint(0, 30))))
        else:
            out.append("".join(rng.choice(string.printable) for _ in range(rng.randint(0, 80))))
    return out


def test_verification_parsing():
    with criterion("Verification parsing: example gives 5 issues, true/[] passes, 10k fuzz never raises"):
        report = parse_verification(VERIFICATION_EXAMPLE)
        assert report.passed is False and len(report.issues) == 5
        ok = parse_verification("verification: true\nissues: []")
        assert ok.passed is True and ok.issues == ()
        for text in _fuzz_strings(10_000, 99):
            r = parse_verification(text)
            assert isinstance(r.passed, bool)
            assert not (r.passed and r.issues)


def _fail(issue: str) -> str:
    return f'```yaml\nverification: false\nissues:\n  - "{issue}"\n```'


def _loop_backends(outcomes):
    text, vision = [], []
    for i, (v, l) in enumerate(outcomes, 1):
        text.append(f"candidate {i}\n" + YAML_EXAMPLE)
        vision.append(PASS if v else _fail(f"vision issue {i}"))
        text.append(PASS if l else _fail(f"latex issue {i}"))
    return ScriptedBackend.of(*text), ScriptedBackend.of(*vision)


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def test_algorithm_state_machine(no_network):
    with criterion("Refinement loop: 4 gating combinations, issues fed back verbatim, 3-iteration stop, 20-round cap, < 10 s", budget_s=10.0):
        wb = load_workbook(FIXTURES / "leave.xlsx")
        for v in (True, False):
            for l in (True, False):
                text, vision = _loop_backends([(v, l)])
                vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision), LoopConfig(max_refine_iterations=1), ToolEnv(), "p")
                assert vs.verified == (v and l) and vs.iterations_used == 1

        text, vision = _loop_backends([(False, False)] * 4)
        stats = AgentCallStats()
        vs = extraction_verification_loop(wb, LEAVE_SHEET, Backends(text, vision).counted(stats), LoopConfig(), ToolEnv(), "p")
        assert vs.iterations_used == 3 and not vs.verified
        assert stats.total_agent_calls == 9 and vision.remaining == 1
        for i, call in ((1, text.inputs[2]), (2, text.inputs[4])):
            feedback = call[-1]
            assert feedback.role == "user" and feedback.text.startswith(FEEDBACK_HEADING)
            assert f"vision issue {i}" in feedback.text and f"latex issue {i}" in feedback.text

        turn = {"content": "", "tool_calls": [{"name": "convert_excel_to_latex", "arguments": {
            "path": str(FIXTURES / "styles.xlsx"), "sheet_name": "Styled", "range": "A1"}}]}
        backend = ScriptedBackend.of(*[turn] * 30)
        ctx = ConversationContext("cap")
        ctx.append(ChatMessage.user("go"))
        run_tool_loop(ctx, backend, FULL_REGISTRY, ToolEnv(), LoopConfig())
        assert ctx.rounds_used == 20 and ctx.cap_hit and backend.remaining == 10


def _run(env, code):
    return dispatch_tool(ToolCall("c", "execute_python", {"code": code}), env)


def test_code_sandbox(tmp_path):
    with criterion("Code sandbox: state persists, 60 s timeout becomes an error result, escapes rejected, sessions isolated"):
        assert CODE_TIMEOUT_S == 60
        with CodeSession(tmp_path / "a") as a, CodeSession(tmp_path / "b") as b:
            env_a, env_b = ToolEnv(code_session=a), ToolEnv(code_session=b)
            assert _run(env_a, "x=5").is_error is False
            assert _run(env_a, "print(x)").text.strip() == "5"
            r = _run(env_b, "print(x)")
            assert r.is_error and "NameError" in r.text
            escape = _run(env_a, "open('../escape.txt', 'w').write('x')")
            assert escape.is_error and "PermissionError" in escape.text
            assert not (tmp_path / "escape.txt").exists()
            start = time.monotonic()
            slow = _run(env_a, "while True: pass")
            took = time.monotonic() - start
            assert slow.is_error and "timed out after 60.0 seconds" in slow.text
            assert 59 <= took < 75
            assert _run(env_a, "print('alive')").text.strip() == "alive"


def test_scripted_benchmark(tmp_path):
    with criterion("Scripted benchmark: toy soft/hard 100/100, stray variant 100/50, report bit-reproducible"):
        tasks = load_tasks(BENCH / "toy")
        assert len(tasks) == 2
        first = run_benchmark(tasks, BenchConfig(), scripted_backends, tmp_path / "archive")
        agg = first.aggregates()
        assert agg["soft"]["overall"] == 100.0 and agg["hard"]["overall"] == 100.0
        second = run_benchmark(load_tasks(BENCH / "toy"), BenchConfig(), scripted_backends)
        assert first.dumps() == second.dumps()
        stray = run_benchmark(load_tasks(BENCH / "toy_stray"), BenchConfig(), scripted_backends).aggregates()
        assert stray["soft"]["overall"] == 100.0 and stray["hard"]["overall"] == 50.0
        for t in first.tasks:
            assert t.soft_pass or not t.hard_pass


def test_tool_schema_goldens():
    with criterion("Tool-schema goldens: five specs equal the reference definitions field for field"):
        golden = json.loads((FIXTURES / "tool_definitions.json").read_text(encoding="utf-8"))
        specs = load_tool_specs()
        assert len(golden) == len(specs) == 5
        for g in golden:
            fn = g["function"]
            spec = specs[fn["name"]]
            assert spec.to_wire() == g
            assert spec.parameters_schema["required"] == fn["parameters"]["required"]


def test_live_loop(tmp_path):
    config_path = os.environ.get("SHEETSKETCH_LIVE_CONFIG")
    with criterion("Live loop (optional): caps respected, transcripts archived, call count equals transcript turns"):
        if not config_path:
            pytest.skip("SHEETSKETCH_LIVE_CONFIG not set")
        from sheetsketch.config import load_config
        from sheetsketch.orchestrator import Workspace

        cfg = load_config(config_path)
        stats = AgentCallStats()
        backends = cfg.backends().counted(stats)
        leave = FIXTURES / "leave.xlsx"
        with Workspace.create(tmp_path / "ws", leave, backends, cfg.loop, cfg.sandbox) as ws:
            vs = extraction_verification_loop(load_workbook(leave), LEAVE_SHEET, backends, cfg.loop, ws.env, ws.input_mount_path)
        paths = vs.archive(tmp_path / "archive")
        assert paths and vs.iterations_used <= cfg.loop.max_refine_iterations
        assistant_turns = 0
        for ctx in vs.transcripts.values():
            assert ctx.rounds_used <= cfg.loop.max_tool_rounds
            assistant_turns += ctx.total_rounds
        # question-answer tools call the models too, outside any transcript
        qa_calls = sum(
            1
            for ctx in vs.transcripts.values()
            for m in ctx.messages
            for c in m.tool_calls
            if c.name.endswith("question_answer")
        )
        assert stats.total_agent_calls == assistant_turns + qa_calls
