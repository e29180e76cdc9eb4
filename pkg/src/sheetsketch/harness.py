"""Benchmark harness: task manifests, end-to-end runs and soft/hard scoring."""

from __future__ import annotations

import json
import logging
import math
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .llm import ScriptedBackend
from .orchestrator import (
    AgentCallStats,
    Backends,
    LoopConfig,
    SandboxConfig,
    Workspace,
    extract_workbook,
    solving_stage,
)
from .refs import CellRef, MalformedRef, parse_a1
from .workbook import CellValue, Sheet, ValueKind, Workbook, WorkbookError, get_cell, load_workbook

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CATEGORIES = ("cell-level", "sheet-level")
REL_TOLERANCE = 1e-6
DEFAULT_TASK_TIMEOUT_S = 15 * 60.0


class ManifestError(ValueError):
    def __init__(self, field: str, detail: str = "") -> None:
        super().__init__(f"manifest field {field!r}: {detail}" if detail else f"manifest field {field!r} is invalid")
        self.field = field


class MissingFile(FileNotFoundError):
    def __init__(self, path: str | Path) -> None:
        super().__init__(f"file not found: {path}")
        self.path = Path(path)


@dataclass(frozen=True)
class Answer:
    sheet: str
    cell: CellRef
    value: CellValue


@dataclass(frozen=True)
class TaskInstance:
    id: str
    instruction: str
    input_path: Path
    category: str
    answers: tuple[Answer, ...] | None = None
    golden_output_path: Path | None = None
    golden_sheet: str | None = None
    transcript_path: Path | None = None

    def __post_init__(self) -> None:
        if (self.answers is None) == (self.golden_output_path is None):
            raise ManifestError("answers", f"task {self.id}: give exactly one of answers or golden_output")
        if self.category not in CATEGORIES:
            raise ManifestError("category", f"task {self.id}: {self.category!r} is not one of {CATEGORIES}")


# --------------------------------------------------------------------------
# manifest loading
# --------------------------------------------------------------------------


def _require(entry: dict, key: str, task_id: str, kind: type = str) -> Any:
    if key not in entry:
        raise ManifestError(key, f"task {task_id}: missing")
    value = entry[key]
    if not isinstance(value, kind) or (kind is str and not value.strip()):
        raise ManifestError(key, f"task {task_id}: expected a non-empty {kind.__name__}")
    return value


def _existing(base: Path, rel: str) -> Path:
    path = (base / rel).resolve()
    if not path.is_file():
        raise MissingFile(path)
    return path


def _answer(raw: Any, task_id: str) -> Answer:
    if not isinstance(raw, dict) or not {"sheet", "cell", "value"} <= raw.keys():
        raise ManifestError("answers", f"task {task_id}: each answer needs sheet, cell and value")
    try:
        cell = parse_a1(raw["cell"])
    except (MalformedRef, TypeError) as exc:
        raise ManifestError("answers", f"task {task_id}: {exc}") from None
    if isinstance(raw["value"], (list, dict)):
        raise ManifestError("answers", f"task {task_id}: answer values must be scalars")
    return Answer(str(raw["sheet"]), cell, CellValue.from_python(raw["value"]))


def load_tasks(directory: str | Path) -> list[TaskInstance]:
    """Read ``manifest.json`` from a directory; paths inside are relative to it."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise MissingFile(manifest)
    try:
        doc = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError("manifest", str(exc)) from None
    entries = doc.get("tasks") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ManifestError("tasks", "expected a list of tasks")
    tasks: list[TaskInstance] = []
    seen: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ManifestError("tasks", f"entry {i} is not an object")
        task_id = _require(entry, "id", f"#{i}")
        if task_id in seen:
            raise ManifestError("id", f"duplicate task id {task_id!r}")
        seen.add(task_id)
        has_answers, has_golden = "answers" in entry, "golden_output" in entry
        if has_answers == has_golden:
            raise ManifestError("answers", f"task {task_id}: give exactly one of answers or golden_output")
        answers = golden = None
        if has_answers:
            raw = _require(entry, "answers", task_id, list)
            answers = tuple(_answer(a, task_id) for a in raw)
        else:
            golden = _existing(directory, _require(entry, "golden_output", task_id))
        transcript = entry.get("transcript")
        tasks.append(
            TaskInstance(
                id=task_id,
                instruction=_require(entry, "instruction", task_id),
                input_path=_existing(directory, _require(entry, "input", task_id)),
                category=_require(entry, "category", task_id),
                answers=answers,
                golden_output_path=golden,
                golden_sheet=entry.get("golden_sheet"),
                transcript_path=_existing(directory, transcript) if transcript else None,
            )
        )
    return tasks


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


def values_match(expected: CellValue, got: CellValue) -> bool:
    """Numbers within a relative tolerance, text after trimming, the rest exactly."""
    if expected.kind is ValueKind.NUMBER and got.kind is ValueKind.NUMBER:
        return math.isclose(expected.value, got.value, rel_tol=REL_TOLERANCE, abs_tol=1e-12)
    if expected.kind is ValueKind.TEXT or got.kind is ValueKind.TEXT:
        if expected.is_empty or got.is_empty:
            return expected.as_text().strip() == got.as_text().strip()
        if expected.kind is got.kind:
            return expected.value.strip() == got.value.strip()
        return False
    return expected.kind is got.kind and expected.value == got.value


def _load(path: Path) -> Workbook | None:
    try:
        return load_workbook(path)
    except (WorkbookError, OSError) as exc:
        log.info("cannot load %s: %s", path, exc)
        return None


def _sheet(wb: Workbook, name: str) -> Sheet | None:
    return next((s for s in wb.sheets if s.name == name), None)


def _golden_target(task: TaskInstance, golden: Workbook) -> Sheet | None:
    return _sheet(golden, task.golden_sheet) if task.golden_sheet else golden.sheets[0]


def _expected_cells(task: TaskInstance, golden: Workbook | None) -> dict[tuple[str, CellRef], CellValue] | None:
    """The cells an output must hold, keyed by (sheet, ref)."""
    if task.answers is not None:
        return {(a.sheet, a.cell): a.value for a in task.answers}
    if golden is None:
        return None
    target = _golden_target(task, golden)
    if target is None:
        return None
    return {(target.name, ref): c.value for ref, c in target.cells.items() if not c.value.is_empty}


def _soft(out: Workbook, expected: dict[tuple[str, CellRef], CellValue]) -> bool:
    for (sheet_name, ref), value in expected.items():
        sheet = _sheet(out, sheet_name)
        if sheet is None or not values_match(value, get_cell(sheet, ref)[0]):
            return False
    return True


def score_soft(output_path: str | Path, task: TaskInstance) -> bool:
    out = _load(Path(output_path))
    if out is None:
        return False
    golden = _load(task.golden_output_path) if task.golden_output_path else None
    expected = _expected_cells(task, golden)
    return expected is not None and _soft(out, expected)


def _untouched(before: Sheet, after: Sheet, allowed: set[CellRef]) -> bool:
    if set(before.merged) != set(after.merged):
        return False
    for ref in set(before.cells) | set(after.cells):
        if ref in allowed:
            continue
        if not values_match(get_cell(before, ref)[0], get_cell(after, ref)[0]):
            return False
    return True


def score_hard(output_path: str | Path, task: TaskInstance) -> bool:
    """Soft pass plus no changes outside the answer cells and no lost merges."""
    out = _load(Path(output_path))
    source = _load(task.input_path)
    if out is None or source is None:
        return False
    golden = _load(task.golden_output_path) if task.golden_output_path else None
    expected = _expected_cells(task, golden)
    if expected is None or not _soft(out, expected):
        return False
    if out.sheet_names != source.sheet_names:
        return False
    for before in source.sheets:
        after = out.sheet(before.name)
        allowed = {ref for (name, ref) in expected if name == before.name}
        if golden is not None and before.name == _golden_target(task, golden).name:
            # the golden sheet defines both the edits and the expected merges
            before = _golden_target(task, golden)
        if not _untouched(before, after, allowed):
            return False
    return True


# --------------------------------------------------------------------------
# benchmark runs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskScore:
    id: str
    category: str
    soft_pass: bool
    hard_pass: bool
    agent_calls: int = 0
    error: str | None = None

    def to_json(self) -> dict:
        doc = {
            "id": self.id,
            "category": self.category,
            "soft_pass": self.soft_pass,
            "hard_pass": self.hard_pass,
            "agent_calls": self.agent_calls,
        }
        if self.error is not None:
            doc["error"] = self.error
        return doc


def _percent(flags: list[bool]) -> float | None:
    return round(100.0 * sum(flags) / len(flags), 4) if flags else None


@dataclass
class ScoreReport:
    tasks: list[TaskScore] = field(default_factory=list)

    def aggregates(self) -> dict[str, dict[str, float | None]]:
        out: dict[str, dict[str, float | None]] = {}
        for restriction in ("soft", "hard"):
            attr = f"{restriction}_pass"
            row = {c: _percent([getattr(t, attr) for t in self.tasks if t.category == c]) for c in CATEGORIES}
            row["overall"] = _percent([getattr(t, attr) for t in self.tasks])
            out[restriction] = row
        return out

    @property
    def total_agent_calls(self) -> int:
        return sum(t.agent_calls for t in self.tasks)

    def to_json(self) -> dict:
        return {
            "tasks": [t.to_json() for t in self.tasks],
            "aggregates": self.aggregates(),
            "stats": {"total_agent_calls": self.total_agent_calls, "task_count": len(self.tasks)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class BenchConfig:
    loop: LoopConfig = field(default_factory=LoopConfig)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    task_timeout_s: float = DEFAULT_TASK_TIMEOUT_S
    workers: int = 1


BackendFactory = Callable[[TaskInstance], Backends]


def scripted_backends(task: TaskInstance) -> Backends:
    """Backends replaying the transcript a task ships with."""
    if task.transcript_path is None:
        raise ValueError(f"task {task.id} has no transcript")
    return Backends.single(ScriptedBackend.from_file(task.transcript_path))


def _run_one(
    task: TaskInstance,
    config: BenchConfig,
    backends: Backends,
    work_dir: Path,
    archive_dir: Path | None,
    cancel: threading.Event,
) -> TaskScore:
    stats = AgentCallStats()
    counted = backends.counted(stats)
    start = time.perf_counter()
    solve_ctx = None
    vs = None
    try:
        wb = load_workbook(task.input_path)
        with Workspace.create(work_dir, task.input_path, counted, config.loop, config.sandbox) as ws:
            vs = extract_workbook(wb, counted, config.loop, ws.env, ws.input_mount_path)
            if cancel.is_set():
                raise TimeoutError("task cancelled")
            out_path, solve_ctx = solving_stage(wb, task.instruction, vs, counted.text, config.loop, ws)
            soft = score_soft(out_path, task)
            hard = soft and score_hard(out_path, task)
        return TaskScore(task.id, task.category, soft, hard, stats.total_agent_calls)
    except Exception as exc:  # noqa: BLE001 - a failing task is scored, never fatal
        log.warning("task %s failed: %s", task.id, exc)
        reason = getattr(exc, "reason", None) or f"{type(exc).__name__}: {exc}"
        return TaskScore(task.id, task.category, False, False, stats.total_agent_calls, reason)
    finally:
        stats.wall_clock_seconds = time.perf_counter() - start
        if archive_dir is not None:
            target = archive_dir / task.id
            if vs is not None:
                vs.archive(target)
            if solve_ctx is not None:
                (target / "solve.json").write_text(
                    json.dumps(solve_ctx.to_json(), indent=1, ensure_ascii=False), encoding="utf-8"
                )
            target.mkdir(parents=True, exist_ok=True)
            (target / "stats.json").write_text(json.dumps(stats.to_json()) + "\n", encoding="utf-8")


def run_benchmark(
    tasks: list[TaskInstance],
    config: BenchConfig,
    backends: Backends | BackendFactory,
    archive_dir: str | Path | None = None,
) -> ScoreReport:
    """Run extraction, solving and scoring for every task.

    ``backends`` is either one pair shared by all tasks or a factory called per
    task. The report lists tasks in manifest order whatever the worker count.
    """
    factory: BackendFactory = backends if callable(backends) else (lambda _t: backends)
    archive = Path(archive_dir) if archive_dir is not None else None
    scores: dict[str, TaskScore] = {}
    with tempfile.TemporaryDirectory(prefix="sheetsketch-bench-") as tmp:
        pool = ThreadPoolExecutor(max_workers=max(1, config.workers))
        try:
            pending = []
            for i, task in enumerate(tasks):
                cancel = threading.Event()
                try:
                    pair = factory(task)
                except Exception as exc:  # noqa: BLE001
                    scores[task.id] = TaskScore(task.id, task.category, False, False, error=f"backend setup: {exc}")
                    continue
                future = pool.submit(_run_one, task, config, pair, Path(tmp) / f"{i:04d}", archive, cancel)
                pending.append((task, future, cancel))
            for task, future, cancel in pending:
                try:
                    # with one worker each wait begins as that task starts
                    score = future.result(timeout=config.task_timeout_s)
                except FutureTimeout:
                    cancel.set()
                    score = TaskScore(task.id, task.category, False, False, error="task timed out")
                scores[task.id] = score
        finally:
            pool.shutdown(wait=False, cancel_futures=True)
    return ScoreReport([scores[t.id] for t in tasks])
