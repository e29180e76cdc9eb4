"""Agent stages: extraction, dual verification, the refinement loop, and solving."""

from __future__ import annotations

import json
import re
import shutil
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .llm import (
    Backend,
    ChatMessage,
    DecodingParams,
    Text,
    ToolSpec,
    UnsatisfiableBudget,
    truncate_to_budget,
)
from .sketch import TableSketch, VerificationReport, parse_sketches, parse_verification
from .tools import (
    DATA_MOUNT,
    EXTRACTION_TOOLS,
    FULL_REGISTRY,
    LATEX_CHANNEL_TOOLS,
    SOLVING_TOOLS,
    VISION_CHANNEL_TOOLS,
    CodeSession,
    ToolEnv,
    ToolRegistry,
    dispatch_tool,
)
from .workbook import Workbook, used_range

CHANNELS = ("vision", "latex")
FEEDBACK_HEADING = "Verification issues to fix"
NO_SKETCH_ISSUE = "The extraction produced no structural sketch to verify."


class SolveFailed(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class LoopConfig:
    max_tool_rounds: int = 20
    max_refine_iterations: int = 3
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self) -> None:
        if self.max_tool_rounds < 1 or self.max_refine_iterations < 1:
            raise ValueError("round and iteration caps must be positive")


@dataclass
class AgentCallStats:
    total_agent_calls: int = 0
    wall_clock_seconds: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_call(self) -> None:
        with self._lock:
            self.total_agent_calls += 1

    def absorb(self, other: AgentCallStats) -> None:
        with self._lock:
            self.total_agent_calls += other.total_agent_calls
            self.wall_clock_seconds += other.wall_clock_seconds

    def to_json(self) -> dict:
        return {"total_agent_calls": self.total_agent_calls, "wall_clock_seconds": round(self.wall_clock_seconds, 3)}


class _Counted:
    """Backend wrapper that reports each completed call to a stats sink."""

    def __init__(self, inner: Backend, stats: AgentCallStats) -> None:
        self.inner = inner
        self.stats = stats

    def complete(self, messages, tools, decoding):
        reply = self.inner.complete(messages, tools, decoding)
        self.stats.record_call()
        return reply


@dataclass
class Backends:
    """The two model roles: a text model and a vision-language model."""

    text: Backend
    vision: Backend

    @classmethod
    def single(cls, backend: Backend) -> Backends:
        return cls(backend, backend)

    def counted(self, stats: AgentCallStats) -> Backends:
        if self.text is self.vision:
            shared = _Counted(self.text, stats)
            return Backends(shared, shared)
        return Backends(_Counted(self.text, stats), _Counted(self.vision, stats))


# --------------------------------------------------------------------------
# conversation context and the tool loop
# --------------------------------------------------------------------------


@dataclass
class ConversationContext:
    stage: str
    messages: list[ChatMessage] = field(default_factory=list)
    token_budget: DecodingParams = field(default_factory=DecodingParams)
    rounds_used: int = 0
    total_rounds: int = 0
    cap_hit: bool = False

    def append(self, message: ChatMessage) -> None:
        """Add a message, trimmed to the per-round token budget."""
        budget = self.token_budget.max_tokens_per_round
        try:
            message = truncate_to_budget(message, budget)
        except UnsatisfiableBudget:
            if message.role == "tool":
                message = ChatMessage.tool(
                    message.tool_call_id or "call",
                    [Text(f"Tool output dropped: it exceeds the {budget}-token budget per round.")],
                )
            # an assistant turn with oversized tool calls is kept whole; rewriting
            # its calls would break the pairing with the tool replies that follow
        self.messages.append(message)

    @property
    def last_assistant_text(self) -> str:
        for m in reversed(self.messages):
            if m.role == "assistant":
                return m.text
        return ""

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "rounds_used": self.rounds_used,
            "total_rounds": self.total_rounds,
            "cap_hit": self.cap_hit,
            "messages": [m.to_json() for m in self.messages],
        }


def run_tool_loop(
    ctx: ConversationContext,
    backend: Backend,
    registry: ToolRegistry,
    env: ToolEnv,
    config: LoopConfig,
) -> str:
    """Let the model call tools until it answers in plain text or runs out of rounds."""
    ctx.rounds_used = 0
    ctx.cap_hit = False
    specs: Sequence[ToolSpec] = registry.specs
    while True:
        if ctx.rounds_used >= config.max_tool_rounds:
            ctx.cap_hit = True
            return ctx.last_assistant_text
        reply = backend.complete(ctx.messages, specs, config.decoding)
        ctx.rounds_used += 1
        ctx.total_rounds += 1
        ctx.append(reply)
        if not reply.tool_calls:
            return reply.text
        for call in reply.tool_calls:
            ctx.append(dispatch_tool(call, env, registry).to_message())


# --------------------------------------------------------------------------
# prompts
# --------------------------------------------------------------------------


def load_prompt(name: str) -> str:
    return resources.files("sheetsketch").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")


def render_prompt(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders in one pass; unknown braces are left alone."""
    return re.sub(r"\{(\w+)\}", lambda m: values.get(m.group(1), m.group(0)), template)


def used_range_text(wb: Workbook, sheet_name: str) -> str:
    rng = used_range(wb.sheet(sheet_name))
    return "empty" if rng is None else str(rng)


# --------------------------------------------------------------------------
# workspace: sandbox directory, code session and tool environment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SandboxConfig:
    guest_executable: str | None = None
    data_mount: str = DATA_MOUNT
    code_timeout_s: float = 60.0


@dataclass
class Workspace:
    """A per-run sandbox holding the input workbook under ``<mount>/input``."""

    root: Path
    input_host_path: Path
    input_mount_path: str
    session: CodeSession
    env: ToolEnv

    @classmethod
    def create(
        cls,
        root: str | Path,
        input_path: str | Path,
        backends: Backends,
        config: LoopConfig,
        sandbox: SandboxConfig = SandboxConfig(),
    ) -> Workspace:
        root = Path(root).resolve()
        (root / "input").mkdir(parents=True, exist_ok=True)
        (root / "output").mkdir(exist_ok=True)
        src = Path(input_path)
        dest = root / "input" / src.name
        if src.resolve() != dest:
            shutil.copyfile(src, dest)
        session = CodeSession(root, sandbox.guest_executable, sandbox.code_timeout_s, sandbox.data_mount)
        env = ToolEnv(
            text_backend=backends.text,
            vision_backend=backends.vision,
            decoding=config.decoding,
            code_session=session,
            sandbox_root=root,
            data_mount=sandbox.data_mount,
        )
        mount = sandbox.data_mount.rstrip("/")
        return cls(root, dest, f"{mount}/input/{src.name}", session, env)

    def output_paths(self) -> tuple[Path, str]:
        """Host and mount paths where the solver must save its result."""
        stem = self.input_host_path.stem
        out_stem = stem.replace("_input", "_output") if "_input" in stem else stem + "_output"
        name = out_stem + ".xlsx"
        mount = self.env.data_mount.rstrip("/")
        return self.root / "output" / name, f"{mount}/output/{name}"

    def close(self) -> None:
        self.session.close()

    def __enter__(self) -> Workspace:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def new_extraction_context(wb: Workbook, sheet_name: str, spreadsheet_path: str, config: LoopConfig) -> ConversationContext:
    prompt = render_prompt(
        load_prompt("extraction"),
        spreadsheet_path=spreadsheet_path,
        sheet_name=sheet_name,
        used_range=used_range_text(wb, sheet_name),
    )
    ctx = ConversationContext("extraction", token_budget=config.decoding)
    ctx.append(ChatMessage.user(prompt))
    return ctx


def extraction_stage(
    wb: Workbook,
    sheet_name: str,
    backend: Backend,
    config: LoopConfig,
    env: ToolEnv,
    spreadsheet_path: str,
    ctx: ConversationContext | None = None,
) -> tuple[str, ConversationContext]:
    """Run (or continue) extraction; returns the candidate text and its context."""
    if ctx is None:
        ctx = new_extraction_context(wb, sheet_name, spreadsheet_path, config)
    text = run_tool_loop(ctx, backend, FULL_REGISTRY.restricted(EXTRACTION_TOOLS), env, config)
    return text, ctx


def verification_stage(
    channel: str,
    wb: Workbook,
    sheet_name: str,
    sketch_text: str,
    backend: Backend,
    config: LoopConfig,
    env: ToolEnv,
    spreadsheet_path: str,
) -> tuple[VerificationReport, ConversationContext]:
    if channel not in CHANNELS:
        raise ValueError(f"unknown verification channel {channel!r}")
    if not sketch_text.strip():
        raise ValueError("nothing to verify")
    prompt = render_prompt(
        load_prompt("verification"),
        spreadsheet_path=spreadsheet_path,
        sheet_name=sheet_name,
        used_range=used_range_text(wb, sheet_name),
        spreadsheet_info=sketch_text,
    )
    ctx = ConversationContext(f"verify_{channel}", token_budget=config.decoding)
    ctx.append(ChatMessage.user(prompt))
    names = VISION_CHANNEL_TOOLS if channel == "vision" else LATEX_CHANNEL_TOOLS
    final = run_tool_loop(ctx, backend, FULL_REGISTRY.restricted(names), env, config)
    return parse_verification(final), ctx


def feedback_message(reports: dict[str, VerificationReport]) -> str:
    lines = [f"{FEEDBACK_HEADING}:"]
    for channel, report in reports.items():
        for issue in report.issues:
            lines.append(f"- [{channel}] {issue}")
    lines.append("")
    lines.append("Revise the structure to resolve these issues and output the complete corrected YAML.")
    return "\n".join(lines)


@dataclass
class VerifiedSketch:
    sketch_text: str
    sketches: list[TableSketch]
    verified: bool
    iterations_used: int
    transcripts: dict[str, ConversationContext] = field(default_factory=dict)
    reports: list[dict[str, VerificationReport]] = field(default_factory=list)

    def archive(self, directory: str | Path, prefix: str = "") -> list[Path]:
        """Write every stage transcript as JSON; returns the written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, ctx in self.transcripts.items():
            path = directory / f"{prefix}{name}.json"
            path.write_text(json.dumps(ctx.to_json(), indent=1, ensure_ascii=False), encoding="utf-8")
            written.append(path)
        return written


def extraction_verification_loop(
    wb: Workbook,
    sheet_name: str,
    backends: Backends,
    config: LoopConfig,
    env: ToolEnv,
    spreadsheet_path: str,
) -> VerifiedSketch:
    """Extract, verify through both channels, and feed issues back until both pass."""
    result = VerifiedSketch("", [], False, 0)
    ctx = new_extraction_context(wb, sheet_name, spreadsheet_path, config)
    result.transcripts["extraction"] = ctx
    for iteration in range(1, config.max_refine_iterations + 1):
        result.iterations_used = iteration
        candidate, _ = extraction_stage(wb, sheet_name, backends.text, config, env, spreadsheet_path, ctx)
        result.sketch_text = candidate
        reports: dict[str, VerificationReport] = {}
        if not candidate.strip():
            reports = {c: VerificationReport(False, (NO_SKETCH_ISSUE,)) for c in CHANNELS}
        else:
            for channel in CHANNELS:
                backend = backends.vision if channel == "vision" else backends.text
                report, vctx = verification_stage(
                    channel, wb, sheet_name, candidate, backend, config, env, spreadsheet_path
                )
                reports[channel] = report
                result.transcripts[f"verify_{channel}_{iteration}"] = vctx
        result.reports.append(reports)
        if all(r.passed for r in reports.values()):
            result.verified = True
            break
        if iteration < config.max_refine_iterations:
            ctx.append(ChatMessage.user(feedback_message(reports)))
    result.sketches = parse_sketches(result.sketch_text)[0]
    return result


def extract_workbook(
    wb: Workbook,
    backends: Backends,
    config: LoopConfig,
    env: ToolEnv,
    spreadsheet_path: str,
    sheet_names: Sequence[str] | None = None,
) -> VerifiedSketch:
    """Run the loop per sheet and concatenate the results."""
    names = list(sheet_names or wb.sheet_names)
    parts = [extraction_verification_loop(wb, n, backends, config, env, spreadsheet_path) for n in names]
    if len(parts) == 1:
        return parts[0]
    merged = VerifiedSketch(
        "\n\n".join(p.sketch_text for p in parts),
        [s for p in parts for s in p.sketches],
        all(p.verified for p in parts),
        max(p.iterations_used for p in parts),
    )
    for name, p in zip(names, parts):
        merged.transcripts.update({f"{name}/{k}": v for k, v in p.transcripts.items()})
        merged.reports.extend(p.reports)
    return merged


SOLVE_PROMPT = """You are a spreadsheet expert who can analyze and manipulate spreadsheets using Python.

### Instruction
{instruction}

### Spreadsheet
Input file: {input_path}
Save the complete modified workbook to: {output_path}
Change only the cells the instruction asks for.

### Structure of the spreadsheet
{sketch_status}
{sketch_text}
"""


def solving_stage(
    wb: Workbook,
    instruction: str,
    vs: VerifiedSketch,
    backend: Backend,
    config: LoopConfig,
    workspace: Workspace,
) -> tuple[Path, ConversationContext]:
    """Ask the model to edit the workbook with code; returns the output file path."""
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    host_out, mount_out = workspace.output_paths()
    if host_out.exists():
        host_out.unlink()
    status = "(verified)" if vs.verified else "(not fully verified; treat with care)"
    prompt = render_prompt(
        SOLVE_PROMPT,
        instruction=instruction,
        input_path=workspace.input_mount_path,
        output_path=mount_out,
        sketch_status=status,
        sketch_text=vs.sketch_text or "(no structure available)",
    )
    ctx = ConversationContext("solve", token_budget=config.decoding)
    ctx.append(ChatMessage.user(prompt))
    run_tool_loop(ctx, backend, FULL_REGISTRY.restricted(SOLVING_TOOLS), workspace.env, config)
    if not host_out.exists():
        raise SolveFailed(f"no output file was written to {mount_out}")
    return host_out, ctx


def timed(fn, stats: AgentCallStats, *args, **kwargs):
    start = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    finally:
        stats.wall_clock_seconds += time.perf_counter() - start
