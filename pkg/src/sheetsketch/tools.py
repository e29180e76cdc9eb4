"""The five agent tools, their JSON schemas, and a total dispatcher.

Tool failures come back as ``ToolResult(is_error=True)`` rather than
exceptions, so an agent loop can always append the outcome and carry on.
"""

from __future__ import annotations

import json
import os
import selectors
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, Sequence

from jsonschema import Draft7Validator

from .convert import ConvertError, RenderOptions, range_to_image, range_to_latex
from .llm import Backend, BackendError, ChatMessage, DecodingParams, ImageRef, Part, Text, ToolCall, ToolSpec
from .refs import MalformedRef, RangeRef, parse_range
from .workbook import UnknownSheet, Workbook, WorkbookError, load_workbook, used_range

__all__ = [
    "CodeSession",
    "ToolCall",
    "ToolEnv",
    "ToolRegistry",
    "ToolResult",
    "dispatch_tool",
    "load_tool_specs",
]

DATA_MOUNT = "/mnt/data"
CODE_TIMEOUT_S = 60.0

EXECUTE_PYTHON = "execute_python"
VISION_QA = "vision_question_answer"
LATEX_QA = "latex_question_answer"
TO_IMAGE = "convert_excel_to_image"
TO_LATEX = "convert_excel_to_latex"


class ToolFailure(Exception):
    """An expected tool error; its message goes back to the model."""


@dataclass(frozen=True)
class ToolResult:
    tool_call_id: str
    parts: tuple[Part, ...]
    is_error: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("a tool result needs at least one part")

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, Text))

    def to_message(self) -> ChatMessage:
        parts = self.parts
        if self.is_error:
            parts = (Text("ERROR: " + self.text),) + tuple(p for p in parts if not isinstance(p, Text))
        return ChatMessage.tool(self.tool_call_id, parts)


def error_result(call_id: str, message: str) -> ToolResult:
    return ToolResult(call_id, (Text(message),), is_error=True)


# --------------------------------------------------------------------------
# code execution sandbox
# --------------------------------------------------------------------------

_GUEST_SOURCE = resources.files("sheetsketch").joinpath("_guest.py").read_text(encoding="utf-8")


class CodeSession:
    """A persistent guest interpreter confined to ``sandbox_root``.

    Code sees the sandbox as ``/mnt/data``: the mount path is rewritten to the
    real directory before execution and back again in the output.
    """

    def __init__(
        self,
        sandbox_root: str | Path,
        guest_executable: str | None = None,
        timeout_s: float = CODE_TIMEOUT_S,
        data_mount: str = DATA_MOUNT,
        session_id: str | None = None,
    ) -> None:
        self.sandbox_root = Path(sandbox_root).resolve()
        self.sandbox_root.mkdir(parents=True, exist_ok=True)
        self.guest_executable = guest_executable or sys.executable
        self.timeout_s = timeout_s
        self.data_mount = data_mount.rstrip("/")
        self.session_id = session_id or uuid.uuid4().hex[:12]
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()
        self._pending = b""

    # -- process management --

    def _env(self) -> dict[str, str]:
        tmp = self.sandbox_root / ".tmp"
        tmp.mkdir(exist_ok=True)
        return {
            "PATH": "/usr/local/bin:/usr/bin:/bin",
            "HOME": str(self.sandbox_root),
            "TMPDIR": str(tmp),
            "LANG": "C.UTF-8",
            "PYTHONIOENCODING": "utf-8",
            "MPLBACKEND": "Agg",
            "NO_PROXY": "*",
            "no_proxy": "*",
            "http_proxy": "http://127.0.0.1:9",
            "https_proxy": "http://127.0.0.1:9",
        }

    def start(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            return
        self._pending = b""
        self._proc = subprocess.Popen(
            [self.guest_executable, "-E", "-c", _GUEST_SOURCE, str(self.sandbox_root)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            cwd=self.sandbox_root,
            env=self._env(),
            bufsize=0,
            start_new_session=True,
        )
        try:
            ready = self._read_line(max(self.timeout_s, 30.0))
        except EOFError:
            ready = None
        if ready is None or not json.loads(ready).get("ready"):
            self._kill()
            raise RuntimeError("guest interpreter failed to start")

    def _kill(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        proc.wait()
        for stream in (proc.stdin, proc.stdout):
            if stream:
                stream.close()

    def close(self) -> None:
        with self._lock:
            self._kill()

    def __enter__(self) -> CodeSession:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    @property
    def alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    # -- protocol --

    def _read_line(self, timeout: float) -> str | None:
        """One protocol line, or None on timeout; EOFError when the guest died."""
        assert self._proc is not None and self._proc.stdout is not None
        fd = self._proc.stdout.fileno()
        deadline = time.monotonic() + timeout
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while b"\n" not in self._pending:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    return None
                chunk = os.read(fd, 65536)
                if not chunk:
                    raise EOFError("guest closed its output")
                self._pending += chunk
        line, _, self._pending = self._pending.partition(b"\n")
        return line.decode("utf-8")

    def to_host(self, text: str) -> str:
        return text.replace(self.data_mount, str(self.sandbox_root))

    def to_guest(self, text: str) -> str:
        return text.replace(str(self.sandbox_root), self.data_mount)

    def execute(self, code: str) -> tuple[str, bool]:
        """Run one cell; returns (output, is_error)."""
        with self._lock:
            self.start()
            assert self._proc is not None and self._proc.stdin is not None
            try:
                self._proc.stdin.write((json.dumps({"code": self.to_host(code)}) + "\n").encode("utf-8"))
                self._proc.stdin.flush()
            except BrokenPipeError:
                self._kill()
                return "The Python interpreter crashed; its state was lost.", True
            try:
                line = self._read_line(self.timeout_s)
            except EOFError:
                self._kill()
                return "The Python interpreter crashed; its state was lost.", True
            if line is None:
                self._kill()
                return (
                    f"Execution timed out after {self.timeout_s:.1f} seconds; the interpreter was "
                    "restarted and its state was lost.",
                    True,
                )
            reply = json.loads(line)
            return self.to_guest(reply["output"]), bool(reply["error"])


# --------------------------------------------------------------------------
# tool environment and handlers
# --------------------------------------------------------------------------

VISION_SYSTEM = (
    "You answer questions about a picture of a spreadsheet range. Column letters run along "
    "the top margin and row numbers down the left margin. Answer from what is visible."
)
LATEX_SYSTEM = (
    "You answer questions about a spreadsheet range rendered as a LaTeX tabular. Merged cells "
    "appear as multicolumn/multirow entries. Answer from the table contents."
)


@dataclass
class ToolEnv:
    """Everything the tools need at run time."""

    text_backend: Backend | None = None
    vision_backend: Backend | None = None
    decoding: DecodingParams = field(default_factory=DecodingParams)
    code_session: CodeSession | None = None
    sandbox_root: Path | None = None
    data_mount: str = DATA_MOUNT
    render: RenderOptions = field(default_factory=RenderOptions)
    _cache: dict = field(default_factory=dict, repr=False)

    def resolve(self, path: str) -> Path:
        mount = self.data_mount.rstrip("/")
        if self.sandbox_root is not None and (path == mount or path.startswith(mount + "/")):
            return Path(str(self.sandbox_root) + path[len(mount) :])
        return Path(path)

    def workbook(self, path: str) -> Workbook:
        real = self.resolve(path)
        try:
            st = real.stat()
        except OSError:
            raise ToolFailure(f"file not found: {path}") from None
        key = (str(real), st.st_mtime_ns, st.st_size)
        if key not in self._cache:
            try:
                self._cache[key] = load_workbook(real)
            except WorkbookError as exc:
                raise ToolFailure(f"cannot open {path}: {exc}") from None
        return self._cache[key]


def _target(env: ToolEnv, args: Mapping[str, Any]):
    wb = env.workbook(args["path"])
    try:
        sheet = wb.sheet(args["sheet_name"])
    except UnknownSheet:
        raise ToolFailure(f"unknown sheet {args['sheet_name']!r}; sheets are {wb.sheet_names}") from None
    raw = str(args.get("range") or "").strip()
    if not raw:
        rng = used_range(sheet)
        if rng is None:
            raise ToolFailure(f"sheet {sheet.name!r} is empty")
    else:
        try:
            rng = parse_range(raw)
        except MalformedRef as exc:
            raise ToolFailure(f"malformed range {raw!r}: {exc}") from None
    return sheet, rng


def _ask(backend: Backend | None, role: str, messages: list[ChatMessage], decoding: DecodingParams) -> str:
    if backend is None:
        raise ToolFailure(f"no {role} model is configured")
    try:
        reply = backend.complete(messages, [], decoding)
    except BackendError as exc:
        raise ToolFailure(f"{role} model call failed: {exc}") from None
    return reply.text or "(empty answer)"


def _render_image(env: ToolEnv, sheet, rng: RangeRef):
    try:
        return range_to_image(sheet, rng, env.render)
    except ConvertError as exc:
        raise ToolFailure(str(exc)) from None


def _render_latex(sheet, rng: RangeRef) -> str:
    try:
        return range_to_latex(sheet, rng)
    except ConvertError as exc:
        raise ToolFailure(str(exc)) from None


def execute_python(env: ToolEnv, args: Mapping[str, Any]) -> tuple[list[Part], bool]:
    if env.code_session is None:
        raise ToolFailure("code execution is not available")
    output, failed = env.code_session.execute(args["code"])
    return [Text(output if output else "(no output)")], failed


def vision_question_answer(env: ToolEnv, args: Mapping[str, Any]) -> list[Part]:
    sheet, rng = _target(env, args)
    image = _render_image(env, sheet, rng)
    prompt = f"Sheet {sheet.name!r}, range {rng}.\n\nQuestion: {args['question']}"
    messages = [ChatMessage.system(VISION_SYSTEM), ChatMessage.user(prompt, ImageRef(image.encoded_bytes, image.media_type))]
    return [Text(_ask(env.vision_backend, "vision", messages, env.decoding))]


def latex_question_answer(env: ToolEnv, args: Mapping[str, Any]) -> list[Part]:
    sheet, rng = _target(env, args)
    latex = _render_latex(sheet, rng)
    prompt = f"Sheet {sheet.name!r}, range {rng}:\n\n{latex}\nQuestion: {args['question']}"
    messages = [ChatMessage.system(LATEX_SYSTEM), ChatMessage.user(prompt)]
    return [Text(_ask(env.text_backend, "text", messages, env.decoding))]


def convert_excel_to_image(env: ToolEnv, args: Mapping[str, Any]) -> list[Part]:
    sheet, rng = _target(env, args)
    image = _render_image(env, sheet, rng)
    caption = f"Image of {sheet.name!r}!{rng} ({image.width_px}x{image.height_px} px)"
    return [Text(caption), ImageRef(image.encoded_bytes, image.media_type)]


def convert_excel_to_latex(env: ToolEnv, args: Mapping[str, Any]) -> list[Part]:
    sheet, rng = _target(env, args)
    return [Text(_render_latex(sheet, rng))]


# --------------------------------------------------------------------------
# registry and dispatch
# --------------------------------------------------------------------------


def load_tool_specs() -> dict[str, ToolSpec]:
    """The tool definitions shipped in ``prompts/tools.json``, keyed by name."""
    raw = json.loads(resources.files("sheetsketch").joinpath("prompts/tools.json").read_text(encoding="utf-8"))
    specs = {}
    for entry in raw:
        fn = entry["function"]
        specs[fn["name"]] = ToolSpec(fn["name"], fn["description"], fn["parameters"])
    return specs


Handler = Callable[[ToolEnv, Mapping[str, Any]], Any]


class ToolRegistry:
    """An immutable name -> (spec, handler) table."""

    def __init__(self, entries: Iterable[tuple[ToolSpec, Handler]]) -> None:
        table: dict[str, tuple[ToolSpec, Handler]] = {}
        for spec, handler in entries:
            if spec.name in table:
                raise ValueError(f"duplicate tool {spec.name!r}")
            table[spec.name] = (spec, handler)
        self._table = MappingProxyType(table)
        self._validators = {name: Draft7Validator(spec.parameters_schema) for name, (spec, _) in table.items()}

    @property
    def names(self) -> list[str]:
        return list(self._table)

    @property
    def specs(self) -> list[ToolSpec]:
        return [spec for spec, _ in self._table.values()]

    def __contains__(self, name: object) -> bool:
        return name in self._table

    def restricted(self, names: Sequence[str]) -> ToolRegistry:
        return ToolRegistry(self._table[n] for n in names)

    def lookup(self, name: str) -> tuple[ToolSpec, Handler]:
        return self._table[name]

    def argument_errors(self, name: str, arguments: Any) -> list[str]:
        errors = []
        for e in self._validators[name].iter_errors(arguments):
            where = ".".join(str(p) for p in e.absolute_path)
            errors.append(f"{where}: {e.message}" if where else e.message)
        return sorted(errors)


_HANDLERS: dict[str, Handler] = {
    EXECUTE_PYTHON: execute_python,
    VISION_QA: vision_question_answer,
    LATEX_QA: latex_question_answer,
    TO_IMAGE: convert_excel_to_image,
    TO_LATEX: convert_excel_to_latex,
}

FULL_REGISTRY = ToolRegistry((spec, _HANDLERS[name]) for name, spec in load_tool_specs().items())
EXTRACTION_TOOLS = (EXECUTE_PYTHON, VISION_QA, LATEX_QA, TO_IMAGE, TO_LATEX)
VISION_CHANNEL_TOOLS = (TO_IMAGE, VISION_QA)
LATEX_CHANNEL_TOOLS = (TO_LATEX, LATEX_QA)
SOLVING_TOOLS = (EXECUTE_PYTHON,)


def dispatch_tool(call: ToolCall, env: ToolEnv, registry: ToolRegistry = FULL_REGISTRY) -> ToolResult:
    """Run a tool call; never raises."""
    call_id = str(getattr(call, "id", "") or "call")
    try:
        name = call.name
        if name not in registry:
            if name in FULL_REGISTRY:
                return error_result(
                    call_id, f"tool {name!r} is not available here; available tools: {', '.join(registry.names)}"
                )
            return error_result(call_id, f"unknown tool {name!r}; available tools: {', '.join(registry.names)}")
        if not isinstance(call.arguments, dict):
            return error_result(call_id, f"arguments for {name!r} must be a JSON object")
        problems = registry.argument_errors(name, call.arguments)
        if problems:
            return error_result(call_id, f"invalid arguments for {name!r}: " + "; ".join(problems))
        _, handler = registry.lookup(name)
        out = handler(env, call.arguments)
        if isinstance(out, tuple):
            parts, failed = out
            return ToolResult(call_id, tuple(parts), is_error=failed)
        return ToolResult(call_id, tuple(out))
    except ToolFailure as exc:
        return error_result(call_id, str(exc))
    except Exception as exc:  # noqa: BLE001 - the loop must continue whatever a tool does
        return error_result(call_id, f"tool failed: {type(exc).__name__}: {exc}")
