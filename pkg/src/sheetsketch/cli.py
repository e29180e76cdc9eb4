"""Command-line entry point: ``sheetsketch <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Iterator, Sequence

from .config import AppConfig, ConfigError, load_config
from .convert import ConvertError, range_to_image, range_to_latex
from .harness import ManifestError, MissingFile, load_tasks, run_benchmark, scripted_backends
from .llm import BackendError, ScriptedBackend
from .orchestrator import (
    CHANNELS,
    AgentCallStats,
    Backends,
    LoopConfig,
    SolveFailed,
    VerifiedSketch,
    Workspace,
    extract_workbook,
    extraction_stage,
    solving_stage,
    verification_stage,
)
from .refs import MalformedRef, parse_range
from .sketch import Severity, parse_sketches, validate_sketch
from .workbook import WorkbookError, load_workbook, used_range

log = logging.getLogger("sheetsketch")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------


def _backends(args: argparse.Namespace, cfg: AppConfig) -> Backends:
    if args.scripted:
        return Backends.single(ScriptedBackend.from_file(args.scripted))
    return cfg.backends()


@contextlib.contextmanager
def _workspace(args: argparse.Namespace, cfg: AppConfig, xlsx: Path, backends: Backends, loop: LoopConfig) -> Iterator[Workspace]:
    with contextlib.ExitStack() as stack:
        if cfg.sandbox_root is not None:
            root = cfg.sandbox_root
        else:
            root = Path(stack.enter_context(tempfile.TemporaryDirectory(prefix="sheetsketch-")))
        yield stack.enter_context(Workspace.create(root, xlsx, backends, loop, cfg.sandbox))


def _sheet_name(wb, requested: str | None) -> str:
    if requested is None:
        return wb.sheet_names[0]
    if requested not in wb.sheet_names:
        raise CliError(f"no sheet named {requested!r}; sheets are {wb.sheet_names}")
    return requested


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _archive(args: argparse.Namespace, name: str, ctx) -> None:
    if args.seed_archive and ctx is not None:
        target = Path(args.seed_archive)
        target.mkdir(parents=True, exist_ok=True)
        (target / f"{name}.json").write_text(json.dumps(ctx.to_json(), indent=1, ensure_ascii=False), encoding="utf-8")


def _report_violations(text: str, wb) -> None:
    sketches, errors = parse_sketches(text)
    for e in errors:
        log.warning("sketch block %s: %s", e.block_index, e)
    for s in sketches:
        for v in validate_sketch(s, wb):
            level = logging.WARNING if v.severity is Severity.ERROR else logging.INFO
            log.log(level, "%s: %s", s.table_range, v.message)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace, cfg: AppConfig) -> int:
    xlsx = Path(args.xlsx)
    wb = load_workbook(xlsx)
    sheet = _sheet_name(wb, args.sheet)
    backends = _backends(args, cfg)
    with _workspace(args, cfg, xlsx, backends, cfg.loop) as ws:
        text, ctx = extraction_stage(wb, sheet, backends.text, cfg.loop, ws.env, ws.input_mount_path)
    _archive(args, "extraction", ctx)
    _report_violations(text, wb)
    _write_or_print(text, args.out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, cfg: AppConfig) -> int:
    xlsx = Path(args.xlsx)
    wb = load_workbook(xlsx)
    sketch_text = Path(args.sketch).read_text(encoding="utf-8")
    sketches, _ = parse_sketches(sketch_text)
    sheet = _sheet_name(wb, args.sheet or (sketches[0].sheet_name if sketches else None))
    channels = CHANNELS if args.channel == "both" else (args.channel,)
    backends = _backends(args, cfg)
    result = {}
    with _workspace(args, cfg, xlsx, backends, cfg.loop) as ws:
        for channel in channels:
            backend = backends.vision if channel == "vision" else backends.text
            report, ctx = verification_stage(channel, wb, sheet, sketch_text, backend, cfg.loop, ws.env, ws.input_mount_path)
            _archive(args, f"verify_{channel}", ctx)
            result[channel] = {"passed": report.passed, "issues": list(report.issues)}
    print(json.dumps(result, indent=2, ensure_ascii=False))
    return EXIT_OK if all(r["passed"] for r in result.values()) else EXIT_FAILED


def cmd_loop(args: argparse.Namespace, cfg: AppConfig) -> int:
    xlsx = Path(args.xlsx)
    wb = load_workbook(xlsx)
    loop = cfg.loop
    if args.max_iters is not None:
        loop = LoopConfig(loop.max_tool_rounds, args.max_iters, loop.decoding)
    stats = AgentCallStats()
    backends = _backends(args, cfg).counted(stats)
    sheets = [_sheet_name(wb, args.sheet)] if args.sheet else None
    with _workspace(args, cfg, xlsx, backends, loop) as ws:
        vs = extract_workbook(wb, backends, loop, ws.env, ws.input_mount_path, sheets)
    if args.seed_archive:
        vs.archive(args.seed_archive)
    if args.out:
        Path(args.out).write_text(vs.sketch_text, encoding="utf-8")
    summary = {
        "verified": vs.verified,
        "iterations_used": vs.iterations_used,
        "tables": len(vs.sketches),
        "agent_calls": stats.total_agent_calls,
        "issues": [{ch: list(r.issues) for ch, r in round_.items()} for round_ in vs.reports],
    }
    print(json.dumps(summary, indent=2, ensure_ascii=False))
    return EXIT_OK if vs.verified else EXIT_FAILED


def cmd_solve(args: argparse.Namespace, cfg: AppConfig) -> int:
    xlsx = Path(args.xlsx)
    wb = load_workbook(xlsx)
    sketch_text = Path(args.sketch).read_text(encoding="utf-8") if args.sketch else ""
    vs = VerifiedSketch(sketch_text, parse_sketches(sketch_text)[0], bool(sketch_text.strip()), 0)
    backends = _backends(args, cfg)
    with _workspace(args, cfg, xlsx, backends, cfg.loop) as ws:
        produced, ctx = solving_stage(wb, args.instruction, vs, backends.text, cfg.loop, ws)
        shutil.copyfile(produced, args.out)
    _archive(args, "solve", ctx)
    print(args.out)
    return EXIT_OK


def cmd_convert(args: argparse.Namespace, cfg: AppConfig) -> int:
    wb = load_workbook(args.xlsx)
    sheet = wb.sheet(_sheet_name(wb, args.sheet))
    rng = parse_range(args.range) if args.range else used_range(sheet)
    if rng is None:
        raise CliError("the sheet is empty; give --range")
    if args.to == "latex":
        _write_or_print(range_to_latex(sheet, rng), args.out)
    else:
        if not args.out:
            raise CliError("--out is required for images")
        Path(args.out).write_bytes(range_to_image(sheet, rng).encoded_bytes)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, cfg: AppConfig) -> int:
    tasks = load_tasks(args.manifest_dir)
    if args.scripted:
        shared = ScriptedBackend.from_file(args.scripted)
        factory = lambda _task: Backends.single(shared.clone())  # noqa: E731
    elif cfg.has_endpoints:
        factory = lambda _task: cfg.backends()  # noqa: E731
    else:
        factory = scripted_backends
    report = run_benchmark(tasks, cfg.bench(), factory, args.seed_archive)
    text = report.dumps()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sheetsketch", description="Spreadsheet structure extraction and solving agents.")
    parser.add_argument("--config", help="JSON or YAML file with endpoints, budgets and sandbox settings")
    parser.add_argument("--scripted", metavar="TRANSCRIPT.json", help="replay a recorded transcript instead of calling models")
    parser.add_argument("--seed-archive", metavar="DIR", help="write conversation transcripts into DIR")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run the extraction stage once")
    p.add_argument("xlsx")
    p.add_argument("--sheet")
    p.add_argument("--out", help="write the sketch YAML here instead of stdout")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="check a sketch through one or both channels")
    p.add_argument("xlsx")
    p.add_argument("sketch")
    p.add_argument("--sheet")
    p.add_argument("--channel", choices=["vision", "latex", "both"], default="both")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("loop", help="extract and verify until both channels agree")
    p.add_argument("xlsx")
    p.add_argument("--sheet", help="only this sheet (default: every sheet)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--out", help="write the final sketch YAML here")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("solve", help="edit the workbook according to an instruction")
    p.add_argument("xlsx")
    p.add_argument("--instruction", required=True)
    p.add_argument("--sketch", help="sketch YAML produced by extract or loop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("convert", help="render a range as LaTeX or PNG")
    p.add_argument("xlsx")
    p.add_argument("--sheet")
    p.add_argument("--range", help="A1 range (default: the used range)")
    p.add_argument("--to", choices=["latex", "image"], required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bench", help="run a task manifest and score it")
    p.add_argument("manifest_dir")
    p.add_argument("--report", help="write the JSON score report here")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (CliError, ConfigError, ManifestError, MissingFile, MalformedRef, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WorkbookError, ConvertError, BackendError, SolveFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
