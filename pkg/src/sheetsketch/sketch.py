"""The YAML structural sketch: schema, parsing, serialization and checks.

Sketches arrive as fenced ```yaml blocks inside free-form model output.
Scalars are read as plain strings (no YAML 1.1 ``yes``/``no`` coercion) so
header text such as ``No`` or ``2020`` survives verbatim.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

import yaml

from .refs import CellRef, MalformedRef, RangeRef, parse_a1, parse_range
from .workbook import Sheet, UnknownSheet, Workbook, get_cell, merged_region_at, used_range

DATA_TYPES = ("string", "number", "date", "boolean", "mixed", "empty")

_TYPE_SYNONYMS = {
    "text": "string",
    "str": "string",
    "int": "number",
    "integer": "number",
    "float": "number",
    "numeric": "number",
    "decimal": "number",
    "currency": "number",
    "percentage": "number",
    "datetime": "date",
    "time": "date",
    "bool": "boolean",
}


class HeaderFormat(str, Enum):
    COLUMN_ONLY = "column-only"
    ROW_ONLY = "row-only"
    BOTH = "both-row-and-column"


_HEADER_FORMAT_SYNONYMS = {
    "column-only": HeaderFormat.COLUMN_ONLY,
    "column-only header": HeaderFormat.COLUMN_ONLY,
    "column only": HeaderFormat.COLUMN_ONLY,
    "column": HeaderFormat.COLUMN_ONLY,
    "row-only": HeaderFormat.ROW_ONLY,
    "row-only header": HeaderFormat.ROW_ONLY,
    "row only": HeaderFormat.ROW_ONLY,
    "row": HeaderFormat.ROW_ONLY,
    "both": HeaderFormat.BOTH,
    "both-row-and-column": HeaderFormat.BOTH,
    "both row & column headers": HeaderFormat.BOTH,
    "both row and column": HeaderFormat.BOTH,
    "matrix": HeaderFormat.BOTH,
}


def fold_header_format(raw: str | None) -> HeaderFormat | None:
    if raw is None:
        return None
    key = " ".join(str(raw).strip().lower().replace("_", "-").split())
    return _HEADER_FORMAT_SYNONYMS.get(key)


@dataclass(frozen=True)
class HeaderNode:
    start_index: CellRef
    end_index: CellRef
    value: str
    children: tuple[HeaderNode, ...] = ()
    # the node_k key; kept for serialization but not part of the structure
    name: str = field(default="", compare=False)

    @property
    def span(self) -> RangeRef:
        return RangeRef(self.start_index, self.end_index)

    def walk(self) -> Iterable[HeaderNode]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class DataProperty:
    type: str = "mixed"
    unit: str = ""
    format: str = ""

    def __post_init__(self) -> None:
        if self.type not in DATA_TYPES:
            raise ValueError(f"unknown data type {self.type!r}")


@dataclass(frozen=True)
class TableSketch:
    """One detected table.

    Containment rules (data inside table, headers inside table, disjoint
    siblings) are not enforced here; a model may well get them wrong, and
    :func:`validate_sketch` reports them instead.
    """

    sheet_name: str
    table_range: RangeRef
    data_range: RangeRef
    table_name: str = ""
    notes: tuple[str, ...] = ()
    header_format: HeaderFormat | None = None
    row_header: tuple[HeaderNode, ...] = ()
    column_header: tuple[HeaderNode, ...] = ()
    data_properties: tuple[tuple[str, DataProperty], ...] = ()

    def all_nodes(self) -> Iterable[HeaderNode]:
        for root in self.row_header + self.column_header:
            yield from root.walk()


class SchemaError(ValueError):
    def __init__(self, block_index: int, field: str, detail: str) -> None:
        super().__init__(f"yaml block {block_index}: field {field!r}: {detail}")
        self.block_index = block_index
        self.field = field
        self.detail = detail


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Violation:
    severity: Severity
    message: str
    location: RangeRef | None = None

    def __post_init__(self) -> None:
        if not self.message:
            raise ValueError("violation message must be non-empty")

    def __str__(self) -> str:
        where = f" at {self.location}" if self.location else ""
        return f"[{self.severity.value}]{where} {self.message}"


@dataclass(frozen=True)
class VerificationReport:
    passed: bool
    issues: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "issues", tuple(self.issues))
        if self.passed and self.issues:
            # a pass that still lists issues is not a pass
            object.__setattr__(self, "passed", False)


# --------------------------------------------------------------------------
# YAML plumbing
# --------------------------------------------------------------------------


class _StringLoader(yaml.SafeLoader):
    """Safe loader that resolves every plain scalar to ``str``."""


_StringLoader.yaml_implicit_resolvers = {}


class _Dumper(yaml.SafeDumper):
    pass


def _str_presenter(dumper: yaml.SafeDumper, data: str) -> yaml.Node:
    # multi-line text goes out double-quoted so no raw content line can look like "..."
    style = '"' if "\n" in data or "\r" in data else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", data, style=style)


_Dumper.add_representer(str, _str_presenter)

_FENCE_OPEN = re.compile(r"^\s*```\s*(yaml|yml)\s*$", re.IGNORECASE)
_FENCE_CLOSE = re.compile(r"^\s*```\s*$")
_ELLIPSIS_LINE = re.compile(r"^\s*(-\s*)?\.\.\.\s*$")


def extract_yaml_blocks(text: str) -> list[str]:
    blocks = []
    current: list[str] | None = None
    for line in text.splitlines():
        if current is None:
            if _FENCE_OPEN.match(line):
                current = []
        elif _FENCE_CLOSE.match(line):
            blocks.append("\n".join(current))
            current = None
        else:
            current.append(line)
    return blocks


def fence(body: str) -> str:
    return f"```yaml\n{body.rstrip()}\n```"


def _load_yaml(body: str) -> Any:
    # models (and the prompt's own template) elide content with "..." lines
    cleaned = "\n".join(line for line in body.splitlines() if not _ELLIPSIS_LINE.match(line))
    return yaml.load(cleaned, Loader=_StringLoader)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

REQUIRED_FIELDS = ("sheet_name", "table_range", "data_range")


def _scalar(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (dict, list)):
        raise TypeError("expected a scalar")
    return str(v)


def _range_field(doc: dict, key: str, idx: int) -> RangeRef:
    try:
        return parse_range(_scalar(doc[key]))
    except (MalformedRef, TypeError) as exc:
        raise SchemaError(idx, key, f"unparsable range {doc[key]!r}: {exc}") from None


def _node_items(raw: Any, idx: int, where: str) -> list[tuple[str, Any]]:
    """Normalize a header map (or list of one-key maps) into ordered (name, body) pairs."""
    if raw in (None, "", "..."):
        return []
    if isinstance(raw, dict):
        return [(k, v) for k, v in raw.items() if v not in (None, "", "...")]
    if isinstance(raw, list):
        items = []
        for entry in raw:
            if isinstance(entry, dict) and len(entry) == 1 and isinstance(next(iter(entry.values())), dict):
                items.extend(entry.items())
            elif isinstance(entry, dict):
                items.append(("", entry))
            elif entry in (None, "", "..."):
                continue
            else:
                raise SchemaError(idx, where, f"unexpected header entry {entry!r}")
        return items
    raise SchemaError(idx, where, f"expected a mapping of nodes, got {type(raw).__name__}")


def _parse_node(name: str, body: Any, idx: int, where: str) -> HeaderNode:
    path = f"{where}.{name}" if name else where
    if not isinstance(body, dict):
        raise SchemaError(idx, path, "node must be a mapping")
    for key in ("start_index", "end_index"):
        if key not in body:
            raise SchemaError(idx, f"{path}.{key}", "missing")
    try:
        a = parse_a1(_scalar(body["start_index"]))
        b = parse_a1(_scalar(body["end_index"]))
    except (MalformedRef, TypeError) as exc:
        raise SchemaError(idx, path, f"bad cell index: {exc}") from None
    span = RangeRef.from_bounds(a.col, a.row, b.col, b.row)
    children = tuple(
        _parse_node(cname, cbody, idx, path)
        for cname, cbody in _node_items(body.get("children"), idx, f"{path}.children")
    )
    try:
        value = _scalar(body.get("value"))
    except TypeError:
        raise SchemaError(idx, f"{path}.value", "expected text") from None
    return HeaderNode(span.start, span.end, value, children, name)


def _parse_props(raw: Any, idx: int) -> tuple[tuple[str, DataProperty], ...]:
    if raw in (None, "", "..."):
        return ()
    if not isinstance(raw, dict):
        raise SchemaError(idx, "data_properties", "expected a mapping")
    out = []
    for key, body in raw.items():
        if body in (None, "", "..."):
            body = {}
        if not isinstance(body, dict):
            raise SchemaError(idx, f"data_properties.{key}", "expected a mapping")
        raw_type = _scalar(body.get("type", "mixed")).strip().lower() or "mixed"
        kind = _TYPE_SYNONYMS.get(raw_type, raw_type)
        if kind not in DATA_TYPES:
            kind = "mixed"
        out.append(
            (str(key), DataProperty(kind, _scalar(body.get("unit", "")), _scalar(body.get("format", ""))))
        )
    return tuple(out)


def parse_sketch_block(body: str, idx: int = 0) -> TableSketch:
    try:
        doc = _load_yaml(body)
    except yaml.YAMLError as exc:
        raise SchemaError(idx, "<document>", f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError(idx, "<document>", "expected a mapping at the top level")
    for key in REQUIRED_FIELDS:
        if doc.get(key) in (None, ""):
            raise SchemaError(idx, key, "required field is missing")
    notes = doc.get("notes") or []
    if isinstance(notes, str):
        notes = [notes]
    if not isinstance(notes, list):
        raise SchemaError(idx, "notes", "expected a list")
    try:
        sheet_name = _scalar(doc["sheet_name"])
        table_name = _scalar(doc.get("table_name"))
        header_format = fold_header_format(_scalar(doc.get("header_format")) or None)
        notes_t = tuple(_scalar(n) for n in notes if n is not None)
    except TypeError as exc:
        raise SchemaError(idx, "<document>", str(exc)) from None
    return TableSketch(
        sheet_name=sheet_name,
        table_name=table_name,
        table_range=_range_field(doc, "table_range", idx),
        data_range=_range_field(doc, "data_range", idx),
        notes=notes_t,
        header_format=header_format,
        row_header=tuple(
            _parse_node(n, b, idx, "row_header")
            for n, b in _node_items(doc.get("row_header"), idx, "row_header")
        ),
        column_header=tuple(
            _parse_node(n, b, idx, "column_header")
            for n, b in _node_items(doc.get("column_header"), idx, "column_header")
        ),
        data_properties=_parse_props(doc.get("data_properties"), idx),
    )


def parse_sketches(text: str) -> tuple[list[TableSketch], list[SchemaError]]:
    """Parse every yaml block in ``text``; bad blocks are reported, good ones kept."""
    sketches: list[TableSketch] = []
    errors: list[SchemaError] = []
    for idx, body in enumerate(extract_yaml_blocks(text)):
        try:
            sketches.append(parse_sketch_block(body, idx))
        except SchemaError as exc:
            errors.append(exc)
    return sketches, errors


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _node_doc(node: HeaderNode) -> dict:
    return {
        "start_index": str(node.start_index),
        "end_index": str(node.end_index),
        "value": node.value,
        "children": [{_child_name(node, i, c): _node_doc(c)} for i, c in enumerate(node.children, 1)],
    }


def _child_name(parent: HeaderNode, i: int, child: HeaderNode) -> str:
    return child.name or f"{parent.name or 'node'}.{i}"


def _header_doc(nodes: tuple[HeaderNode, ...]) -> dict:
    return {(n.name or f"node_{i}"): _node_doc(n) for i, n in enumerate(nodes, 1)}


def sketch_to_doc(s: TableSketch) -> dict:
    doc: dict[str, Any] = {
        "sheet_name": s.sheet_name,
        "table_name": s.table_name,
        "table_range": str(s.table_range),
        "data_range": str(s.data_range),
        "notes": list(s.notes),
    }
    if s.header_format is not None:
        doc["header_format"] = s.header_format.value
    doc["row_header"] = _header_doc(s.row_header)
    doc["column_header"] = _header_doc(s.column_header)
    doc["data_properties"] = {
        key: {"type": p.type, "unit": p.unit, "format": p.format} for key, p in s.data_properties
    }
    return doc


def serialize_sketch(s: TableSketch) -> str:
    return yaml.dump(
        sketch_to_doc(s), Dumper=_Dumper, sort_keys=False, default_flow_style=False, allow_unicode=True, width=2**31
    )


def serialize_sketches(sketches: Iterable[TableSketch]) -> str:
    return "\n\n".join(fence(serialize_sketch(s)) for s in sketches) + "\n"


# --------------------------------------------------------------------------
# validation against the workbook
# --------------------------------------------------------------------------


def _norm(text: str) -> str:
    return " ".join(text.split())


def _last_populated_row(sheet: Sheet, rng: RangeRef) -> int | None:
    rows = [ref.row for ref, c in sheet.cells.items() if rng.contains(ref) and not c.value.is_empty]
    return max(rows) if rows else None


def _check_children(node: HeaderNode, axis: str, out: list[Violation]) -> None:
    for child in node.children:
        if axis == "column":
            inside = node.start_index.col <= child.start_index.col and child.end_index.col <= node.end_index.col
            toward_data = child.start_index.row > node.end_index.row
        else:
            inside = node.start_index.row <= child.start_index.row and child.end_index.row <= node.end_index.row
            toward_data = child.start_index.col > node.end_index.col
        if not (inside and toward_data):
            out.append(
                Violation(
                    Severity.WARNING,
                    f"child header {child.value!r} ({child.span}) is not nested under parent "
                    f"{node.value!r} ({node.span})",
                    child.span,
                )
            )
        _check_children(child, axis, out)


def _check_siblings(nodes: tuple[HeaderNode, ...], out: list[Violation]) -> None:
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            if a.span.intersects(b.span):
                out.append(
                    Violation(
                        Severity.ERROR,
                        f"sibling headers {a.value!r} ({a.span}) and {b.value!r} ({b.span}) overlap",
                        a.span,
                    )
                )
    for n in nodes:
        _check_siblings(n.children, out)


def validate_sketch(s: TableSketch, wb: Workbook) -> list[Violation]:
    out: list[Violation] = []
    try:
        sheet = wb.sheet(s.sheet_name)
    except UnknownSheet:
        return [Violation(Severity.ERROR, f"unknown sheet {s.sheet_name!r}; sheets are {wb.sheet_names}")]

    used = used_range(sheet)
    if used is None:
        out.append(Violation(Severity.ERROR, f"sheet {s.sheet_name!r} is empty", s.table_range))
    elif not used.contains_range(s.table_range):
        detail = f"table_range {s.table_range} lies outside the used range {used}"
        if s.table_range.end.row > used.end.row:
            detail += f"; the actual data ends at row {used.end.row}"
        out.append(Violation(Severity.ERROR, detail, s.table_range))
    else:
        last = _last_populated_row(sheet, s.table_range)
        if last is not None and last < s.table_range.end.row:
            out.append(
                Violation(
                    Severity.WARNING,
                    f"table_range {s.table_range} ends at row {s.table_range.end.row}, but the "
                    f"actual data ends at row {last}, leaving blank rows at the end",
                    s.table_range,
                )
            )

    if not s.table_range.contains_range(s.data_range):
        out.append(
            Violation(Severity.ERROR, f"data_range {s.data_range} is not inside table_range {s.table_range}", s.data_range)
        )

    for node in s.all_nodes():
        if not s.table_range.contains_range(node.span):
            out.append(
                Violation(
                    Severity.ERROR,
                    f"header {node.value!r} spans {node.span}, outside table_range {s.table_range}",
                    node.span,
                )
            )
        anchor = node.start_index
        region = merged_region_at(sheet, anchor)
        if region is not None:
            anchor = region.start
        actual = get_cell(sheet, anchor)[0].as_text()
        if _norm(actual) != _norm(node.value):
            out.append(
                Violation(
                    Severity.ERROR,
                    f"header value mismatch at {node.start_index}: sketch says {node.value!r}, "
                    f"cell holds {actual!r}",
                    RangeRef(node.start_index, node.start_index),
                )
            )

    _check_siblings(s.row_header, out)
    _check_siblings(s.column_header, out)
    for root in s.column_header:
        _check_children(root, "column", out)
    for root in s.row_header:
        _check_children(root, "row", out)

    leaves = {_norm(n.value) for n in s.all_nodes() if not n.children}
    for key, _ in s.data_properties:
        if _norm(key) not in leaves:
            out.append(Violation(Severity.WARNING, f"data_properties key {key!r} matches no leaf header"))
    return out


# --------------------------------------------------------------------------
# verification output
# --------------------------------------------------------------------------

UNPARSEABLE = "unparseable verification output"

_VERDICT = re.compile(r"^\s*verification\s*:\s*(\S+?)\s*,?\s*$", re.IGNORECASE | re.MULTILINE)
_ISSUE_LINE = re.compile(r"^\s*-\s+(.*?)\s*,?\s*$")


def _verdict(raw: str) -> bool | None:
    token = raw.strip().strip(",").strip("'\"").lower()
    if token == "true":
        return True
    if token == "false":
        return False
    return None


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        return s[1:-1]
    return s


def _from_yaml(body: str) -> VerificationReport | None:
    cleaned = "\n".join(line.rstrip().rstrip(",") for line in body.splitlines())
    try:
        doc = _load_yaml(cleaned)
    except yaml.YAMLError:
        return None
    if not isinstance(doc, dict) or "verification" not in doc:
        return None
    verdict = _verdict(str(doc["verification"]))
    if verdict is None:
        return None
    raw_issues = doc.get("issues")
    if raw_issues in (None, "", "[]"):
        issues: list[str] = []
    elif isinstance(raw_issues, list):
        issues = [str(i).strip() for i in raw_issues if isinstance(i, (str, int, float)) and str(i).strip()]
    elif isinstance(raw_issues, str):
        issues = [raw_issues.strip()]
    else:
        return None
    return VerificationReport(verdict, tuple(issues))


def _from_lines(body: str) -> VerificationReport | None:
    verdicts = list(_VERDICT.finditer(body))
    if not verdicts:
        return None
    m = verdicts[-1]
    verdict = _verdict(m.group(1))
    if verdict is None:
        return None
    issues = []
    for line in body[m.end() :].splitlines():
        im = _ISSUE_LINE.match(line)
        if im and im.group(1) not in ("", "[]"):
            issues.append(_unquote(im.group(1)))
    return VerificationReport(verdict, tuple(issues))


def parse_verification(text: str) -> VerificationReport:
    """Read a verifier's verdict; never raises, and anything unreadable counts as a failure."""
    try:
        text = str(text)
        blocks = [b for b in extract_yaml_blocks(text) if "verification" in b]
        candidates = []
        if blocks:
            candidates.append(blocks[-1])
        m = list(_VERDICT.finditer(text))
        if m:
            candidates.append(text[m[-1].start() :])
        for body in candidates:
            report = _from_yaml(body) or _from_lines(body)
            if report is not None:
                return report
    except Exception:  # noqa: BLE001 - totality is the contract
        pass
    return VerificationReport(False, (UNPARSEABLE,))
