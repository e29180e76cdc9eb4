"""Read xlsx workbooks into an immutable grid model and write patched copies.

Only the parts needed for structure work are interpreted (cell values,
shared strings, cell styles, merged regions). Everything else in the
archive is carried through untouched when a patched copy is written.
"""

from __future__ import annotations

import math
import re
import shutil
import zipfile
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path, PurePosixPath
from types import MappingProxyType
from typing import Any, Mapping
from xml.etree import ElementTree as ET

from .refs import CellRef, MalformedRef, RangeRef, parse_a1, parse_range

NS_MAIN = "http://schemas.openxmlformats.org/spreadsheetml/2006/main"
NS_REL = "http://schemas.openxmlformats.org/officeDocument/2006/relationships"
NS_PKG_REL = "http://schemas.openxmlformats.org/package/2006/relationships"

_M = f"{{{NS_MAIN}}}"


class WorkbookError(Exception):
    pass


class NotAZip(WorkbookError):
    pass


class MissingPart(WorkbookError):
    def __init__(self, name: str) -> None:
        super().__init__(f"missing workbook part: {name}")
        self.name = name


class MalformedXml(WorkbookError):
    def __init__(self, part: str, detail: str) -> None:
        super().__init__(f"malformed XML in {part}: {detail}")
        self.part = part
        self.detail = detail


class IoError(WorkbookError):
    pass


class UnknownSheet(WorkbookError, KeyError):
    def __init__(self, name: str) -> None:
        super().__init__(f"no sheet named {name!r}")
        self.name = name

    def __str__(self) -> str:
        return self.args[0]


# --------------------------------------------------------------------------
# values and styles
# --------------------------------------------------------------------------


class ValueKind(str, Enum):
    EMPTY = "empty"
    TEXT = "text"
    NUMBER = "number"
    BOOLEAN = "boolean"
    DATETIME = "datetime"
    ERROR = "error"


@dataclass(frozen=True)
class CellValue:
    kind: ValueKind
    value: str | float | bool | None = None

    def __post_init__(self) -> None:
        if self.kind is ValueKind.DATETIME:
            datetime.fromisoformat(str(self.value))

    @classmethod
    def empty(cls) -> CellValue:
        return _EMPTY

    @classmethod
    def text(cls, s: str) -> CellValue:
        return cls(ValueKind.TEXT, str(s))

    @classmethod
    def number(cls, x: float) -> CellValue:
        return cls(ValueKind.NUMBER, float(x))

    @classmethod
    def boolean(cls, b: bool) -> CellValue:
        return cls(ValueKind.BOOLEAN, bool(b))

    @classmethod
    def datetime(cls, iso: str) -> CellValue:
        return cls(ValueKind.DATETIME, iso)

    @classmethod
    def error(cls, code: str) -> CellValue:
        return cls(ValueKind.ERROR, code)

    @classmethod
    def from_python(cls, obj: Any) -> CellValue:
        """Coerce a plain JSON-ish value (None/bool/number/str) into a CellValue."""
        if obj is None:
            return _EMPTY
        if isinstance(obj, CellValue):
            return obj
        if isinstance(obj, bool):
            return cls.boolean(obj)
        if isinstance(obj, (int, float)):
            return cls.number(obj)
        if isinstance(obj, datetime):
            return cls.datetime(obj.isoformat())
        if isinstance(obj, date):
            return cls.datetime(obj.isoformat())
        return cls.text(str(obj))

    @property
    def is_empty(self) -> bool:
        return self.kind is ValueKind.EMPTY

    def as_text(self) -> str:
        """Plain display text, used for header comparisons and prompts."""
        if self.kind is ValueKind.EMPTY:
            return ""
        if self.kind is ValueKind.BOOLEAN:
            return "TRUE" if self.value else "FALSE"
        if self.kind is ValueKind.NUMBER:
            return format_number(float(self.value))
        return str(self.value)

    def to_json(self) -> Any:
        if self.kind is ValueKind.EMPTY:
            return None
        return self.value


_EMPTY = CellValue(ValueKind.EMPTY)


def format_number(x: float) -> str:
    if math.isfinite(x) and x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


_HEX6 = re.compile(r"^[0-9A-F]{6}$")

BORDER_SIDES = ("top", "bottom", "left", "right")


@dataclass(frozen=True)
class CellStyle:
    fill_color: str | None = None
    font_color: str | None = None
    bold: bool = False
    italic: bool = False
    borders: frozenset[str] = frozenset()
    number_format: str = "General"

    def __post_init__(self) -> None:
        for c in (self.fill_color, self.font_color):
            if c is not None and not _HEX6.match(c):
                raise ValueError(f"bad color {c!r}")
        if not self.borders <= set(BORDER_SIDES):
            raise ValueError(f"bad border sides {set(self.borders)}")


DEFAULT_STYLE = CellStyle()


@dataclass(frozen=True)
class Cell:
    value: CellValue
    style_id: int = 0
    formula: str | None = None


@dataclass(frozen=True)
class Sheet:
    name: str
    cells: Mapping[CellRef, Cell] = field(default_factory=dict)
    styles: tuple[CellStyle, ...] = (DEFAULT_STYLE,)
    merged: tuple[RangeRef, ...] = ()
    part: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.cells, MappingProxyType):
            object.__setattr__(self, "cells", MappingProxyType(dict(self.cells)))
        object.__setattr__(self, "styles", tuple(self.styles) or (DEFAULT_STYLE,))
        object.__setattr__(self, "merged", tuple(self.merged))
        for ref, cell in self.cells.items():
            if not 0 <= cell.style_id < len(self.styles):
                raise WorkbookError(f"{self.name}!{ref}: dangling style id {cell.style_id}")
        for i, a in enumerate(self.merged):
            for b in self.merged[i + 1 :]:
                if a.intersects(b):
                    raise WorkbookError(f"{self.name}: merged regions {a} and {b} overlap")


@dataclass(frozen=True)
class Workbook:
    source_path: Path | None
    sheets: tuple[Sheet, ...]
    date1904: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "sheets", tuple(self.sheets))
        if not self.sheets:
            raise WorkbookError("workbook has no sheets")
        names = [s.name for s in self.sheets]
        if len(set(names)) != len(names):
            raise WorkbookError(f"duplicate sheet names: {names}")

    @property
    def sheet_names(self) -> list[str]:
        return [s.name for s in self.sheets]

    def sheet(self, name: str) -> Sheet:
        for s in self.sheets:
            if s.name == name:
                return s
        raise UnknownSheet(name)


def get_cell(sheet: Sheet, ref: CellRef) -> tuple[CellValue, CellStyle]:
    cell = sheet.cells.get(ref)
    if cell is None:
        return _EMPTY, DEFAULT_STYLE
    return cell.value, sheet.styles[cell.style_id]


def merged_region_at(sheet: Sheet, ref: CellRef) -> RangeRef | None:
    for region in sheet.merged:
        if region.contains(ref):
            return region
    return None


def used_range(sheet: Sheet) -> RangeRef | None:
    """Bounding box of cells holding a value or a non-default style."""
    cols: list[int] = []
    rows: list[int] = []
    for ref, cell in sheet.cells.items():
        if cell.value.is_empty and sheet.styles[cell.style_id] == DEFAULT_STYLE:
            continue
        cols.append(ref.col)
        rows.append(ref.row)
    if not cols:
        return None
    return RangeRef.from_bounds(min(cols), min(rows), max(cols), max(rows))


# --------------------------------------------------------------------------
# date handling
# --------------------------------------------------------------------------

_DATE_BUILTINS = set(range(14, 23)) | {45, 46, 47}

BUILTIN_FORMATS = {
    0: "General",
    1: "0",
    2: "0.00",
    3: "#,##0",
    4: "#,##0.00",
    9: "0%",
    10: "0.00%",
    11: "0.00E+00",
    12: "# ?/?",
    13: "# ??/??",
    14: "mm-dd-yy",
    15: "d-mmm-yy",
    16: "d-mmm",
    17: "mmm-yy",
    18: "h:mm AM/PM",
    19: "h:mm:ss AM/PM",
    20: "h:mm",
    21: "h:mm:ss",
    22: "m/d/yy h:mm",
    37: "#,##0 ;(#,##0)",
    38: "#,##0 ;[Red](#,##0)",
    39: "#,##0.00;(#,##0.00)",
    40: "#,##0.00;[Red](#,##0.00)",
    45: "mm:ss",
    46: "[h]:mm:ss",
    47: "mmss.0",
    48: "##0.0E+0",
    49: "@",
}

_QUOTED = re.compile(r'"[^"]*"|\\.')
_BRACKET = re.compile(r"\[(?!h\]|hh\]|m\]|mm\]|s\]|ss\])[^\]]*\]", re.IGNORECASE)
_DATE_TOKEN = re.compile(r"[ymdhs]", re.IGNORECASE)


def is_date_format(fmt_id: int, fmt: str) -> bool:
    if fmt_id in _DATE_BUILTINS:
        return True
    if fmt_id in BUILTIN_FORMATS:
        return False
    cleaned = _BRACKET.sub("", _QUOTED.sub("", fmt))
    if cleaned.lower() == "general":
        return False
    return bool(_DATE_TOKEN.search(cleaned))


def _epoch(date1904: bool) -> datetime:
    return datetime(1904, 1, 1) if date1904 else datetime(1899, 12, 30)


def serial_to_iso(serial: float, date1904: bool = False) -> str:
    if not date1904 and serial < 60:
        # serials below the phantom 1900-02-29 are offset by one day
        serial += 1
    # xlsx stores fractional days; resolve to whole seconds
    moment = _epoch(date1904) + timedelta(seconds=round(serial * 86400))
    if moment.hour == moment.minute == moment.second == 0:
        return moment.date().isoformat()
    return moment.isoformat()


def canonical_iso(text: str) -> str:
    moment = datetime.fromisoformat(text.rstrip("Z"))
    if moment.hour == moment.minute == moment.second == moment.microsecond == 0:
        return moment.date().isoformat()
    return moment.isoformat()


def iso_to_serial(iso: str, date1904: bool = False) -> float:
    moment = datetime.fromisoformat(iso)
    delta = moment - _epoch(date1904)
    serial = delta.days + delta.seconds / 86400
    if not date1904 and serial < 61:
        serial -= 1
    return serial


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def _read_xml(zf: zipfile.ZipFile, part: str, required: bool = True) -> ET.Element | None:
    try:
        data = zf.read(part)
    except KeyError:
        if required:
            raise MissingPart(part) from None
        return None
    try:
        return ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(part, str(exc)) from None


def _rels(zf: zipfile.ZipFile, part: str) -> dict[str, str]:
    """Relationship id -> absolute part name for the given source part."""
    p = PurePosixPath(part)
    rels_part = str(p.parent / "_rels" / f"{p.name}.rels")
    root = _read_xml(zf, rels_part, required=False)
    if root is None:
        return {}
    out = {}
    for rel in root:
        target = rel.get("Target", "")
        if rel.get("TargetMode") == "External":
            continue
        if target.startswith("/"):
            resolved = target.lstrip("/")
        else:
            resolved = _normalize(str(p.parent / target))
        out[rel.get("Id", "")] = resolved
    return out


def _normalize(path: str) -> str:
    parts: list[str] = []
    for piece in path.split("/"):
        if piece in ("", "."):
            continue
        if piece == "..":
            if parts:
                parts.pop()
        else:
            parts.append(piece)
    return "/".join(parts)


def _text_of(el: ET.Element) -> str:
    """Concatenated <t> text of a shared-string or inline-string item, skipping phonetic runs."""
    chunks = []
    for child in el:
        if child.tag == f"{_M}t":
            chunks.append(child.text or "")
        elif child.tag == f"{_M}r":
            for t in child.iter(f"{_M}t"):
                chunks.append(t.text or "")
    return "".join(chunks)


# standard 64-entry indexed palette (first 8 repeated, legacy colors follow)
_INDEXED = [
    "000000", "FFFFFF", "FF0000", "00FF00", "0000FF", "FFFF00", "FF00FF", "00FFFF",
    "000000", "FFFFFF", "FF0000", "00FF00", "0000FF", "FFFF00", "FF00FF", "00FFFF",
    "800000", "008000", "000080", "808000", "800080", "008080", "C0C0C0", "808080",
    "9999FF", "993366", "FFFFCC", "CCFFFF", "660066", "FF8080", "0066CC", "CCCCFF",
    "000080", "FF00FF", "FFFF00", "00FFFF", "800080", "800000", "008080", "0000FF",
    "00CCFF", "CCFFFF", "CCFFCC", "FFFF99", "99CCFF", "FF99CC", "CC99FF", "FFCC99",
    "3366FF", "33CCCC", "99CC00", "FFCC00", "FF9900", "FF6600", "666699", "969696",
    "003366", "339966", "003300", "333300", "993300", "993366", "333399", "333333",
]


def _color(el: ET.Element | None) -> str | None:
    if el is None:
        return None
    rgb = el.get("rgb")
    if rgb:
        rgb = rgb.upper()
        return rgb[-6:] if _HEX6.match(rgb[-6:]) else None
    idx = el.get("indexed")
    if idx is not None and idx.isdigit() and int(idx) < len(_INDEXED):
        return _INDEXED[int(idx)]
    return None


@dataclass
class _StyleTable:
    styles: list[CellStyle]
    date_flags: list[bool]


def _parse_styles(root: ET.Element | None) -> _StyleTable:
    if root is None:
        return _StyleTable([DEFAULT_STYLE], [False])

    numfmts = dict(BUILTIN_FORMATS)
    nf = root.find(f"{_M}numFmts")
    if nf is not None:
        for el in nf.findall(f"{_M}numFmt"):
            numfmts[int(el.get("numFmtId", "0"))] = el.get("formatCode", "General")

    fonts = []
    fonts_el = root.find(f"{_M}fonts")
    for font in fonts_el.findall(f"{_M}font") if fonts_el is not None else []:
        b = font.find(f"{_M}b")
        i = font.find(f"{_M}i")
        fonts.append(
            (
                b is not None and b.get("val", "1") not in ("0", "false"),
                i is not None and i.get("val", "1") not in ("0", "false"),
                _color(font.find(f"{_M}color")),
            )
        )

    fills = []
    fills_el = root.find(f"{_M}fills")
    for fill in fills_el.findall(f"{_M}fill") if fills_el is not None else []:
        pattern = fill.find(f"{_M}patternFill")
        color = None
        if pattern is not None and pattern.get("patternType", "none") not in ("none", "gray125"):
            color = _color(pattern.find(f"{_M}fgColor")) or _color(pattern.find(f"{_M}bgColor"))
        fills.append(color)

    borders = []
    borders_el = root.find(f"{_M}borders")
    for border in borders_el.findall(f"{_M}border") if borders_el is not None else []:
        sides = set()
        for side in BORDER_SIDES:
            el = border.find(f"{_M}{side}")
            if el is not None and el.get("style") not in (None, "none"):
                sides.add(side)
        borders.append(frozenset(sides))

    styles: list[CellStyle] = []
    date_flags: list[bool] = []
    xfs = root.find(f"{_M}cellXfs")
    for xf in xfs.findall(f"{_M}xf") if xfs is not None else []:
        fmt_id = int(xf.get("numFmtId", "0"))
        font_id = int(xf.get("fontId", "0"))
        fill_id = int(xf.get("fillId", "0"))
        border_id = int(xf.get("borderId", "0"))
        bold, italic, font_color = fonts[font_id] if font_id < len(fonts) else (False, False, None)
        fmt = numfmts.get(fmt_id, "General")
        styles.append(
            CellStyle(
                fill_color=fills[fill_id] if fill_id < len(fills) else None,
                # black text is the rendering default; treat it as unset
                font_color=None if font_color == "000000" else font_color,
                bold=bold,
                italic=italic,
                borders=borders[border_id] if border_id < len(borders) else frozenset(),
                number_format=fmt,
            )
        )
        date_flags.append(is_date_format(fmt_id, fmt))
    if not styles:
        styles, date_flags = [DEFAULT_STYLE], [False]
    return _StyleTable(styles, date_flags)


def _parse_sheet(
    zf: zipfile.ZipFile,
    name: str,
    part: str,
    shared: list[str],
    table: _StyleTable,
    date1904: bool,
) -> Sheet:
    root = _read_xml(zf, part)
    cells: dict[CellRef, Cell] = {}
    data = root.find(f"{_M}sheetData")
    for row_el in data.findall(f"{_M}row") if data is not None else []:
        row_no = int(row_el.get("r", "0") or 0)
        next_col = 1
        for c in row_el.findall(f"{_M}c"):
            r = c.get("r")
            try:
                ref = parse_a1(r) if r else CellRef(next_col, row_no)
            except MalformedRef as exc:
                raise MalformedXml(part, str(exc)) from None
            next_col = ref.col + 1
            style_id = int(c.get("s", "0"))
            if style_id >= len(table.styles):
                style_id = 0
            f_el = c.find(f"{_M}f")
            formula = f_el.text if f_el is not None and f_el.text else None
            value = _cell_value(c, shared, table.date_flags[style_id], date1904, part)
            cells[ref] = Cell(value, style_id, formula)

    merged = []
    mc = root.find(f"{_M}mergeCells")
    for el in mc.findall(f"{_M}mergeCell") if mc is not None else []:
        try:
            merged.append(parse_range(el.get("ref", "")))
        except MalformedRef as exc:
            raise MalformedXml(part, str(exc)) from None
    return Sheet(name=name, cells=cells, styles=tuple(table.styles), merged=tuple(merged), part=part)


def _cell_value(
    c: ET.Element, shared: list[str], is_date: bool, date1904: bool, part: str
) -> CellValue:
    t = c.get("t", "n")
    if t == "inlineStr":
        is_el = c.find(f"{_M}is")
        return CellValue.text(_text_of(is_el)) if is_el is not None else _EMPTY
    v_el = c.find(f"{_M}v")
    if v_el is None or v_el.text is None:
        return _EMPTY
    raw = v_el.text
    try:
        if t == "s":
            return CellValue.text(shared[int(raw)])
        if t == "str":
            return CellValue.text(raw)
        if t == "b":
            return CellValue.boolean(raw.strip() in ("1", "true"))
        if t == "e":
            return CellValue.error(raw)
        if t == "d":
            return CellValue.datetime(canonical_iso(raw))
        num = float(raw)
    except (ValueError, IndexError) as exc:
        raise MalformedXml(part, f"bad cell value {raw!r} ({exc})") from None
    if is_date and math.isfinite(num) and num >= 0:
        return CellValue.datetime(serial_to_iso(num, date1904))
    return CellValue.number(num)


def load_workbook(path: str | Path) -> Workbook:
    path = Path(path)
    if path.suffix.lower() in (".xls", ".xlsb", ".ods"):
        raise WorkbookError(f"unsupported spreadsheet format: {path.suffix}")
    if not zipfile.is_zipfile(path):
        raise NotAZip(f"{path} is not a zip container")
    with zipfile.ZipFile(path) as zf:
        wb_root = _read_xml(zf, "xl/workbook.xml")
        rels = _rels(zf, "xl/workbook.xml")

        pr = wb_root.find(f"{_M}workbookPr")
        date1904 = pr is not None and pr.get("date1904", "0") in ("1", "true")

        shared: list[str] = []
        ss_root = _read_xml(zf, "xl/sharedStrings.xml", required=False)
        if ss_root is not None:
            shared = [_text_of(si) for si in ss_root.findall(f"{_M}si")]
        table = _parse_styles(_read_xml(zf, "xl/styles.xml", required=False))

        sheets = []
        sheets_el = wb_root.find(f"{_M}sheets")
        for s in sheets_el.findall(f"{_M}sheet") if sheets_el is not None else []:
            rid = s.get(f"{{{NS_REL}}}id", "")
            part = rels.get(rid)
            if part is None:
                raise MissingPart(f"relationship {rid} for sheet {s.get('name')!r}")
            sheets.append(_parse_sheet(zf, s.get("name", ""), part, shared, table, date1904))
    return Workbook(source_path=path, sheets=tuple(sheets), date1904=date1904)


# --------------------------------------------------------------------------
# patch writing
# --------------------------------------------------------------------------

_NS_DECL = re.compile(rb'xmlns(?::([A-Za-z0-9_.-]+))?="([^"]*)"')


def _collect_namespaces(data: bytes) -> list[tuple[str, str]]:
    head = data[: data.find(b">", data.find(b"<worksheet")) + 1]
    return [((p or b"").decode(), uri.decode()) for p, uri in _NS_DECL.findall(head)]


def _restore_root_namespaces(xml: bytes, decls: list[tuple[str, str]]) -> bytes:
    """Re-add namespace declarations ElementTree dropped (e.g. prefixes only named in mc:Ignorable)."""
    start = xml.find(b"<worksheet")
    end = xml.find(b">", start)
    head = xml[start:end]
    extra = b""
    for prefix, uri in decls:
        attr = f'xmlns:{prefix}="' if prefix else 'xmlns="'
        if attr.encode() not in head:
            extra += f' {attr}{uri}"'.encode()
    if not extra:
        return xml
    close = end - 1 if xml[end - 1 : end] == b"/" else end
    return xml[:close] + extra + xml[close:]


def _col_of(c: ET.Element) -> int:
    return parse_a1(c.get("r", "")).col


def _fill_refs(row_el: ET.Element, row_no: int) -> None:
    # cells may omit r and rely on position; make them explicit before inserting
    next_col = 1
    for c in row_el.findall(f"{_M}c"):
        if c.get("r"):
            next_col = _col_of(c) + 1
        else:
            c.set("r", str(CellRef(next_col, row_no)))
            next_col += 1


def _set_cell(
    row_el: ET.Element, ref: CellRef, value: CellValue, date1904: bool, date_styles: set[int]
) -> bool:
    """Write value into the row; returns True if a formula was dropped."""
    target = None
    insert_at = len(row_el)
    for i, c in enumerate(row_el.findall(f"{_M}c")):
        col = _col_of(c)
        if col == ref.col:
            target = c
            break
        if col > ref.col:
            insert_at = list(row_el).index(c)
            break
    if target is None:
        target = ET.Element(f"{_M}c", {"r": str(ref)})
        row_el.insert(insert_at, target)
    dropped = False
    for child in list(target):
        if child.tag == f"{_M}f":
            dropped = True
        target.remove(child)
    target.attrib.pop("t", None)
    kind = value.kind
    if kind is ValueKind.EMPTY:
        return dropped
    if kind is ValueKind.TEXT:
        target.set("t", "inlineStr")
        is_el = ET.SubElement(target, f"{_M}is")
        t_el = ET.SubElement(is_el, f"{_M}t")
        t_el.text = str(value.value)
        if t_el.text != t_el.text.strip():
            t_el.set("{http://www.w3.org/XML/1998/namespace}space", "preserve")
        return dropped
    v = ET.SubElement(target, f"{_M}v")
    if kind is ValueKind.NUMBER:
        v.text = repr(float(value.value))
    elif kind is ValueKind.BOOLEAN:
        target.set("t", "b")
        v.text = "1" if value.value else "0"
    elif kind is ValueKind.ERROR:
        target.set("t", "e")
        v.text = str(value.value)
    elif kind is ValueKind.DATETIME:
        if int(target.get("s", "0")) in date_styles:
            v.text = repr(iso_to_serial(str(value.value), date1904))
        else:
            # no date format on the cell: store the ISO text so it still reads back as a date
            target.set("t", "d")
            v.text = str(value.value)
    return dropped


def _patch_sheet_xml(
    data: bytes, edits: dict[CellRef, CellValue], date1904: bool, date_styles: set[int]
) -> tuple[bytes, bool]:
    decls = _collect_namespaces(data)
    for prefix, uri in decls:
        ET.register_namespace(prefix, uri)
    root = ET.fromstring(data)
    sheet_data = root.find(f"{_M}sheetData")
    if sheet_data is None:
        sheet_data = ET.SubElement(root, f"{_M}sheetData")
    rows = {int(r.get("r", "0")): r for r in sheet_data.findall(f"{_M}row")}
    dropped_formula = False
    for ref in sorted(edits):
        row_el = rows.get(ref.row)
        if row_el is None:
            row_el = ET.Element(f"{_M}row", {"r": str(ref.row)})
            later = [r for n, r in rows.items() if n > ref.row]
            idx = list(sheet_data).index(min(later, key=lambda r: int(r.get("r")))) if later else len(sheet_data)
            sheet_data.insert(idx, row_el)
            rows[ref.row] = row_el
        # a spans hint that no longer covers the row would mislead readers
        row_el.attrib.pop("spans", None)
        _fill_refs(row_el, ref.row)
        dropped_formula |= _set_cell(row_el, ref, edits[ref], date1904, date_styles)
    out = ET.tostring(root, encoding="UTF-8", xml_declaration=True)
    out = out.replace(b"<?xml version='1.0' encoding='UTF-8'?>", b'<?xml version="1.0" encoding="UTF-8" standalone="yes"?>', 1)
    return _restore_root_namespaces(out, decls), dropped_formula


def _drop_calc_chain(entries: dict[str, bytes]) -> None:
    entries.pop("xl/calcChain.xml", None)
    ct = entries.get("[Content_Types].xml")
    if ct is not None:
        entries["[Content_Types].xml"] = re.sub(rb"<Override[^>]*?/xl/calcChain\.xml\"[^>]*/>", b"", ct)
    rels = entries.get("xl/_rels/workbook.xml.rels")
    if rels is not None:
        entries["xl/_rels/workbook.xml.rels"] = re.sub(rb"<Relationship[^>]*?calcChain\.xml\"[^>]*/>", b"", rels)


def write_patched_workbook(
    source: Workbook,
    edits: Mapping[tuple[str, CellRef], CellValue],
    out_path: str | Path,
) -> None:
    """Copy ``source``'s archive to ``out_path`` with ``edits`` applied.

    Only the worksheet parts that receive edits are re-serialized; every
    other archive entry is copied byte for byte.
    """
    if source.source_path is None:
        raise WorkbookError("workbook has no source archive to patch")
    by_part: dict[str, dict[CellRef, CellValue]] = {}
    for (sheet_name, ref), value in edits.items():
        sheet = source.sheet(sheet_name)
        if isinstance(ref, str):
            ref = parse_a1(ref)
        by_part.setdefault(sheet.part, {})[ref] = CellValue.from_python(value)

    out_path = Path(out_path)
    try:
        if not by_part:
            if out_path.resolve() != Path(source.source_path).resolve():
                shutil.copyfile(source.source_path, out_path)
            return
        with zipfile.ZipFile(source.source_path) as zin:
            infos = zin.infolist()
            entries = {info.filename: zin.read(info.filename) for info in infos}
            table = _parse_styles(_read_xml(zin, "xl/styles.xml", required=False))
        date_styles = {i for i, flag in enumerate(table.date_flags) if flag}
        drop_calc = False
        for part, cell_edits in by_part.items():
            entries[part], dropped = _patch_sheet_xml(entries[part], cell_edits, source.date1904, date_styles)
            drop_calc |= dropped
        if drop_calc:
            _drop_calc_chain(entries)
        tmp = out_path.with_name(out_path.name + ".tmp")
        with zipfile.ZipFile(tmp, "w") as zout:
            for info in infos:
                if info.filename in entries:
                    zout.writestr(info, entries[info.filename], compress_type=info.compress_type)
        tmp.replace(out_path)
    except OSError as exc:
        raise IoError(f"cannot write {out_path}: {exc}") from exc
