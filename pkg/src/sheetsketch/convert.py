"""Render a sheet range as a LaTeX ``tabular`` or as a PNG grid image."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass

from PIL import Image, ImageDraw, ImageFont

from .refs import MAX_COL, MAX_ROW, CellRef, RangeRef, column_label
from .workbook import DEFAULT_STYLE, CellStyle, CellValue, Sheet, ValueKind, format_number, get_cell

MAX_IMAGE_WIDTH = 8192
MAX_IMAGE_HEIGHT = 16384
RULER_WIDTH_PX = 40

GRID_COLOR = (192, 192, 192, 255)
RULER_FILL = (232, 232, 232, 255)
BORDER_COLOR = (0, 0, 0, 255)
WHITE = (255, 255, 255, 255)
BLACK = (0, 0, 0, 255)


class ConvertError(Exception):
    pass


class RangeOutOfBounds(ConvertError):
    pass


class RangeTooLarge(ConvertError):
    pass


@dataclass(frozen=True)
class RenderOptions:
    cell_width_px: int = 96
    cell_height_px: int = 24
    show_gridlines: bool = True
    show_headers_ruler: bool = True

    def __post_init__(self) -> None:
        if self.cell_width_px < 4 or self.cell_height_px < 4:
            raise ValueError("cell boxes must be at least 4 px on each side")


@dataclass(frozen=True)
class RenderedImage:
    width_px: int
    height_px: int
    encoded_bytes: bytes
    pixel_format: str = "RGBA-8"
    media_type: str = "image/png"


# --------------------------------------------------------------------------
# shared layout helpers
# --------------------------------------------------------------------------

_PLAIN_DECIMAL = re.compile(r"^(#,##)?0(\.(0+))?$")


def display_text(value: CellValue, style: CellStyle = DEFAULT_STYLE) -> str:
    """Cell text as shown in renderings; plain decimal formats are honoured."""
    if value.kind is ValueKind.NUMBER:
        m = _PLAIN_DECIMAL.match(style.number_format)
        if m:
            places = len(m.group(3) or "")
            sep = "," if m.group(1) else ""
            return f"{float(value.value):{sep}.{places}f}"
        return format_number(float(value.value))
    return value.as_text().replace("\r\n", " ").replace("\n", " ").replace("\r", " ")


def _check_bounds(rng: RangeRef) -> None:
    if rng.end.col > MAX_COL or rng.end.row > MAX_ROW:
        raise RangeOutOfBounds(f"range {rng} exceeds the sheet grid")


def _regions_in(sheet: Sheet, rng: RangeRef) -> list[tuple[RangeRef, CellRef]]:
    """Merged regions clipped to the range, each paired with its original anchor cell."""
    out = []
    for region in sheet.merged:
        if not region.intersects(rng):
            continue
        clipped = RangeRef.from_bounds(
            max(region.start.col, rng.start.col),
            max(region.start.row, rng.start.row),
            min(region.end.col, rng.end.col),
            min(region.end.row, rng.end.row),
        )
        if clipped.area > 1:
            out.append((clipped, region.start))
    return out


def _slot_owner(rng: RangeRef, regions: list[tuple[RangeRef, CellRef]]) -> dict[tuple[int, int], int]:
    owner = {}
    for idx, (region, _) in enumerate(regions):
        for ref in region.cells():
            owner[(ref.row, ref.col)] = idx
    return owner


# --------------------------------------------------------------------------
# LaTeX
# --------------------------------------------------------------------------

LATEX_ESCAPES = {
    "\\": r"\textbackslash{}",
    "&": r"\&",
    "%": r"\%",
    "$": r"\$",
    "#": r"\#",
    "_": r"\_",
    "{": r"\{",
    "}": r"\}",
    "~": r"\textasciitilde{}",
    "^": r"\textasciicircum{}",
}


def latex_escape(text: str) -> str:
    return "".join(LATEX_ESCAPES.get(ch, ch) for ch in text)


def _latex_cell(value: CellValue, style: CellStyle) -> str:
    text = latex_escape(display_text(value, style))
    if style.bold and text:
        text = rf"\textbf{{{text}}}"
    return text


def _multicolumn(width: int, first: bool, body: str) -> str:
    spec = "|c|" if first else "c|"
    return rf"\multicolumn{{{width}}}{{{spec}}}{{{body}}}"


def _rule_after(row: int, rng: RangeRef, owner: dict[tuple[int, int], int]) -> str:
    if row == rng.end.row:
        return r"\hline"
    blocked = [
        col
        for col in range(rng.start.col, rng.end.col + 1)
        if (row, col) in owner and owner.get((row + 1, col)) == owner[(row, col)]
    ]
    if not blocked:
        return r"\hline"
    segments = []
    run_start = None
    for col in range(rng.start.col, rng.end.col + 2):
        open_col = col <= rng.end.col and col not in blocked
        if open_col and run_start is None:
            run_start = col
        elif not open_col and run_start is not None:
            segments.append((run_start - rng.start.col + 1, col - rng.start.col))
            run_start = None
    return " ".join(rf"\cline{{{a}-{b}}}" for a, b in segments)


def range_to_latex(sheet: Sheet, rng: RangeRef) -> str:
    _check_bounds(rng)
    regions = _regions_in(sheet, rng)
    owner = _slot_owner(rng, regions)

    lines = [rf"\begin{{tabular}}{{|{'l|' * rng.width}}}", r"\hline"]
    for row in range(rng.start.row, rng.end.row + 1):
        cells = []
        col = rng.start.col
        while col <= rng.end.col:
            first = col == rng.start.col
            idx = owner.get((row, col))
            if idx is None:
                value, style = get_cell(sheet, CellRef(col, row))
                cells.append(_latex_cell(value, style))
                col += 1
                continue
            region, anchor = regions[idx]
            if row == region.start.row:
                value, style = get_cell(sheet, anchor)
                body = _latex_cell(value, style)
                if region.height > 1:
                    body = rf"\multirow{{{region.height}}}{{*}}{{{body}}}"
            else:
                body = ""
            cells.append(_multicolumn(region.width, first, body) if region.width > 1 else body)
            col = region.end.col + 1
        lines.append(" & ".join(cells) + r" \\")
        lines.append(_rule_after(row, rng, owner))
    lines.append(r"\end{tabular}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# image
# --------------------------------------------------------------------------

_FONT = ImageFont.load_default_imagefont()
_CHAR_W = _FONT.getbbox("M")[2]
_CHAR_H = _FONT.getbbox("Mg")[3]


def image_size(rng: RangeRef, opts: RenderOptions) -> tuple[int, int]:
    left = RULER_WIDTH_PX if opts.show_headers_ruler else 0
    top = opts.cell_height_px if opts.show_headers_ruler else 0
    return left + rng.width * opts.cell_width_px, top + rng.height * opts.cell_height_px


def _hex_rgba(color: str | None, default: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    if not color:
        return default
    return int(color[0:2], 16), int(color[2:4], 16), int(color[4:6], 16), 255


def _draw_text(draw: ImageDraw.ImageDraw, box: tuple[int, int, int, int], text: str, color, bold: bool, right: bool) -> None:
    x0, y0, x1, y1 = box
    pad = 3
    room = (x1 - x0 - 2 * pad - (1 if bold else 0)) // _CHAR_W
    if room <= 0 or not text:
        return
    if len(text) > room:
        text = text[: max(room - 1, 0)] + "~" if room > 1 else text[:room]
    width = len(text) * _CHAR_W
    x = x1 - pad - width - (1 if bold else 0) if right else x0 + pad
    y = y0 + max((y1 - y0 - _CHAR_H) // 2, 0)
    draw.text((x, y), text, fill=color, font=_FONT)
    if bold:
        draw.text((x + 1, y), text, fill=color, font=_FONT)


def range_to_image(sheet: Sheet, rng: RangeRef, opts: RenderOptions | None = None) -> RenderedImage:
    opts = opts or RenderOptions()
    _check_bounds(rng)
    width, height = image_size(rng, opts)
    if width > MAX_IMAGE_WIDTH or height > MAX_IMAGE_HEIGHT:
        raise RangeTooLarge(
            f"range {rng} renders to {width}x{height} px; images must fit within "
            f"{MAX_IMAGE_WIDTH}×{MAX_IMAGE_HEIGHT} pixels"
        )
    cw, ch = opts.cell_width_px, opts.cell_height_px
    left = RULER_WIDTH_PX if opts.show_headers_ruler else 0
    top = ch if opts.show_headers_ruler else 0

    img = Image.new("RGBA", (width, height), WHITE)
    draw = ImageDraw.Draw(img)

    if opts.show_headers_ruler:
        draw.rectangle((0, 0, width - 1, top - 1), fill=RULER_FILL)
        draw.rectangle((0, 0, left - 1, height - 1), fill=RULER_FILL)
        for i in range(rng.width):
            x0 = left + i * cw
            label = column_label(rng.start.col + i)
            draw.line((x0, 0, x0, top - 1), fill=GRID_COLOR)
            _draw_centered(draw, (x0, 0, x0 + cw, top), label)
        for j in range(rng.height):
            y0 = top + j * ch
            draw.line((0, y0, left - 1, y0), fill=GRID_COLOR)
            _draw_centered(draw, (0, y0, left, y0 + ch), str(rng.start.row + j))

    regions = _regions_in(sheet, rng)
    owner = _slot_owner(rng, regions)

    def box_of(region: RangeRef) -> tuple[int, int, int, int]:
        x0 = left + (region.start.col - rng.start.col) * cw
        y0 = top + (region.start.row - rng.start.row) * ch
        return x0, y0, x0 + region.width * cw, y0 + region.height * ch

    boxes: list[tuple[RangeRef, CellRef]] = [(region, anchor) for region, anchor in regions]
    for ref in rng.cells():
        if (ref.row, ref.col) not in owner:
            boxes.append((RangeRef(ref, ref), ref))

    for region, anchor in boxes:
        value, style = get_cell(sheet, anchor)
        x0, y0, x1, y1 = box_of(region)
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), fill=_hex_rgba(style.fill_color, WHITE))
        if opts.show_gridlines:
            draw.rectangle((x0, y0, x1, y1), outline=GRID_COLOR)
        for side in style.borders:
            if side == "top":
                draw.line((x0, y0, x1, y0), fill=BORDER_COLOR)
            elif side == "bottom":
                draw.line((x0, y1 - 1, x1, y1 - 1), fill=BORDER_COLOR)
            elif side == "left":
                draw.line((x0, y0, x0, y1), fill=BORDER_COLOR)
            elif side == "right":
                draw.line((x1 - 1, y0, x1 - 1, y1), fill=BORDER_COLOR)
        _draw_text(
            draw,
            (x0, y0, x1, y1),
            display_text(value, style),
            _hex_rgba(style.font_color, BLACK),
            style.bold,
            right=value.kind is ValueKind.NUMBER,
        )

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return RenderedImage(width_px=width, height_px=height, encoded_bytes=buf.getvalue())


def _draw_centered(draw: ImageDraw.ImageDraw, box: tuple[int, int, int, int], text: str) -> None:
    x0, y0, x1, y1 = box
    room = max((x1 - x0 - 2) // _CHAR_W, 0)
    text = text[:room]
    x = x0 + (x1 - x0 - len(text) * _CHAR_W) // 2
    y = y0 + max((y1 - y0 - _CHAR_H) // 2, 0)
    draw.text((x, y), text, fill=BLACK, font=_FONT)
