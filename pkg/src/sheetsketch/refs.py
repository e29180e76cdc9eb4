"""A1-style cell and range addressing."""

from __future__ import annotations

import re
from functools import lru_cache
from dataclasses import dataclass
from typing import Iterator

MAX_COL = 16384
MAX_ROW = 1048576

_A1_RE = re.compile(r"^\$?([A-Za-z]+)\$?([0-9]+)$")


class MalformedRef(ValueError):
    pass


@dataclass(frozen=True, order=True)
class CellRef:
    # row first so sorting walks the grid in reading order
    row: int
    col: int

    def __init__(self, col: int, row: int) -> None:
        if not (1 <= col <= MAX_COL) or not (1 <= row <= MAX_ROW):
            raise MalformedRef(f"cell ({col}, {row}) outside the grid")
        object.__setattr__(self, "col", col)
        object.__setattr__(self, "row", row)

    def __str__(self) -> str:
        return format_a1(self)

    def __repr__(self) -> str:
        return f"CellRef({format_a1(self)})"


@dataclass(frozen=True)
class RangeRef:
    start: CellRef
    end: CellRef

    def __post_init__(self) -> None:
        if self.start.col > self.end.col or self.start.row > self.end.row:
            raise MalformedRef(f"range corners out of order: {self.start}:{self.end}")

    @classmethod
    def from_bounds(cls, col1: int, row1: int, col2: int, row2: int) -> RangeRef:
        return cls(
            CellRef(min(col1, col2), min(row1, row2)),
            CellRef(max(col1, col2), max(row1, row2)),
        )

    @property
    def width(self) -> int:
        return self.end.col - self.start.col + 1

    @property
    def height(self) -> int:
        return self.end.row - self.start.row + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, ref: CellRef) -> bool:
        return (
            self.start.col <= ref.col <= self.end.col
            and self.start.row <= ref.row <= self.end.row
        )

    def contains_range(self, other: RangeRef) -> bool:
        return self.contains(other.start) and self.contains(other.end)

    def intersects(self, other: RangeRef) -> bool:
        return not (
            other.start.col > self.end.col
            or other.end.col < self.start.col
            or other.start.row > self.end.row
            or other.end.row < self.start.row
        )

    def cells(self) -> Iterator[CellRef]:
        for row in range(self.start.row, self.end.row + 1):
            for col in range(self.start.col, self.end.col + 1):
                yield CellRef(col, row)

    def __str__(self) -> str:
        return f"{format_a1(self.start)}:{format_a1(self.end)}"

    def __repr__(self) -> str:
        return f"RangeRef({self})"


@lru_cache(maxsize=None)
def column_label(col: int) -> str:
    """Bijective base-26 label for a 1-based column ordinal (1 -> A, 27 -> AA)."""
    if col < 1:
        raise MalformedRef(f"column ordinal {col} < 1")
    letters = []
    while col:
        col, rem = divmod(col - 1, 26)
        letters.append(chr(ord("A") + rem))
    return "".join(reversed(letters))


@lru_cache(maxsize=65536)
def column_index(label: str) -> int:
    col = 0
    for ch in label.upper():
        if not "A" <= ch <= "Z":
            raise MalformedRef(f"bad column label {label!r}")
        col = col * 26 + (ord(ch) - ord("A") + 1)
    return col


def parse_a1(text: str) -> CellRef:
    if not isinstance(text, str):
        raise MalformedRef(f"expected a string, got {type(text).__name__}")
    m = _A1_RE.match(text.strip())
    if m is None:
        raise MalformedRef(f"not an A1 reference: {text!r}")
    letters, digits = m.groups()
    if digits[0] == "0":
        raise MalformedRef(f"row must start at 1: {text!r}")
    if len(letters) > 3 or (col := column_index(letters)) > MAX_COL:
        raise MalformedRef(f"column beyond {column_label(MAX_COL)}: {text!r}")
    row = int(digits)
    if row > MAX_ROW:
        raise MalformedRef(f"row beyond {MAX_ROW}: {text!r}")
    return CellRef(col, row)


def format_a1(ref: CellRef) -> str:
    return f"{column_label(ref.col)}{ref.row}"


def parse_range(text: str) -> RangeRef:
    """Parse ``A1:D20`` (or a single ``B7``) into a normalized range."""
    if not isinstance(text, str):
        raise MalformedRef(f"expected a string, got {type(text).__name__}")
    text = text.strip()
    if "!" in text:
        # sheet-qualified references ("Sheet1!A1:B2") keep only the address part
        text = text.rsplit("!", 1)[1]
    parts = text.split(":")
    if len(parts) == 1:
        ref = parse_a1(parts[0])
        return RangeRef(ref, ref)
    if len(parts) != 2:
        raise MalformedRef(f"not a range: {text!r}")
    a, b = parse_a1(parts[0]), parse_a1(parts[1])
    return RangeRef.from_bounds(a.col, a.row, b.col, b.row)
