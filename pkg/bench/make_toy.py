"""Regenerate the two-task toy benchmark shipped under bench/.

Inputs are copied from the test fixtures; expected answers are computed here
with openpyxl so they are independent of the package's own reader. Run from
the repository root: ``python bench/make_toy.py``.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import openpyxl

ROOT = Path(__file__).resolve().parent
FIXTURES = ROOT.parent / "tests" / "fixtures"
TOY = ROOT / "toy"
STRAY = ROOT / "toy_stray"

LEAVE_SHEET = "Leave used by employee"
PASS = "```yaml\nverification: true\nissues: []\n```"

LEAVE_CODE = """import openpyxl
wb = openpyxl.load_workbook('/mnt/data/input/1_leave_input.xlsx')
ws = wb['Leave used by employee']
last = 4
while ws.cell(last + 1, 1).value is not None:
    last += 1
for r in range(5, 9):
    emp = ws.cell(r, 12).value
    for c in range(13, 22):
        kind = ws.cell(4, c).value
        ws.cell(r, c).value = sum(
            ws.cell(i, 8).value for i in range(5, last + 1)
            if ws.cell(i, 1).value == emp and ws.cell(i, 4).value == kind
        )
wb.save('/mnt/data/output/1_leave_output.xlsx')
print('rows scanned:', last - 4)
"""

SALES_CODE = """import openpyxl
wb = openpyxl.load_workbook('/mnt/data/input/2_sales_input.xlsx')
ws = wb['Sheet1']
for col in range(3, 9):
    ws.cell(8, col).value = ws.cell(6, col).value * ws.cell(7, col).value
wb.save('/mnt/data/output/2_sales_output.xlsx')
print('revenue written')
"""

# writes the right answers and also copies them one row below the table
SALES_STRAY_CODE = SALES_CODE.replace(
    "    ws.cell(8, col).value = ws.cell(6, col).value * ws.cell(7, col).value\n",
    "    ws.cell(8, col).value = ws.cell(6, col).value * ws.cell(7, col).value\n"
    "    ws.cell(9, col).value = ws.cell(8, col).value\n",
)

SALES_SKETCH = """```yaml
sheet_name: "Sheet1"
table_range: "B5:H8"
data_range: "C6:H8"
table_name: "Quarterly sales plan"
notes:
  - "Row 8 (Revenue) is empty and is meant to hold Number of Sales times AOV."
  - "The adjustment row 13 lies outside the table."
header_format: "both-row-and-column"
row_header:
  - name: "node_1"
    start_index: "B6"
    end_index: "B6"
    value: "Number of Sales"
    children: []
  - name: "node_2"
    start_index: "B7"
    end_index: "B7"
    value: "AOV"
    children: []
  - name: "node_3"
    start_index: "B8"
    end_index: "B8"
    value: "Revenue"
    children: []
column_header:
  - name: "node_1"
    start_index: "C5"
    end_index: "C5"
    value: "Jan"
    children: []
  - name: "node_2"
    start_index: "D5"
    end_index: "D5"
    value: "Feb"
    children: []
  - name: "node_3"
    start_index: "E5"
    end_index: "E5"
    value: "Mar"
    children: []
  - name: "node_4"
    start_index: "F5"
    end_index: "F5"
    value: "Apr"
    children: []
  - name: "node_5"
    start_index: "G5"
    end_index: "G5"
    value: "May"
    children: []
  - name: "node_6"
    start_index: "H5"
    end_index: "H5"
    value: "Jun"
    children: []
data_properties:
  "Number of Sales":
    type: "integer"
    unit: "count"
  "AOV":
    type: "float"
    unit: "currency"
  "Revenue":
    type: "float"
    unit: "currency"
```"""


def tool_turn(code: str) -> dict:
    return {"message": {"content": "", "tool_calls": [{"name": "execute_python", "arguments": {"code": code}}]}}


def text_turn(text: str) -> dict:
    return {"message": {"content": text}}


def transcript(sketch: str, code: str) -> list[dict]:
    # extraction, vision verification, latex verification, solver code, solver wrap-up
    return [text_turn(sketch), text_turn(PASS), text_turn(PASS), tool_turn(code), text_turn("Done.")]


def leave_answers(path: Path) -> list[dict]:
    ws = openpyxl.load_workbook(path)[LEAVE_SHEET]
    rows = [r for r in range(5, ws.max_row + 1) if ws.cell(r, 1).value is not None]
    answers = []
    for r in range(5, 9):
        employee = ws.cell(r, 12).value
        for c in range(13, 22):
            kind = ws.cell(4, c).value
            total = sum(ws.cell(i, 8).value for i in rows if ws.cell(i, 1).value == employee and ws.cell(i, 4).value == kind)
            answers.append({"sheet": LEAVE_SHEET, "cell": ws.cell(r, c).coordinate, "value": total})
    return answers


def sales_answers(path: Path) -> list[dict]:
    ws = openpyxl.load_workbook(path)["Sheet1"]
    return [
        {"sheet": "Sheet1", "cell": ws.cell(8, c).coordinate, "value": ws.cell(6, c).value * ws.cell(7, c).value}
        for c in range(3, 9)
    ]


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def main() -> None:
    inputs = TOY / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    leave = inputs / "1_leave_input.xlsx"
    sales = inputs / "2_sales_input.xlsx"
    shutil.copyfile(FIXTURES / "leave.xlsx", leave)
    shutil.copyfile(FIXTURES / "sales.xlsx", sales)
    leave_sketch = (FIXTURES / "yaml_structure_example.md").read_text(encoding="utf-8")

    write_json(TOY / "transcripts" / "1_leave.json", transcript(leave_sketch, LEAVE_CODE))
    write_json(TOY / "transcripts" / "2_sales.json", transcript(SALES_SKETCH, SALES_CODE))
    write_json(STRAY / "transcripts" / "2_sales_stray.json", transcript(SALES_SKETCH, SALES_STRAY_CODE))

    leave_task = {
        "id": "1_leave",
        "instruction": "Fill the summary table in L4:U8 with the total hours of each leave type taken by each employee.",
        "input": "inputs/1_leave_input.xlsx",
        "category": "sheet-level",
        "answers": leave_answers(leave),
        "transcript": "transcripts/1_leave.json",
    }
    sales_task = {
        "id": "2_sales",
        "instruction": "Fill the Revenue row with Number of Sales multiplied by AOV for every month.",
        "input": "inputs/2_sales_input.xlsx",
        "category": "cell-level",
        "answers": sales_answers(sales),
        "transcript": "transcripts/2_sales.json",
    }
    write_json(TOY / "manifest.json", {"tasks": [leave_task, sales_task]})

    stray_leave = dict(leave_task, input="../toy/inputs/1_leave_input.xlsx", transcript="../toy/transcripts/1_leave.json")
    stray_sales = dict(sales_task, input="../toy/inputs/2_sales_input.xlsx", transcript="transcripts/2_sales_stray.json")
    write_json(STRAY / "manifest.json", {"tasks": [stray_leave, stray_sales]})


if __name__ == "__main__":
    main()
