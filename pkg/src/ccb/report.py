"""Plain-text tables for metric reports and ablation grids."""
from __future__ import annotations

from dataclasses import dataclass

MISSING = "-"


def fmt(x: float | None) -> str:
    return MISSING if x is None else f"{x:.2f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in rows)]) + "\n"


@dataclass(frozen=True)
class ResultRow:
    """One model line: shifted-test columns, optional in-distribution overall and gap."""

    model: str
    overall: float | None
    yesno: float | None = None
    number: float | None = None
    other: float | None = None
    iid_overall: float | None = None
    gap: float | None = None


RESULT_HEADER = ["Model", "Overall", "Yes/No", "Number", "Other", "IID Overall", "Gap"]


def render_results(rows: list[ResultRow]) -> str:
    body = [[r.model, fmt(r.overall), fmt(r.yesno), fmt(r.number), fmt(r.other),
             fmt(r.iid_overall), fmt(r.gap)] for r in rows]
    return _table(RESULT_HEADER, body)


def result_row(model: str, shifted, iid=None) -> ResultRow:
    """Build a row from MetricsReport objects (``iid`` optional)."""
    return ResultRow(
        model, shifted.overall, shifted.yesno, shifted.number, shifted.other,
        None if iid is None else iid.overall,
        None if iid is None else iid.overall - shifted.overall,
    )


@dataclass(frozen=True)
class AblationLine:
    model: str  # "+None", "+LMH", "+CCB"
    r: float | None
    context_label: bool | None
    accuracy: float
    std: float | None = None


ABLATION_HEADER = ["Model", "(1-bias)^r", "context label", "Accuracy"]


def _r_cell(r):
    if r is None:
        return MISSING
    return f"r={r:g}"


def render_ablation(lines: list[AblationLine]) -> str:
    with_std = any(l.std is not None for l in lines)
    header = ABLATION_HEADER + (["Std"] if with_std else [])
    body = []
    for l in lines:
        label = MISSING if l.context_label is None else ("w" if l.context_label else "w/o")
        row = [l.model, _r_cell(l.r), label, fmt(l.accuracy)]
        if with_std:
            row.append(fmt(l.std))
        body.append(row)
    return _table(header, body)
