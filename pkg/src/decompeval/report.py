"""Aggregation of pipeline outputs into the three aspect tables.

One report value holds the recompilation grid, the side-effect consistency
grid, the rating tables, the error-category distribution, and the
rater-agreement summary.  Rendering is a pure function of that value:
identical reports serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParseError, RunIdMismatch
from .judge import Criterion, EloState

# Marker for a (decompiler, level) group with nothing to measure.  Kept
# distinct from 0.0, which is a real measured rate.
ABSENT = None


def mean_rate(values) -> float:
    """Arithmetic mean over the level columns (equal weighting)."""
    values = list(values)
    if not values:
        raise ParseError("mean_rate over an empty sequence")
    return sum(values) / len(values)


@dataclass
class AspectReport:
    run_id: str
    corpus_hash: str
    toolchain: str
    seed: int
    levels: list  # level tags, column order
    rsr_table: dict  # decompiler -> {level: rate | ABSENT}
    cer_table: dict  # same shape
    unsupported_table: dict = field(default_factory=dict)  # decompiler -> {level: count}
    elo_table: dict = field(default_factory=dict)  # decompiler -> {"overall": r, criterion: r}
    error_table: dict = field(default_factory=dict)  # decompiler -> {category: count}
    agreement_table: dict = field(default_factory=dict)  # criterion -> {kappa, complete_agreement}

    def average(self, table: dict, decompiler: str):
        cells = [table[decompiler].get(level) for level in self.levels]
        present = [c for c in cells if c is not ABSENT]
        if not present:
            return ABSENT
        return mean_rate(present)


def aggregate(run_id: str, corpus_hash: str, toolchain: str, seed: int,
              levels: list, rsr_table: dict, cer_table: dict,
              unsupported_table: dict = None, elo_state: EloState = None,
              error_table: dict = None, agreement_records: list = (),
              input_run_ids: dict = None) -> AspectReport:
    """Assemble and validate the report.

    ``input_run_ids`` maps source-artifact names to the run id recorded in
    them; any disagreement with ``run_id`` is a hard error since mixing
    artifacts from different runs silently corrupts every rate.
    """
    for source, rid in (input_run_ids or {}).items():
        if rid != run_id:
            raise RunIdMismatch(
                f"{source} carries run id {rid!r}, expected {run_id!r}")
    levels = list(levels)
    for decompiler, row in cer_table.items():
        rsr_row = rsr_table.get(decompiler, {})
        for level, cer in row.items():
            rsr = rsr_row.get(level)
            if cer is ABSENT or rsr is ABSENT:
                continue
            if cer > rsr + 1e-12:
                raise ParseError(
                    f"consistency rate exceeds recompilation rate for "
                    f"{decompiler}/{level}: {cer} > {rsr}")

    elo_table = {}
    if elo_state is not None:
        for decompiler in sorted(elo_state.ratings):
            row = {"overall": elo_state.ratings[decompiler]}
            for criterion in Criterion:
                row[criterion.label] = \
                    elo_state.criterion_ratings[criterion.label][decompiler]
            elo_table[decompiler] = row

    agreement_table = {}
    for record in agreement_records:
        agreement_table[record.criterion] = {
            "kappa": record.kappa,
            "complete_agreement": record.complete_agreement,
        }

    return AspectReport(
        run_id=run_id,
        corpus_hash=corpus_hash,
        toolchain=toolchain,
        seed=seed,
        levels=levels,
        rsr_table={d: dict(row) for d, row in sorted(rsr_table.items())},
        cer_table={d: dict(row) for d, row in sorted(cer_table.items())},
        unsupported_table={d: dict(row)
                           for d, row in sorted((unsupported_table or {}).items())},
        elo_table=elo_table,
        error_table={d: dict(row)
                     for d, row in sorted((error_table or {}).items())},
        agreement_table=agreement_table,
    )


# --- rendering ---

def _fmt(value) -> str:
    return "-" if value is ABSENT else f"{value:.3f}"


def _grid_rows(report: AspectReport, table: dict):
    for decompiler in sorted(table):
        cells = [table[decompiler].get(level) for level in report.levels]
        yield decompiler, cells, report.average(table, decompiler)


def render(report: AspectReport, format: str) -> str:
    if format == "json":
        return _render_json(report)
    if format == "csv":
        return _render_csv(report)
    if format == "markdown":
        return _render_markdown(report)
    raise ParseError(f"unknown report format {format!r}")


def _rounded(value):
    return ABSENT if value is ABSENT else round(value, 3)


def _render_json(report: AspectReport) -> str:
    def grid(table):
        out = {}
        for decompiler, cells, avg in _grid_rows(report, table):
            row = {level: _rounded(cell)
                   for level, cell in zip(report.levels, cells)}
            row["Avg"] = _rounded(avg)
            out[decompiler] = row
        return out

    body = {
        "run_id": report.run_id,
        "corpus_hash": report.corpus_hash,
        "toolchain": report.toolchain,
        "seed": report.seed,
        "levels": report.levels,
        "rsr": grid(report.rsr_table),
        "cer": grid(report.cer_table),
        "substitution_unsupported": report.unsupported_table,
        "elo": {d: {k: _rounded(v) for k, v in row.items()}
                for d, row in report.elo_table.items()},
        "errors": report.error_table,
        "agreement": {c: {k: _rounded(v) for k, v in row.items()}
                      for c, row in report.agreement_table.items()},
    }
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def _render_csv(report: AspectReport) -> str:
    header = "decompiler," + ",".join(report.levels) + ",Avg"
    lines = ["# rsr", header]
    for decompiler, cells, avg in _grid_rows(report, report.rsr_table):
        lines.append(",".join([decompiler] + [_fmt(c) for c in cells]
                              + [_fmt(avg)]))
    lines.extend(["", "# cer", header])
    for decompiler, cells, avg in _grid_rows(report, report.cer_table):
        lines.append(",".join([decompiler] + [_fmt(c) for c in cells]
                              + [_fmt(avg)]))
    return "\n".join(lines) + "\n"


def _render_markdown(report: AspectReport) -> str:
    lines = [
        "# Decompiler evaluation report",
        "",
        f"- run id: `{report.run_id}`",
        f"- corpus: `{report.corpus_hash}`",
        f"- toolchain: `{report.toolchain}`",
        f"- seed: {report.seed}",
        "",
    ]

    def grid_section(title, table):
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| decompiler | " + " | ".join(report.levels)
                     + " | Avg |")
        lines.append("|---" * (len(report.levels) + 2) + "|")
        for decompiler, cells, avg in _grid_rows(report, table):
            lines.append("| " + " | ".join(
                [decompiler] + [_fmt(c) for c in cells] + [_fmt(avg)])
                + " |")
        lines.append("")

    grid_section("Recompilation success rate", report.rsr_table)
    grid_section("Side-effect consistency rate", report.cer_table)

    if report.unsupported_table:
        lines.append("## Substitution-unsupported counts")
        lines.append("")
        lines.append("| decompiler | " + " | ".join(report.levels) + " |")
        lines.append("|---" * (len(report.levels) + 1) + "|")
        for decompiler in sorted(report.unsupported_table):
            row = report.unsupported_table[decompiler]
            lines.append("| " + " | ".join(
                [decompiler] + [str(row.get(level, 0))
                                for level in report.levels]) + " |")
        lines.append("")

    if report.elo_table:
        criteria = ["overall"] + [c.label for c in Criterion]
        lines.append("## Code quality ratings")
        lines.append("")
        lines.append("| decompiler | " + " | ".join(criteria) + " |")
        lines.append("|---" * (len(criteria) + 1) + "|")
        for decompiler in sorted(report.elo_table):
            row = report.elo_table[decompiler]
            lines.append("| " + " | ".join(
                [decompiler] + [_fmt(row[c]) for c in criteria]) + " |")
        lines.append("")

    if report.error_table:
        categories = sorted({c for row in report.error_table.values()
                             for c in row})
        lines.append("## Recompilation error categories")
        lines.append("")
        lines.append("| decompiler | " + " | ".join(categories) + " |")
        lines.append("|---" * (len(categories) + 1) + "|")
        for decompiler in sorted(report.error_table):
            row = report.error_table[decompiler]
            lines.append("| " + " | ".join(
                [decompiler] + [str(row.get(c, 0)) for c in categories])
                + " |")
        lines.append("")

    if report.agreement_table:
        lines.append("## Judge agreement")
        lines.append("")
        lines.append("| criterion | kappa | complete agreement |")
        lines.append("|---|---|---|")
        for criterion in sorted(report.agreement_table):
            row = report.agreement_table[criterion]
            lines.append(f"| {criterion} | {_fmt(row['kappa'])} "
                         f"| {_fmt(row['complete_agreement'])} |")
        lines.append("")

    return "\n".join(lines)


def radar_export(report: AspectReport) -> dict:
    """Per-criterion rating series for external radar plotting: one
    12-entry series per decompiler plus its overall rating."""
    criteria = [c.label for c in Criterion]
    series = {}
    for decompiler, row in report.elo_table.items():
        series[decompiler] = {
            "overall": _rounded(row["overall"]),
            "criteria": criteria,
            "values": [_rounded(row[c]) for c in criteria],
        }
    return {"criteria": criteria, "series": series}
