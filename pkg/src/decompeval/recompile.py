"""Recompile decompiled candidates into shared objects, parse compiler
diagnostics, and classify failures into the fifteen-type error taxonomy."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .adapters import DecompiledCandidate
from .corpus import (
    FunctionRecord,
    OptLevel,
    ToolchainConfig,
    run_compiler,
    shared_object_cflags,
)
from .errors import EmptyGroup


class Severity(Enum):
    WARNING = "warning"
    ERROR = "error"


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    location: tuple[str, int, int] | None = None  # (file, line, column)


class ErrorCategory(Enum):
    """Fifteen error types (I-XV) in four groups, plus the honest fallback."""

    I = ("A", "Assembly Issues")
    II = ("A", "File and Resource Issues")
    III = ("B", "Variable Declaration/Naming")
    IV = ("B", "Memory Issues")
    V = ("B", "Type Conversion/Compatibility")
    VI = ("B", "Initialization Issues")
    VII = ("C", "Function Declaration/Invocation")
    VIII = ("C", "User-Defined Type Issues")
    IX = ("C", "Dependency/Redefinition")
    X = ("C", "Control Flow Issues")
    XI = ("D", "Target Platform/Config")
    XII = ("D", "Type Definition/Resolution")
    XIII = ("D", "Expression/Operator")
    XIV = ("D", "Syntax Errors")
    XV = ("D", "Macro/Preprocessor")
    UNCLASSIFIED = ("-", "Unclassified")

    def __init__(self, group, description):
        self.group = group
        self.description = description


TAXONOMY = [c for c in ErrorCategory if c is not ErrorCategory.UNCLASSIFIED]

_DIAG_RE = re.compile(
    r"^(?P<file>[^\s:][^:]*):(?P<line>\d+):(?:(?P<col>\d+):)?\s*"
    r"(?P<sev>error|warning|fatal error):\s*(?P<msg>.*)$")


def parse_diagnostics(compiler_output: str) -> list[Diagnostic]:
    """Extract per-location diagnostics from gcc/clang style output."""
    diags = []
    for line in compiler_output.splitlines():
        m = _DIAG_RE.match(line.strip())
        if not m:
            continue
        sev = (Severity.ERROR if "error" in m.group("sev")
               else Severity.WARNING)
        col = int(m.group("col")) if m.group("col") else 0
        diags.append(Diagnostic(
            severity=sev,
            message=m.group("msg"),
            location=(m.group("file"), int(m.group("line")), col)))
    return diags


class RuleTable:
    """Ordered first-match mapping from error message patterns to
    categories; shipped as versioned data and overridable by users."""

    def __init__(self, rules: list[tuple[re.Pattern, ErrorCategory]]):
        self.rules = rules

    @classmethod
    def load(cls, path=None) -> "RuleTable":
        if path is not None:
            body = json.loads(Path(path).read_text())
        else:
            body = json.loads(resources.files("decompeval")
                              .joinpath("data/error_rules.json").read_text())
        rules = [(re.compile(r["pattern"]), ErrorCategory[r["category"]])
                 for r in body["rules"]]
        return cls(rules)

    def classify(self, message: str) -> ErrorCategory:
        for pattern, category in self.rules:
            if pattern.search(message):
                return category
        return ErrorCategory.UNCLASSIFIED


_DEFAULT_TABLE = None


def default_rule_table() -> RuleTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = RuleTable.load()
    return _DEFAULT_TABLE


def classify_errors(diagnostics: list[Diagnostic],
                    table: RuleTable = None) -> Counter:
    """Map every error-severity diagnostic to exactly one category.

    Total: the returned multiset has one entry per error diagnostic,
    counting Unclassified.
    """
    table = table or default_rule_table()
    counts = Counter()
    for diag in diagnostics:
        if diag.severity is Severity.ERROR:
            counts[table.classify(diag.message)] += 1
    return counts


@dataclass(frozen=True)
class RecompileOutcome:
    candidate: DecompiledCandidate
    success: bool
    so_path: Path | None
    diagnostics: list[Diagnostic]
    categories: Counter

    def to_json(self) -> dict:
        return {
            "decompiler": self.candidate.decompiler_id,
            "symbol": self.candidate.symbol,
            "level": self.candidate.level.value,
            "provenance": self.candidate.provenance,
            "success": self.success,
            "so_path": str(self.so_path) if self.so_path else None,
            "diagnostics": [
                {"severity": d.severity.value, "message": d.message,
                 "location": list(d.location) if d.location else None}
                for d in self.diagnostics],
            "categories": {c.name: n for c, n in sorted(
                self.categories.items(), key=lambda kv: kv[0].name)},
        }


def recompile(candidate: DecompiledCandidate, record: FunctionRecord,
              level: OptLevel, cfg: ToolchainConfig,
              out_dir, table: RuleTable = None) -> RecompileOutcome:
    """Compile a post-processed candidate with its extracted dependencies
    into a shared object at the candidate's optimization level.

    Candidate failures are data: a failing build yields a non-success
    outcome with classified categories, never an exception.  Undefined
    function references do not fail the build (shared objects may resolve
    them at substitution time).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = out_dir / "cand.c"
    src.write_text(record.deps_text() + "\n" + candidate.code + "\n")
    so_path = out_dir / "cand.so"
    ok, log = run_compiler(cfg, [src], so_path,
                           shared_object_cflags(cfg, level),
                           out_dir / "recompile.log")
    diagnostics = parse_diagnostics(log)
    categories = classify_errors(diagnostics, table)
    if not ok and not categories:
        # compiler died without a parseable error line; still a failure
        categories = Counter({ErrorCategory.UNCLASSIFIED: 1})
    outcome = RecompileOutcome(
        candidate=candidate,
        success=ok,
        so_path=so_path if ok else None,
        diagnostics=diagnostics,
        categories=categories,
    )
    (out_dir / "outcome.json").write_text(
        json.dumps(outcome.to_json(), indent=2, sort_keys=True) + "\n")
    return outcome


def compute_rsr(outcomes: list[RecompileOutcome],
                group: tuple[str, OptLevel]) -> float:
    """Recompile success rate for one (decompiler, level) group."""
    decompiler_id, level = group
    selected = [o for o in outcomes
                if o.candidate.decompiler_id == decompiler_id
                and o.candidate.level == level]
    if not selected:
        raise EmptyGroup(f"no outcomes for {decompiler_id}/{level.value}")
    return sum(1 for o in selected if o.success) / len(selected)
