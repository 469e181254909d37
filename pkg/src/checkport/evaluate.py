"""Score a transformed tree against ground-truth annotations.

An entry is correct when the emitted pointer kind matches and the bounds
expressions are syntactically equal after normalization (commutative
operands sorted, whitespace removed). No semantic equivalence checking is
attempted; near-misses are listed in the report for human review.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkedc import PointerKind, extract_sites, normalize_bounds, parse_bounds
from .errors import GroundTruthMismatch
from .source_model import DeclKind, Declaration, SourceUnit, extract_declarations


@dataclass
class GroundTruthEntry:
    decl: str
    symbol: str
    kind: str                  # ptr | arr | nt_arr
    bounds: str = ""           # held in normalized form; "" = no bounds

    def __post_init__(self):
        if self.bounds:
            self.bounds = normalize_bounds(parse_bounds(self.bounds))


@dataclass
class CallerEditCheck:
    """Informational only: a substring the transformed declaration should
    contain (caller updates that accompany signature refactors)."""

    decl: str
    contains: str


@dataclass
class GroundTruth:
    entries: list[GroundTruthEntry] = field(default_factory=list)
    caller_edits: list[CallerEditCheck] = field(default_factory=list)


@dataclass
class Metrics:
    required: int = 0
    inferred: int = 0
    correct: int = 0
    incorrect: int = 0
    not_inferred: int = 0

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        assert self.inferred == self.correct + self.incorrect
        assert self.not_inferred == self.required - self.inferred

    def to_json(self) -> dict:
        return {"required": self.required, "inferred": self.inferred,
                "correct": self.correct, "incorrect": self.incorrect,
                "not_inferred": self.not_inferred}


@dataclass
class Verdict:
    entry: GroundTruthEntry
    status: str      # correct | incorrect | not_inferred | missing_declaration
    emitted_kind: str = ""
    emitted_bounds: str = ""


def load_ground_truth(path: str | Path) -> GroundTruth:
    """JSON lines; one annotation entry or caller-edit check per line."""
    gt = GroundTruth()
    seen: set[tuple[str, str]] = set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        doc = json.loads(raw)
        if "contains" in doc:
            gt.caller_edits.append(CallerEditCheck(doc["decl"], doc["contains"]))
            continue
        key = (doc["decl"], doc["symbol"])
        if key in seen:
            raise ValueError(f"duplicate ground-truth entry for {key}")
        seen.add(key)
        gt.entries.append(GroundTruthEntry(
            decl=doc["decl"], symbol=doc["symbol"], kind=doc["kind"],
            bounds=doc.get("bounds", "") or ""))
    return gt


def score(output_decls: list[Declaration], gt: GroundTruth,
          missing: str = "error") -> tuple[Metrics, list[Verdict], list[dict]]:
    """Verdicts per entry plus aggregate metrics.

    missing="error" raises GroundTruthMismatch when an entry's declaration
    is absent from the output; missing="report" records it as a verdict.
    """
    by_name = {d.name: d for d in output_decls}
    typedef_names = {d.name for d in output_decls if d.kind == DeclKind.TYPEDECL}
    verdicts: list[Verdict] = []
    for entry in sorted(gt.entries, key=lambda e: (e.decl, e.symbol)):
        d = by_name.get(entry.decl)
        if d is None:
            if missing == "error":
                raise GroundTruthMismatch(
                    f"declaration {entry.decl!r} absent from output")
            verdicts.append(Verdict(entry, "missing_declaration"))
            continue
        sites = {s.symbol: s for s in extract_sites(d, typedef_names=typedef_names)}
        site = sites.get(entry.symbol)
        if site is None:
            verdicts.append(Verdict(entry, "not_inferred"))
            continue
        emitted_kind = site.kind.value
        emitted_bounds = normalize_bounds(site.bounds)
        inferred = bool(site.bounds) or (
            not entry.bounds and site.kind != PointerKind.UNCHECKED
            and emitted_kind == entry.kind)
        if not inferred:
            verdicts.append(Verdict(entry, "not_inferred",
                                    emitted_kind, emitted_bounds))
            continue
        ok = emitted_kind == entry.kind and emitted_bounds == entry.bounds
        verdicts.append(Verdict(entry, "correct" if ok else "incorrect",
                                emitted_kind, emitted_bounds))

    counts = {"correct": 0, "incorrect": 0, "not_inferred": 0,
              "missing_declaration": 0}
    for v in verdicts:
        counts[v.status] += 1
    metrics = Metrics(
        required=len(verdicts),
        inferred=counts["correct"] + counts["incorrect"],
        correct=counts["correct"],
        incorrect=counts["incorrect"],
        not_inferred=(counts["not_inferred"] + counts["missing_declaration"]),
    )

    edits = []
    for check in gt.caller_edits:
        d = by_name.get(check.decl)
        edits.append({"decl": check.decl, "contains": check.contains,
                      "found": bool(d and check.contains in d.code)})
    return metrics, verdicts, edits


def score_tree(paths: list[str | Path], gt: GroundTruth,
               missing: str = "error"):
    units = [SourceUnit(path=str(p), text=Path(p).read_text(encoding="utf-8"))
             for p in paths]
    return score(extract_declarations(units), gt, missing=missing)


def text_report(metrics: Metrics, verdicts: list[Verdict],
                edits: list[dict]) -> str:
    lines = [
        f"required:     {metrics.required}",
        f"inferred:     {metrics.inferred}",
        f"correct:      {metrics.correct}",
        f"incorrect:    {metrics.incorrect}",
        f"not inferred: {metrics.not_inferred}",
        "",
    ]
    for v in verdicts:
        e = v.entry
        want = f"{e.kind} {e.bounds}".strip()
        got = f"{v.emitted_kind} {v.emitted_bounds}".strip() or "-"
        mark = {"correct": "ok  ", "incorrect": "BAD ",
                "not_inferred": "MISS", "missing_declaration": "GONE"}[v.status]
        lines.append(f"{mark} {e.decl}.{e.symbol}: want [{want}] got [{got}]")
    if edits:
        found = sum(1 for e in edits if e["found"])
        lines.append("")
        lines.append(f"caller edits present: {found}/{len(edits)} (informational)")
        for e in edits:
            state = "ok  " if e["found"] else "MISS"
            lines.append(f"{state} {e['decl']}: {e['contains']!r}")
    return "\n".join(lines) + "\n"
