"""Three-pass transformation driver.

Each pass walks the dependency graph bottom-up and asks the backend to
rewrite one declaration at a time; symbolic steps around the passes insert
helper structs (pass 1), drop conflicting global/field annotations
(after pass 2) and introduce count_for_* bounds variables (pass 3).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .checkedc import (
    AnnotationSite,
    PointerKind,
    SiteScope,
    annotate_declaration_line,
    classify_pointer_lite,
    extract_sites,
    normalize_bounds,
    strip_annotation,
    to_long_spelling,
    validate_scope,
)
from .depgraph import DependencyGraph, bottom_up_order, build_graph, prelude_of
from .errors import (
    AmbiguousOverlap,
    BackendUnavailable,
    NameCollision,
    NoMatch,
    PromptTooLarge,
    ReplayMiss,
)
from .gateway import Backend, complete_n
from .patching import (
    Patch,
    PatchBlock,
    apply_patch_spans,
    majority_vote,
    match_blocks,
    serialize_patch,
    signature_changed,
)
from .prompts import (
    TASKS,
    PromptText,
    RefactorHistoryEntry,
    TaskElements,
    TaskId,
    TaskSpec,
    render_prompt,
)
from .source_model import (
    DeclKind,
    Declaration,
    DeclarationMeta,
    SourceUnit,
    fill_meta,
    mask_comments,
    reconstruct_unit,
    scan_locals,
    scan_references,
)

logger = logging.getLogger(__name__)

_KIND_RANK = {PointerKind.UNCHECKED: 0, PointerKind.PTR: 1,
              PointerKind.ARR: 2, PointerKind.NT_ARR: 3}


@dataclass
class TransformState:
    """Per-pass bookkeeping, reset at every pass start."""

    oldcode: dict[str, str]
    current: dict[str, str]
    refactored: dict[str, bool]
    last_changed: dict[str, int] = field(default_factory=dict)


@dataclass
class DeclOutcome:
    decl_id: str
    status: str                  # applied | empty | skipped | rejected
    reason: str = ""


@dataclass
class PassReport:
    pass_id: str
    outcomes: list[DeclOutcome] = field(default_factory=list)
    queries: int = 0
    completions_used: int = 0
    annotations_added: int = 0
    annotations_dropped: int = 0
    drops: list[dict] = field(default_factory=list)

    def count(self, status: str) -> int:
        return sum(1 for o in self.outcomes if o.status == status)

    def to_json(self) -> dict:
        return {
            "pass": self.pass_id,
            "queries": self.queries,
            "completions_used": self.completions_used,
            "annotations_added": self.annotations_added,
            "annotations_dropped": self.annotations_dropped,
            "outcomes": {s: self.count(s)
                         for s in ("applied", "empty", "skipped", "rejected")},
            "declarations": [{"id": o.decl_id, "status": o.status,
                              "reason": o.reason} for o in self.outcomes],
            "drops": self.drops,
        }


class QueryLog:
    """Per-query JSON records plus dumped prompt texts under a directory."""

    def __init__(self, log_dir: str | Path | None):
        self.log_dir = Path(log_dir) if log_dir else None
        self.seq = 0
        self.records: list[dict] = []

    def record(self, pass_id: str, decl: Declaration, prompt: PromptText | None,
               record: dict) -> None:
        self.seq += 1
        record = {"seq": self.seq, "pass": pass_id, "decl": decl.id, **record}
        self.records.append(record)
        if not self.log_dir:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        stem = f"q{self.seq:04d}_{pass_id}_{decl.name}"
        (self.log_dir / f"{stem}.json").write_text(
            json.dumps(record, indent=2) + "\n", encoding="utf-8")
        if prompt is not None:
            (self.log_dir / f"{stem}.prompt.txt").write_text(
                prompt.rendered, encoding="utf-8")

    def write_report(self, report: PassReport) -> None:
        if not self.log_dir:
            return
        self.log_dir.mkdir(parents=True, exist_ok=True)
        (self.log_dir / f"report_{report.pass_id}.json").write_text(
            json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Declaration views refreshed against current code
# ---------------------------------------------------------------------------

def refresh_views(base: list[Declaration], current: dict[str, str]) -> list[Declaration]:
    """Declaration objects whose code and metadata track the current text."""
    views = []
    typedef_names = {d.name for d in base if d.kind == DeclKind.TYPEDECL}
    for d in base:
        v = Declaration(
            id=d.id, kind=d.kind, name=d.name, unit_path=d.unit_path,
            start=d.start, end=d.end, start_line=d.start_line,
            end_line=d.end_line, code=current.get(d.id, d.code),
            has_body=d.has_body)
        if v.kind != DeclKind.MACRO:
            fill_meta(v, typedef_names)
        views.append(v)
    universe = {d.name for d in base}
    for v in views:
        if v.kind != DeclKind.MACRO:
            v.meta.referenced_names = scan_references(v, universe)
    return views


def _struct_field_names(code: str) -> set[str]:
    masked = mask_comments(code)
    lb, rb = masked.find("{"), masked.rfind("}")
    if lb < 0 or rb < 0:
        return set()
    names = {n for n, _ in scan_locals(masked[lb + 1:rb], set())}
    for s in extract_sites_text(code):
        names.add(s)
    return names


def extract_sites_text(code: str) -> set[str]:
    return {m.group(1) for m in re.finditer(
        r"\b(?:ptr|arr|nt_arr)\s*<[^<>]*(?:<[^<>]*>)?[^<>]*>\s*([A-Za-z_][A-Za-z0-9_]*)",
        mask_comments(code))}


# ---------------------------------------------------------------------------
# Pass context
# ---------------------------------------------------------------------------

@dataclass
class PassContext:
    task: TaskSpec
    backend: Backend
    n_completions: int
    salt: str = ""
    token_budget: int = 24000
    traversal_kinds: tuple[DeclKind, ...] | None = None
    forced_edges: set[tuple[str, str]] = field(default_factory=set)
    preseed_old: dict[str, str] = field(default_factory=dict)
    elements_extra: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    log: QueryLog | None = None


@dataclass
class _AnnRecord:
    target_id: str
    symbol: str
    by_proc: str
    bounds_norm: str


def run_pass(ctx: PassContext, base_decls: list[Declaration],
             current: dict[str, str]) -> tuple[PassReport, list[_AnnRecord]]:
    """Execute one transformation pass over the whole program.

    Mutates `current` in place; returns the report and the global/field
    annotation records collected for conflict detection.
    """
    report = PassReport(pass_id=ctx.task.id.value)
    records: list[_AnnRecord] = []

    views = {v.id: v for v in refresh_views(base_decls, current)}
    graph = build_graph(list(views.values()))
    graph.edges |= {e for e in ctx.forced_edges
                    if e[0] in views and e[1] in views}
    order = bottom_up_order(graph)

    state = TransformState(
        oldcode={i: current.get(i, views[i].code) for i in views},
        current=current,
        refactored={i: False for i in views},
    )
    for decl_id, old in ctx.preseed_old.items():
        if decl_id in views and old != current.get(decl_id, ""):
            state.oldcode[decl_id] = old
            state.refactored[decl_id] = True
            state.last_changed[decl_id] = 0

    globals_names = {v.name for v in views.values() if v.kind == DeclKind.GLOBAL}
    macro_names = {v.name for v in views.values() if v.kind == DeclKind.MACRO}
    typedef_names = {v.name for v in views.values() if v.kind == DeclKind.TYPEDECL}

    turn = 0
    for node_id in order.sequence:
        d = views[node_id]
        if ctx.traversal_kinds and d.kind not in ctx.traversal_kinds:
            continue
        if d.kind == DeclKind.MACRO:
            continue  # macro transformation is out of scope
        turn += 1
        outcome = _visit(ctx, d, views, graph, state, turn, report, records,
                         globals_names, macro_names, typedef_names)
        report.outcomes.append(outcome)
    return report, records


def _visit(ctx: PassContext, d: Declaration, views: dict[str, Declaration],
           graph: DependencyGraph, state: TransformState, turn: int,
           report: PassReport, records: list[_AnnRecord],
           globals_names: set[str], macro_names: set[str],
           typedef_names: set[str]) -> DeclOutcome:
    elements = _elements_for_pass(ctx, d, views, graph, typedef_names)
    history = _history_for(d, graph, state, views)
    if not elements and not history:
        return DeclOutcome(d.id, "skipped", "nothing to do")

    prelude = prelude_of(d, graph, current=state.current, decls_by_id=views)
    try:
        prompt = render_prompt(ctx.task, prelude, d.code, history, elements,
                               token_budget=ctx.token_budget)
    except PromptTooLarge as e:
        logger.warning("skipping %s: %s", d.id, e)
        return DeclOutcome(d.id, "skipped", f"prompt too large: {e}")

    try:
        completions = complete_n(prompt, ctx.n_completions, ctx.backend,
                                 salt=ctx.salt)
    except (BackendUnavailable, ReplayMiss) as e:
        logger.warning("skipping %s: %s", d.id, e)
        if ctx.log:
            ctx.log.record(ctx.task.id.value, d, prompt,
                           {"fingerprint": prompt.fingerprint,
                            "status": "skipped", "reason": str(e)})
        return DeclOutcome(d.id, "skipped", str(e))

    report.queries += 1
    report.completions_used += len(completions.completions)
    vote = majority_vote(completions.completions)
    log_base = {"fingerprint": prompt.fingerprint, "tally": vote.tally,
                "winner": serialize_patch(vote.winner)}

    if not vote.winner.blocks:
        if ctx.log:
            ctx.log.record(ctx.task.id.value, d, prompt,
                           {**log_base, "status": "empty"})
        return DeclOutcome(d.id, "empty")

    try:
        routed = _route_blocks(vote.winner, d, views, graph, state)
        staged = {tid: apply_patch_spans(patch, state.current.get(tid, views[tid].code))
                  for tid, patch in routed.items()}
    except (NoMatch, AmbiguousOverlap) as e:
        logger.info("rejected patch on %s: %s", d.id, e)
        if ctx.log:
            ctx.log.record(ctx.task.id.value, d, prompt,
                           {**log_base, "status": "rejected", "reason": str(e)})
        return DeclOutcome(d.id, "rejected", str(e))

    drops: list[dict] = []
    changed_any = False
    for tid, (new_code, _spans) in staged.items():
        target = views[tid]
        before = state.current.get(tid, target.code)
        new_code, target_drops = _drop_out_of_scope(
            target, before, new_code, views, globals_names, macro_names,
            typedef_names)
        drops.extend(target_drops)
        if new_code == before:
            continue
        changed_any = True
        added = _annotation_diff(target, before, new_code, typedef_names)
        report.annotations_added += len(added)
        for sym, norm in added:
            if target.kind in (DeclKind.GLOBAL, DeclKind.TYPEDECL):
                records.append(_AnnRecord(tid, sym, d.id, norm))
        state.current[tid] = new_code
        state.last_changed[tid] = turn
        views[tid] = _refreshed(target, new_code, typedef_names, views)
        if tid == d.id:
            flag = signature_changed(routed[tid], before,
                                     is_procedure=d.kind == DeclKind.PROCEDURE)
        else:
            flag = True  # non-queried targets are never procedures here
        state.refactored[tid] = state.refactored[tid] or flag

    report.annotations_dropped += len(drops)
    report.drops.extend(drops)
    status = "applied" if changed_any else "empty"
    if ctx.log:
        ctx.log.record(ctx.task.id.value, d, prompt,
                       {**log_base, "status": status,
                        "targets": sorted(staged), "dropped": drops})
    return DeclOutcome(d.id, status)


def _refreshed(d: Declaration, code: str, typedef_names: set[str],
               views: dict[str, Declaration]) -> Declaration:
    v = Declaration(id=d.id, kind=d.kind, name=d.name, unit_path=d.unit_path,
                    start=d.start, end=d.end, start_line=d.start_line,
                    end_line=d.end_line, code=code, has_body=d.has_body)
    if v.kind != DeclKind.MACRO:
        fill_meta(v, typedef_names)
        v.meta.referenced_names = scan_references(
            v, {x.name for x in views.values()})
    return v


def _route_blocks(patch: Patch, d: Declaration, views: dict[str, Declaration],
                  graph: DependencyGraph,
                  state: TransformState) -> dict[str, Patch]:
    """Assign each block to the queried declaration or a successor
    global/type whose code it matches; any unmatched block rejects the
    entire patch.
    """
    code_of = lambda tid: state.current.get(tid, views[tid].code)
    candidates = [d.id]
    for sid in graph.successors(d.id):
        if views[sid].kind in (DeclKind.GLOBAL, DeclKind.TYPEDECL):
            candidates.append(sid)

    routed: dict[str, list[PatchBlock]] = {}
    for block in patch.blocks:
        placed = False
        for tid in candidates:
            try:
                match_blocks(Patch((block,)), code_of(tid))
            except (NoMatch, AmbiguousOverlap):
                continue
            routed.setdefault(tid, []).append(block)
            placed = True
            break
        if not placed:
            raise NoMatch(f"original lines not found in {d.id} or its "
                          f"context: {block.original[0]!r}")
    return {tid: Patch(tuple(blocks)) for tid, blocks in routed.items()}


def _history_for(d: Declaration, graph: DependencyGraph,
                 state: TransformState,
                 views: dict[str, Declaration]) -> list[RefactorHistoryEntry]:
    entries = []
    succ = graph.successors(d.id)
    ordered = sorted(succ, key=lambda sid: (-state.last_changed.get(sid, 0),
                                            graph.sort_keys.get(sid, ("", sid))))
    for sid in ordered:
        if not state.refactored.get(sid):
            continue
        old = state.oldcode[sid]
        new = state.current.get(sid, views[sid].code)
        if old == new:
            continue
        entries.append(RefactorHistoryEntry(views[sid].name, old, new))
    return entries


def _elements_for_pass(ctx: PassContext, d: Declaration,
                       views: dict[str, Declaration], graph: DependencyGraph,
                       typedef_names: set[str]) -> TaskElements:
    if ctx.task.id == TaskId.BOUNDS_INFERENCE:
        sites = classify_pointer_lite(d, typedef_names=typedef_names)
        sites = _upgrade_from_callees(d, sites, views, graph, typedef_names)
        items = [(s.symbol, s.line) for s in sites
                 if s.kind in (PointerKind.ARR, PointerKind.NT_ARR)
                 and not s.annotated and s.scope != SiteScope.RETURN]
        return TaskElements(items)
    extra = ctx.elements_extra.get(d.id, [])
    return TaskElements(list(extra))


def _upgrade_from_callees(d: Declaration, sites: list[AnnotationSite],
                          views: dict[str, Declaration],
                          graph: DependencyGraph,
                          typedef_names: set[str]) -> list[AnnotationSite]:
    """Raise a pointer's kind when it is passed where a callee, already
    visited bottom-up, now expects an arr or nt_arr parameter.
    """
    by_symbol = {s.symbol: s for s in sites}
    masked = mask_comments(d.code)
    for sid in graph.successors(d.id):
        callee = views[sid]
        if callee.kind != DeclKind.PROCEDURE or callee.id == d.id:
            continue
        param_kinds = _param_kinds(callee, typedef_names)
        if not any(k in (PointerKind.ARR, PointerKind.NT_ARR)
                   for k in param_kinds):
            continue
        for call in re.finditer(rf"\b{re.escape(callee.name)}\s*\(", masked):
            args = _call_args(masked, call.end() - 1)
            for pos, arg in enumerate(args):
                name = arg.strip()
                if pos >= len(param_kinds):
                    break
                site = by_symbol.get(name)
                if site is None or site.implicit:
                    continue
                want = param_kinds[pos]
                if _KIND_RANK.get(want, 0) > _KIND_RANK.get(site.kind, 0):
                    idx = sites.index(site)
                    sites[idx] = replace(site, kind=want)
                    by_symbol[name] = sites[idx]
    return sites


def _param_kinds(callee: Declaration, typedef_names: set[str]) -> list[PointerKind]:
    kinds = []
    param_sites = {s.symbol: s for s in extract_sites(
        callee, callee.meta.signature_text or callee.code, typedef_names)}
    for name, _type in callee.meta.params:
        site = param_sites.get(name)
        kinds.append(site.kind if site else PointerKind.PTR)
    return kinds


def _call_args(masked: str, open_paren: int) -> list[str]:
    depth = 0
    args: list[str] = []
    cur: list[str] = []
    for i in range(open_paren, len(masked)):
        c = masked[i]
        if c == "(":
            depth += 1
            if depth == 1:
                continue
        elif c == ")":
            depth -= 1
            if depth == 0:
                args.append("".join(cur))
                return [a for a in args if a.strip()]
        if c == "," and depth == 1:
            args.append("".join(cur))
            cur = []
        else:
            cur.append(c)
    return []


def _annotation_map(d: Declaration, code: str,
                    typedef_names: set[str]) -> dict[str, str]:
    sites = extract_sites(d, code, typedef_names)
    return {s.symbol: normalize_bounds(s.bounds) for s in sites if s.bounds}


def _annotation_diff(d: Declaration, before: str, after: str,
                     typedef_names: set[str]) -> list[tuple[str, str]]:
    old = _annotation_map(d, before, typedef_names)
    new = _annotation_map(d, after, typedef_names)
    return sorted((sym, norm) for sym, norm in new.items()
                  if old.get(sym) != norm)


def _drop_out_of_scope(target: Declaration, before: str, after: str,
                       views: dict[str, Declaration], globals_names: set[str],
                       macro_names: set[str],
                       typedef_names: set[str]) -> tuple[str, list[dict]]:
    """Strip newly added annotations whose identifiers are not in scope."""
    old = _annotation_map(target, before, typedef_names)
    refreshed = _refreshed(target, after, typedef_names, views)
    sites = extract_sites(refreshed, after, typedef_names)
    fields = _struct_field_names(after) if target.kind == DeclKind.TYPEDECL else set()
    meta = refreshed.meta if target.kind == DeclKind.PROCEDURE else None
    drops: list[dict] = []
    lines = after.split("\n")
    for site in sites:
        if not site.bounds:
            continue
        if old.get(site.symbol) == normalize_bounds(site.bounds):
            continue  # pre-existing annotation, not this patch's doing
        ok, offender = validate_scope(site, meta, globals_names, fields,
                                      macros=macro_names)
        if ok:
            continue
        idx = site.line - 1
        if 0 <= idx < len(lines):
            lines[idx] = strip_annotation(lines[idx], site.symbol)
        drops.append({"decl": target.id, "symbol": site.symbol,
                      "bounds": normalize_bounds(site.bounds),
                      "out_of_scope": offender})
        logger.info("dropped out-of-scope annotation on %s.%s (%s)",
                    target.id, site.symbol, offender)
    return "\n".join(lines), drops


# ---------------------------------------------------------------------------
# Pass 1 symbolic preparation: helper structs for nested arrays
# ---------------------------------------------------------------------------

@dataclass
class NestedSnapshot:
    # decl id -> [(symbol, line)] of nested sites found before the pass
    by_decl: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    element_types: dict[str, str] = field(default_factory=dict)  # struct name -> T


def struct_name_for(element_type: str) -> str:
    inner = element_type.strip()
    m = re.fullmatch(r"(?:arr|nt_arr|ptr)\s*<\s*(.*?)\s*>", inner)
    if m:
        inner = m.group(1)
    inner = re.sub(r"\bconst\b|\bvolatile\b", "", inner).strip()
    inner = inner.replace("*", " ptr ")
    return "arr_of_" + re.sub(r"\s+", "_", inner.strip())


def struct_text_for(element_type: str) -> str:
    name = struct_name_for(element_type)
    inner = element_type.strip()
    m = re.fullmatch(r"(?:arr|nt_arr|ptr)\s*<\s*(.*?)\s*>", inner)
    if m:
        inner = m.group(1)
    return (f"typedef struct {name} {{\n"
            f"  arr<{inner}> ptr : count(len);\n"
            f"  int len;\n"
            f"}} {name};")


def pass1_prepare(base_decls: list[Declaration], current: dict[str, str]
                  ) -> tuple[NestedSnapshot, list[Declaration],
                             dict[str, list[str]], set[tuple[str, str]]]:
    """Insert one helper struct per nested element type, before first use.

    Returns the nested-site snapshot, the synthetic struct declarations,
    the writer insertions (anchor decl id -> texts) and forced graph edges
    linking nested-site declarations to their struct.
    """
    views = refresh_views(base_decls, current)
    typedef_names = {d.name for d in views if d.kind == DeclKind.TYPEDECL}
    snapshot = NestedSnapshot()
    first_use: dict[str, Declaration] = {}
    users: dict[str, list[str]] = {}

    global_nested: dict[str, str] = {}  # global symbol -> struct name
    for v in sorted(views, key=lambda d: (d.unit_path, d.start)):
        if v.kind == DeclKind.MACRO:
            continue
        nested = [s for s in classify_pointer_lite(v, typedef_names=typedef_names)
                  if s.nested]
        if not nested:
            continue
        snapshot.by_decl[v.id] = [(s.symbol, s.line) for s in nested]
        for s in nested:
            sname = struct_name_for(s.element_type)
            snapshot.element_types.setdefault(sname, s.element_type)
            first_use.setdefault(sname, v)
            users.setdefault(sname, []).append(v.id)
            if v.kind == DeclKind.GLOBAL:
                global_nested[s.symbol] = sname

    # declarations that use a nested global also need the struct in context
    for v in views:
        if v.kind == DeclKind.MACRO:
            continue
        for gsym, sname in global_nested.items():
            if gsym in v.meta.referenced_names and v.id not in users[sname]:
                users[sname].append(v.id)

    inserted: list[Declaration] = []
    insertions: dict[str, list[str]] = {}  # anchor decl id -> inserted decl ids
    forced: set[tuple[str, str]] = set()
    existing = {d.name: d for d in views if d.kind == DeclKind.TYPEDECL}
    for sname in sorted(snapshot.element_types):
        text = struct_text_for(snapshot.element_types[sname])
        if sname in existing:
            have = " ".join(existing[sname].code.split())
            want = " ".join(text.split())
            if have != want:
                raise NameCollision(
                    f"{sname} already declared with a different shape")
            struct_id = existing[sname].id
        else:
            anchor = first_use[sname]
            sd = Declaration(
                id=f"type:{sname}", kind=DeclKind.TYPEDECL, name=sname,
                unit_path=anchor.unit_path, start=anchor.start,
                end=anchor.start, start_line=anchor.start_line,
                end_line=anchor.start_line, code=text)
            inserted.append(sd)
            insertions.setdefault(anchor.id, []).append(sd.id)
            struct_id = sd.id
        for user in users[sname]:
            forced.add((user, struct_id))
    return snapshot, inserted, insertions, forced


def pass1_elements(snapshot: NestedSnapshot, decls: list[Declaration],
                   current: dict[str, str]) -> dict[str, list[tuple[str, int]]]:
    """Per-declaration nested-array elements: own sites plus referenced
    declarations' nested symbols that occur in this code.
    """
    views = refresh_views(decls, current)
    by_id = {v.id: v for v in views}
    out: dict[str, list[tuple[str, int]]] = {}
    for v in views:
        items = list(snapshot.by_decl.get(v.id, []))
        have = {sym for sym, _ in items}
        for other_id, other_items in snapshot.by_decl.items():
            if other_id == v.id:
                continue
            for sym, _line in other_items:
                if sym in have:
                    continue
                m = re.search(rf"\b{re.escape(sym)}\b", mask_comments(v.code))
                if m:
                    line = v.code[:m.start()].count("\n") + 1
                    items.append((sym, line))
                    have.add(sym)
        if items:
            out[v.id] = items
    return out


# ---------------------------------------------------------------------------
# Pass 2 post-processing: conflicting global/field annotations
# ---------------------------------------------------------------------------

def pass2_postprocess(records: list[_AnnRecord], base_decls: list[Declaration],
                      current: dict[str, str]) -> list[dict]:
    """Drop global/field annotations that different procedures disagree on.

    Parameter and local annotations are never touched here. Returns the
    conflict log entries; `current` is updated in place.
    """
    grouped: dict[tuple[str, str], set[str]] = {}
    for r in records:
        grouped.setdefault((r.target_id, r.symbol), set()).add(r.bounds_norm)

    conflicts: list[dict] = []
    by_id = {d.id: d for d in base_decls}
    for (target_id, symbol), values in sorted(grouped.items()):
        if len(values) < 2:
            continue
        d = by_id.get(target_id)
        if d is None:
            continue
        code = current.get(target_id, d.code)
        lines = code.split("\n")
        for i, line in enumerate(lines):
            lines[i] = strip_annotation(line, symbol)
        new_code = "\n".join(lines)
        if new_code != code:
            current[target_id] = new_code
        conflicts.append({"decl": target_id, "symbol": symbol,
                          "conflicting": sorted(values)})
        logger.info("conflicting annotations on %s.%s dropped: %s",
                    target_id, symbol, sorted(values))
    return conflicts


# ---------------------------------------------------------------------------
# Pass 3 symbolic preparation: count_for_* bounds variables
# ---------------------------------------------------------------------------

@dataclass
class CountVar:
    count_name: str
    base_symbol: str
    owner_id: str
    scope: str  # "global" | "field"


def _used_names(decls: list[Declaration], current: dict[str, str]) -> set[str]:
    names = {d.name for d in decls}
    for d in decls:
        names |= _struct_field_names(current.get(d.id, d.code))
    return names


def _fresh_count_name(base: str, used: set[str]) -> str:
    name = f"count_for_{base}"
    if name not in used:
        return name
    k = 2
    while f"{name}_{k}" in used:
        k += 1
    return f"{name}_{k}"


def _global_kind_from_uses(symbol: str, views: list[Declaration]) -> PointerKind:
    kind = PointerKind.PTR
    for v in views:
        if v.kind != DeclKind.PROCEDURE:
            continue
        body = mask_comments(v.code)
        if re.search(rf"\b{re.escape(symbol)}\s*\[", body) or \
                re.search(rf"\b{re.escape(symbol)}\s*(?:\+\+|\+=|-=)", body):
            kind = PointerKind.ARR
    return kind


def pass3_prepare(base_decls: list[Declaration], current: dict[str, str]
                  ) -> tuple[list[CountVar], list[Declaration],
                             dict[str, list[str]], dict[str, str]]:
    """Introduce int-valued count_for_* variables for unannotated arr
    globals and struct fields, annotating each with count(count_for_X).

    Returns the introduced variables, synthetic global declarations, writer
    insertions, and the pre-edit code snapshots that seed the pass-3
    refactor history.
    """
    views = refresh_views(base_decls, current)
    typedef_names = {d.name for d in views if d.kind == DeclKind.TYPEDECL}
    used = _used_names(base_decls, current)
    count_vars: list[CountVar] = []
    inserted: list[Declaration] = []
    insertions: dict[str, list[str]] = {}
    preseed: dict[str, str] = {}

    for v in views:
        if v.kind == DeclKind.GLOBAL:
            sites = extract_sites(v, v.code, typedef_names)
            for s in sites:
                kind = s.kind
                if kind == PointerKind.UNCHECKED and not s.implicit:
                    kind = _global_kind_from_uses(s.symbol, views)
                if kind != PointerKind.ARR or s.annotated or s.nested:
                    continue
                cname = _fresh_count_name(s.symbol, used)
                used.add(cname)
                before = v.code
                lines = before.split("\n")
                idx = s.line - 1
                lines[idx] = annotate_declaration_line(
                    lines[idx], s.symbol, PointerKind.ARR, f"count({cname})")
                after = "\n".join(lines)
                if after == before:
                    continue
                preseed.setdefault(v.id, before)
                current[v.id] = after
                cd = Declaration(
                    id=f"global:{cname}", kind=DeclKind.GLOBAL, name=cname,
                    unit_path=v.unit_path, start=v.start, end=v.start,
                    start_line=v.start_line, end_line=v.start_line,
                    code=f"int {cname};")
                inserted.append(cd)
                insertions.setdefault(v.id, []).append(cd.id)
                count_vars.append(CountVar(cname, s.symbol, v.id, "global"))
        elif v.kind == DeclKind.TYPEDECL:
            sites = extract_sites(v, v.code, typedef_names)
            for s in sites:
                if s.kind != PointerKind.ARR or s.annotated or s.nested:
                    continue
                cname = _fresh_count_name(s.symbol, used)
                used.add(cname)
                before = current.get(v.id, v.code)
                lines = before.split("\n")
                idx = s.line - 1
                indent = re.match(r"\s*", lines[idx]).group(0)
                annotated = annotate_declaration_line(
                    lines[idx], s.symbol, PointerKind.ARR, f"count({cname})")
                lines[idx] = annotated
                lines.insert(idx, f"{indent}int {cname};")
                after = "\n".join(lines)
                if after == before:
                    continue
                preseed.setdefault(v.id, before)
                current[v.id] = after
                count_vars.append(CountVar(cname, s.symbol, v.id, "field"))
    return count_vars, inserted, insertions, preseed


def pass3_elements(count_vars: list[CountVar], decls: list[Declaration],
                   current: dict[str, str]) -> dict[str, list[tuple[str, int]]]:
    """count_for_* elements for each procedure that assigns the pointer."""
    out: dict[str, list[tuple[str, int]]] = {}
    for d in decls:
        if d.kind != DeclKind.PROCEDURE:
            continue
        code = mask_comments(current.get(d.id, d.code))
        items = []
        for cv in count_vars:
            if cv.scope == "field":
                pat = rf"(?:\.|->)\s*{re.escape(cv.base_symbol)}\s*=(?!=)"
            else:
                pat = rf"(?<![.\w]){re.escape(cv.base_symbol)}\s*=(?!=)"
            m = re.search(pat, code)
            if m:
                line = code[:m.start()].count("\n") + 1
                items.append((cv.count_name, line))
        if items:
            out[d.id] = items
    return out


# ---------------------------------------------------------------------------
# Whole pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    n_completions: int = 10
    passes: tuple[int, ...] = (1, 2, 3)
    token_budget: int = 24000
    spelling: str = "short"    # short | long
    salt: str = ""
    log_dir: str | Path | None = None


@dataclass
class PipelineResult:
    outputs: dict[str, str]              # unit path -> transformed text
    reports: list[PassReport]
    conflicts: list[dict]
    query_log: QueryLog

    def report_json(self) -> dict:
        return {"passes": [r.to_json() for r in self.reports],
                "conflicts": self.conflicts}


def run_pipeline(units: list[SourceUnit], decls: list[Declaration],
                 backend: Backend, config: PipelineConfig) -> PipelineResult:
    """pass1_prepare -> pass1 -> pass2 -> conflict drop -> pass3_prepare -> pass3."""
    current: dict[str, str] = {d.id: d.code for d in decls}
    all_decls = list(decls)
    insertions: dict[str, list[str]] = {}  # anchor id -> inserted decl ids
    log = QueryLog(config.log_dir)
    reports: list[PassReport] = []
    conflicts: list[dict] = []

    def add_inserted(new_decls, new_insertions):
        for d in new_decls:
            all_decls.append(d)
            current[d.id] = d.code
        for anchor, ids in new_insertions.items():
            insertions.setdefault(anchor, []).extend(ids)

    if 1 in config.passes:
        snapshot, new_decls, new_ins, forced = pass1_prepare(all_decls, current)
        add_inserted(new_decls, new_ins)
        ctx = PassContext(
            task=TASKS[TaskId.NESTED_ARRAYS], backend=backend,
            n_completions=config.n_completions, salt=config.salt,
            token_budget=config.token_budget, forced_edges=forced,
            elements_extra=pass1_elements(snapshot, all_decls, current),
            log=log)
        report, _ = run_pass(ctx, all_decls, current)
        reports.append(report)
        log.write_report(report)

    records = []
    if 2 in config.passes:
        ctx = PassContext(
            task=TASKS[TaskId.BOUNDS_INFERENCE], backend=backend,
            n_completions=config.n_completions, salt=config.salt,
            token_budget=config.token_budget,
            traversal_kinds=(DeclKind.PROCEDURE,), log=log)
        report, records = run_pass(ctx, all_decls, current)
        conflicts = pass2_postprocess(records, all_decls, current)
        report.annotations_dropped += len(conflicts)
        reports.append(report)
        log.write_report(report)

    if 3 in config.passes:
        count_vars, new_decls, new_ins, preseed = pass3_prepare(all_decls, current)
        add_inserted(new_decls, new_ins)
        ctx = PassContext(
            task=TASKS[TaskId.GLOBALS_FIELDS], backend=backend,
            n_completions=config.n_completions, salt=config.salt,
            token_budget=config.token_budget, preseed_old=preseed,
            elements_extra=pass3_elements(count_vars, all_decls, current),
            log=log)
        report, _ = run_pass(ctx, all_decls, current)
        reports.append(report)
        log.write_report(report)

    outputs = {}
    for unit in units:
        replacements = {}
        for d in decls:
            if d.unit_path != unit.path:
                continue
            text = current[d.id]
            if text != d.code and config.spelling == "long":
                text = to_long_spelling(text)
            replacements[d.id] = text
        unit_insertions = {}
        for anchor, ids in insertions.items():
            anchor_decl = next((d for d in decls if d.id == anchor), None)
            if anchor_decl is None or anchor_decl.unit_path != unit.path:
                continue
            rendered = []
            for did in ids:
                out_text = current[did]  # inserted decls may have been patched
                if config.spelling == "long":
                    out_text = to_long_spelling(out_text)
                rendered.append(out_text)
            unit_insertions[anchor] = rendered
        outputs[unit.path] = reconstruct_unit(
            unit, decls, replacements=replacements, insertions=unit_insertions)
    return PipelineResult(outputs=outputs, reports=reports,
                          conflicts=conflicts, query_log=log)
