"""Rule-based mock completions: a hermetic, deterministic test double.

The mock reads the rendered prompt back (code section plus task elements)
and answers in the same block format a live model is instructed to use.
Rules are tried in order per element; when none fires the element is left
alone, which is the "say unknown" behavior.

R1  e * sizeof(T) malloc assigned to the pointer        -> count(e)
R2  for (i = 0; i < e; i++) loop indexing p[i]          -> count(e)
R3  null-character scan over p                          -> nt_arr, count(0)
R4  p assigned from an annotated pointer or fixed array -> copy its bounds
R5  otherwise                                           -> no patch
"""

from __future__ import annotations

import re

from .checkedc import (
    PointerKind,
    _scan_annotation,
    annotate_declaration_line,
    nt_count_from_array,
    parse_bounds,
    print_bounds,
)
from .patching import Patch, PatchBlock, format_patch
from .prompts import (
    BOUNDS_DESCRIPTION,
    NONE_MARKER,
    SECTION_CODE,
    SECTION_ELEMENTS,
    SECTION_HISTORY,
    PromptText,
)


def mock_respond(p: PromptText) -> str:
    """Deterministic response for a rendered prompt."""
    code = _section(p.rendered, SECTION_CODE, SECTION_HISTORY)
    elements = _parse_elements(_section(p.rendered, SECTION_ELEMENTS, None))
    if BOUNDS_DESCRIPTION.splitlines()[0] not in p.rendered:
        return ""  # only the bounds task has mock rules
    if not code or not elements:
        return ""

    lines = code.split("\n")
    rewrites: dict[int, str] = {}  # elements on one line share one block
    for symbol, line_no in elements:
        decl_line = _declaration_line(lines, symbol, line_no)
        if decl_line is None:
            continue
        result = _apply_rules(code, symbol)
        if result is None:
            continue  # R5: leave the line as it is
        kind, bounds_text = result
        base = rewrites.get(decl_line, lines[decl_line])
        rewrites[decl_line] = annotate_declaration_line(
            base, symbol, kind, bounds_text)
    blocks = tuple(
        PatchBlock((lines[idx],), (rewritten,))
        for idx, rewritten in sorted(rewrites.items())
        if rewritten != lines[idx])
    return format_patch(Patch(blocks))


def _section(rendered: str, header: str, next_header: str | None) -> str:
    start = rendered.find(header)
    if start < 0:
        return ""
    start = rendered.find("\n", start)
    start = rendered.find("\n", start + 1)  # skip the fixed intro line
    if start < 0:
        return ""
    end = rendered.find(next_header, start) if next_header else len(rendered)
    if end < 0:
        end = len(rendered)
    return rendered[start + 1:end].strip("\n")


def _parse_elements(text: str) -> list[tuple[str, int]]:
    if not text or text.strip() == NONE_MARKER:
        return []
    items = []
    for m in re.finditer(r"^- ([A-Za-z_][A-Za-z0-9_]*) \(line (\d+)\)$",
                         text, re.M):
        items.append((m.group(1), int(m.group(2))))
    return items


def _declaration_line(lines: list[str], symbol: str, line_no: int) -> int | None:
    idx = line_no - 1
    if 0 <= idx < len(lines) and re.search(rf"\b{re.escape(symbol)}\b", lines[idx]):
        return idx
    for i, line in enumerate(lines):
        if re.search(rf"(?:[*>\s]){re.escape(symbol)}\s*(?:[;,=:)\[]|$)", line):
            return i
    return None


def _apply_rules(code: str, symbol: str) -> tuple[PointerKind, str] | None:
    sym = re.escape(symbol)

    # R1: count from the malloc size expression
    m = re.search(rf"\b{sym}\s*=\s*(?:\([^()]*\)\s*)*malloc\s*\(", code)
    if m:
        arg = _balanced_arg(code, m.end() - 1)
        e = _count_from_malloc(arg)
        if e:
            return PointerKind.ARR, f"count({e})"

    # R2: count from a simple counting loop that indexes the pointer
    for lm in re.finditer(
            r"for\s*\(\s*(?:[A-Za-z_][A-Za-z0-9_ ]*\s)?([A-Za-z_][A-Za-z0-9_]*)"
            r"\s*=\s*0\s*;\s*\1\s*<\s*([^;<>=]+?)\s*;\s*(?:\1\+\+|\+\+\1)\s*\)",
            code):
        i_var, limit = lm.group(1), lm.group(2).strip()
        if re.search(rf"\b{sym}\s*\[\s*{re.escape(i_var)}\s*\]", code):
            return PointerKind.ARR, f"count({limit})"

    # R3: null-terminated scan
    if re.search(rf"\*\s*{sym}(?:\+\+)?\s*!=\s*(?:0\b|'\\0')", code):
        return PointerKind.NT_ARR, "count(0)"

    # R4: adopt bounds from the assignment source
    m = re.search(rf"\b{sym}(?:\s*:\s*[^=;]*)?\s*=\s*([A-Za-z_][A-Za-z0-9_]*)\s*;",
                  code)
    if m:
        src = m.group(1)
        target_kind = _declared_kind(code, symbol)
        src_bounds = _annotated_bounds(code, src)
        if src_bounds:
            return target_kind, src_bounds
        size = _fixed_array_size(code, src)
        if size is not None:
            if target_kind == PointerKind.NT_ARR:
                return target_kind, print_bounds(nt_count_from_array(size))
            return target_kind, f"count({size})"

    return None  # R5


def _balanced_arg(code: str, open_paren: int) -> str:
    depth = 0
    for i in range(open_paren, len(code)):
        if code[i] == "(":
            depth += 1
        elif code[i] == ")":
            depth -= 1
            if depth == 0:
                return code[open_paren + 1:i]
    return ""


def _count_from_malloc(arg: str) -> str:
    arg = " ".join(arg.split())
    m = re.fullmatch(r"(.+?)\s*\*\s*sizeof\s*\(.*\)", arg)
    if m:
        return m.group(1).strip().strip("()").strip()
    m = re.fullmatch(r"sizeof\s*\([^()]*\)\s*\*\s*(.+)", arg)
    if m:
        return m.group(1).strip().strip("()").strip()
    return ""


def _declared_kind(code: str, symbol: str) -> PointerKind:
    m = re.search(rf"\b(ptr|arr|nt_arr)\s*<[^<>]*(?:<[^<>]*>)?[^<>]*>\s*{re.escape(symbol)}\b",
                  code)
    if m:
        return PointerKind(m.group(1))
    return PointerKind.ARR


def _annotated_bounds(code: str, symbol: str) -> str:
    m = re.search(rf"\b(?:ptr|arr|nt_arr)\s*<[^<>]*(?:<[^<>]*>)?[^<>]*>\s*{re.escape(symbol)}\b",
                  code)
    if not m:
        return ""
    ann, _ = _scan_annotation(code, m.end())
    if not ann:
        return ""
    return print_bounds(parse_bounds(ann))


def _fixed_array_size(code: str, symbol: str) -> int | None:
    m = re.search(rf"\b{re.escape(symbol)}\s*\[\s*(\d+)\s*\]", code)
    if m:
        return int(m.group(1))
    return None
