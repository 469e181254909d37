"""Parse multi-file C (or partially converted Checked C) sources into
top-level declarations.

The parser is deliberately lightweight: token-level scanning plus brace
matching is enough to find declaration boundaries, names, signatures and
reference sets. It is not a C frontend and performs no macro expansion,
no header resolution and no type checking.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import EncodingError, IoError, ParseError

C_KEYWORDS = {
    "auto", "break", "case", "char", "const", "continue", "default", "do",
    "double", "else", "enum", "extern", "float", "for", "goto", "if",
    "inline", "int", "long", "register", "restrict", "return", "short",
    "signed", "sizeof", "static", "struct", "switch", "typedef", "union",
    "unsigned", "void", "volatile", "while",
}

TYPE_STARTERS = {
    "void", "char", "short", "int", "long", "float", "double", "signed",
    "unsigned", "const", "static", "extern", "register", "volatile",
    "struct", "union", "enum", "inline",
}

CHECKED_TEMPLATES = ("ptr<", "arr<", "nt_arr<")

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class DeclKind(str, Enum):
    PROCEDURE = "proc"
    TYPEDECL = "type"
    GLOBAL = "global"
    MACRO = "macro"


@dataclass
class SourceUnit:
    """One input file, kept verbatim."""

    path: str
    text: str
    line_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.line_index:
            self.line_index = [0] + [m.end() for m in re.finditer(r"\n", self.text)]

    def line_of(self, offset: int) -> int:
        """1-based line containing the character offset."""
        lo, hi = 0, len(self.line_index) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.line_index[mid] <= offset:
                lo = mid
            else:
                hi = mid - 1
        return lo + 1


@dataclass
class DeclarationMeta:
    params: list[tuple[str, str]] = field(default_factory=list)
    locals: list[tuple[str, str]] = field(default_factory=list)
    return_type: str = ""
    referenced_names: set[str] = field(default_factory=set)
    signature_text: str = ""


@dataclass
class Declaration:
    """A top-level program element: procedure, type, global or macro."""

    id: str
    kind: DeclKind
    name: str
    unit_path: str
    start: int          # character offset into the owning unit
    end: int            # exclusive
    start_line: int
    end_line: int
    code: str
    meta: DeclarationMeta = field(default_factory=DeclarationMeta)
    has_body: bool = True   # False for merged-away prototypes kept as the node

    @property
    def span(self) -> tuple[str, int, int]:
        return (self.unit_path, self.start_line, self.end_line)


def mask_comments(text: str) -> str:
    """Replace comment bodies with spaces, preserving length and newlines.

    String and character literals are left intact (their contents may be
    needed for pattern recognition) but comment openers inside them are
    ignored correctly.
    """
    return _mask(text, mask_literals=False)


def mask_comments_and_literals(text: str) -> str:
    """Replace comments and string/char literal contents with spaces."""
    return _mask(text, mask_literals=True)


def _mask(text: str, mask_literals: bool) -> str:
    out = list(text)
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "/" and i + 1 < n and text[i + 1] == "*":
            j = text.find("*/", i + 2)
            j = n if j < 0 else j + 2
            for k in range(i, j):
                if text[k] != "\n":
                    out[k] = " "
            i = j
        elif c == "/" and i + 1 < n and text[i + 1] == "/":
            j = text.find("\n", i)
            j = n if j < 0 else j
            for k in range(i, j):
                out[k] = " "
            i = j
        elif c in "\"'":
            quote = c
            j = i + 1
            while j < n:
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == quote or text[j] == "\n":
                    break
                j += 1
            j = min(j, n - 1)
            if mask_literals:
                for k in range(i + 1, j):
                    if text[k] != "\n":
                        out[k] = " "
            i = j + 1
        else:
            i += 1
    return "".join(out)


def identifier_tokens(text: str) -> list[str]:
    """Identifier tokens of already-masked text, in occurrence order."""
    return _IDENT_RE.findall(text)


def parse_units(paths: list[str | Path]) -> list[SourceUnit]:
    units = []
    for p in paths:
        path = Path(p)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise IoError(f"cannot read {path}: {e.strerror or e}") from e
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EncodingError(f"{path} is not UTF-8 text") from e
        if "\x00" in text:
            raise EncodingError(f"{path} contains NUL bytes; not a text file")
        units.append(SourceUnit(path=str(path), text=text))
    return units


@dataclass
class _RawDecl:
    kind: DeclKind
    name: str
    start: int
    end: int
    has_body: bool


def _scan_unit(unit: SourceUnit) -> list[_RawDecl]:
    """Split a unit into raw top-level constructs by brace matching."""
    text = unit.text
    masked = mask_comments_and_literals(text)
    n = len(text)
    decls: list[_RawDecl] = []
    i = 0
    while i < n:
        c = masked[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c == "/":
            # Masked comments are spaces; a surviving slash is stray content.
            i += 1
            continue
        if c == "#":
            i = _scan_directive(unit, masked, i, decls)
            continue
        i = _scan_construct(unit, masked, i, decls)
    return decls


def _line_end(masked: str, i: int) -> int:
    """End offset of the logical line at i, following backslash continuations."""
    n = len(masked)
    while True:
        j = masked.find("\n", i)
        if j < 0:
            return n
        k = j - 1
        while k >= 0 and masked[k] in " \t\r":
            k -= 1
        if k >= 0 and masked[k] == "\\":
            i = j + 1
            continue
        return j


def _scan_directive(unit: SourceUnit, masked: str, i: int, decls: list[_RawDecl]) -> int:
    end = _line_end(masked, i)
    line = masked[i:end]
    m = re.match(r"#\s*define\s+([A-Za-z_][A-Za-z0-9_]*)", line)
    if m:
        decls.append(_RawDecl(DeclKind.MACRO, m.group(1), i, end, has_body=True))
    # #include and conditional directives are gap text: recorded by position,
    # never expanded, never a declaration.
    return end


def _scan_construct(unit: SourceUnit, masked: str, start: int, decls: list[_RawDecl]) -> int:
    n = len(masked)
    depth_paren = 0
    depth_brace = 0
    saw_brace = False
    header_end = -1          # offset of the first top-level '{'
    i = start
    while i < n:
        c = masked[i]
        if c == "#":
            # Conditional directives inside a construct: text is scanned as-is;
            # unbalanced braces across branches surface as a ParseError below.
            i = _line_end(masked, i)
            continue
        if c == "(":
            depth_paren += 1
        elif c == ")":
            depth_paren -= 1
            if depth_paren < 0:
                raise ParseError("unbalanced ')'", unit.path, unit.line_of(i))
        elif c == "{":
            if depth_brace == 0 and depth_paren == 0 and header_end < 0:
                header_end = i
            depth_brace += 1
            saw_brace = True
        elif c == "}":
            depth_brace -= 1
            if depth_brace < 0:
                raise ParseError("unbalanced '}'", unit.path, unit.line_of(i))
            if depth_brace == 0 and depth_paren == 0:
                header = masked[start:header_end if header_end >= 0 else i]
                if _is_function_header(header):
                    end = i + 1
                    _classify_construct(unit, masked, start, end, decls, has_body=True)
                    return end
                # struct/union/enum/typedef/initializer: runs on to the ';'
        elif c == ";" and depth_brace == 0 and depth_paren == 0:
            end = i + 1
            _classify_construct(unit, masked, start, end, decls, has_body=saw_brace)
            return end
        i += 1
    raise ParseError("unterminated declaration at end of file",
                     unit.path, unit.line_of(start))


def _is_function_header(header: str) -> bool:
    """Header text (up to the '{') shaped like a function definition."""
    stripped = header.rstrip()
    if not stripped.endswith(")"):
        return False
    first = _IDENT_RE.match(stripped.lstrip())
    if first and first.group(0) == "typedef":
        return False
    if "=" in _strip_parens(stripped):
        return False
    return True


def _strip_parens(text: str) -> str:
    out = []
    depth = 0
    for c in text:
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif depth == 0:
            out.append(c)
    return "".join(out)


def _classify_construct(unit: SourceUnit, masked: str, start: int, end: int,
                        decls: list[_RawDecl], has_body: bool) -> None:
    snippet = masked[start:end]
    tokens = identifier_tokens(snippet)
    if not tokens:
        return  # a stray ';'
    line = unit.line_of(start)
    first = tokens[0]

    if first == "typedef":
        name = _typedef_name(snippet)
        if not name:
            raise ParseError("cannot determine typedef name", unit.path, line)
        decls.append(_RawDecl(DeclKind.TYPEDECL, name, start, end, has_body))
        return

    # function shape first: a procedure may return `struct X`
    header = snippet[:snippet.index("{")] if "{" in snippet else snippet
    name = _callable_name(header)
    if name and "(" in header and "=" not in _strip_parens(header) \
            and not re.search(r"\(\s*\*", header.split(name)[0] + name):
        decls.append(_RawDecl(DeclKind.PROCEDURE, name, start, end,
                              has_body="{" in snippet))
        return

    words = [t for t in tokens if t not in ("static", "extern", "const", "inline")]
    if words and words[0] in ("struct", "union", "enum") and "{" in snippet:
        if len(words) < 2:
            raise ParseError("anonymous top-level struct/union/enum",
                             unit.path, line)
        decls.append(_RawDecl(DeclKind.TYPEDECL, words[1], start, end, True))
        return
    if words and words[0] in ("struct", "union", "enum") and "{" not in snippet \
            and len(words) == 2 and snippet.rstrip().endswith(";"):
        # forward type declaration: struct S;
        decls.append(_RawDecl(DeclKind.TYPEDECL, words[1], start, end, False))
        return

    gname = _global_name(snippet)
    if not gname:
        raise ParseError("unrecognized top-level construct", unit.path, line)
    is_extern = "extern" in tokens
    decls.append(_RawDecl(DeclKind.GLOBAL, gname, start, end, has_body=not is_extern))


def _typedef_name(snippet: str) -> str:
    body = snippet.rstrip().rstrip(";")
    # Drop {...} bodies so the name is the trailing declarator.
    flat = []
    depth = 0
    for c in body:
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
        elif depth == 0:
            flat.append(c)
    idents = identifier_tokens("".join(flat))
    for tok in reversed(idents):
        if tok not in C_KEYWORDS:
            return tok
    return ""


def _callable_name(header: str) -> str:
    """Identifier directly before the first top-level '(' of a header."""
    depth = 0
    for m in re.finditer(r"[(){]", header):
        if m.group(0) == "(" and depth == 0:
            before = header[:m.start()].rstrip()
            im = re.search(r"([A-Za-z_][A-Za-z0-9_]*)$", before)
            if im and im.group(1) not in C_KEYWORDS:
                return im.group(1)
            return ""
        if m.group(0) == "(":
            depth += 1
        elif m.group(0) == ")":
            depth -= 1
    return ""


def _global_name(snippet: str) -> str:
    body = snippet.rstrip().rstrip(";")
    body = _annotation_free(body)
    stop = len(body)
    for ch in ("=", "["):
        k = body.find(ch)
        if 0 <= k < stop:
            stop = k
    idents = [t for t in identifier_tokens(body[:stop]) if t not in C_KEYWORDS]
    return idents[-1] if idents else ""


def _annotation_free(decl_text: str) -> str:
    """Declarator text with any ': count(..)' style annotation removed."""
    depth = 0
    for i, c in enumerate(decl_text):
        if c in "(<":
            depth += 1
        elif c in ")>":
            depth -= 1
        elif c == ":" and depth == 0:
            return decl_text[:i]
    return decl_text


def extract_declarations(units: list[SourceUnit]) -> list[Declaration]:
    """All top-level declarations across units, in file order, linked.

    Forward declarations (procedure prototypes, extern globals, bare
    `struct S;`) merge into the node that carries the definition; their
    text survives as inter-declaration gap.
    """
    raw: list[tuple[SourceUnit, _RawDecl]] = []
    for unit in units:
        for rd in _scan_unit(unit):
            raw.append((unit, rd))

    defs: dict[tuple[DeclKind, str], tuple[SourceUnit, _RawDecl]] = {}
    for unit, rd in raw:
        key = (rd.kind, rd.name)
        prev = defs.get(key)
        if prev is None:
            defs[key] = (unit, rd)
            continue
        if prev[1].has_body and rd.has_body:
            raise ParseError(
                f"duplicate definition of {rd.kind.value} '{rd.name}' "
                f"(also defined at {prev[0].path}:{prev[0].line_of(prev[1].start)})",
                unit.path, unit.line_of(rd.start))
        if rd.has_body:
            defs[key] = (unit, rd)

    decls: list[Declaration] = []
    for unit, rd in raw:
        if defs[(rd.kind, rd.name)][1] is not rd:
            continue  # merged-away forward declaration: becomes gap text
        code = unit.text[rd.start:rd.end]
        d = Declaration(
            id=f"{rd.kind.value}:{rd.name}",
            kind=rd.kind,
            name=rd.name,
            unit_path=unit.path,
            start=rd.start,
            end=rd.end,
            start_line=unit.line_of(rd.start),
            end_line=unit.line_of(max(rd.start, rd.end - 1)),
            code=code,
            has_body=rd.has_body,
        )
        decls.append(d)

    universe = {d.name for d in decls}
    typedef_names = {d.name for d in decls if d.kind == DeclKind.TYPEDECL}
    for d in decls:
        if d.kind == DeclKind.MACRO:
            continue  # macros carry no metadata
        fill_meta(d, typedef_names)
        d.meta.referenced_names = scan_references(d, universe)
    return decls


def fill_meta(d: Declaration, typedef_names: set[str]) -> None:
    """Populate params/locals/signature for a declaration from its code."""
    if d.kind != DeclKind.PROCEDURE:
        return
    masked = mask_comments_and_literals(d.code)
    brace = masked.find("{")
    sig_end = brace if brace >= 0 else len(d.code)
    d.meta.signature_text = d.code[:sig_end].rstrip()
    if not d.meta.signature_text:
        d.meta.signature_text = d.code

    header = masked[:sig_end]
    d.meta.params = parse_params(header)
    lp = header.find("(")
    if lp > 0:
        before = header[:lp].rstrip()
        m = re.search(r"([A-Za-z_][A-Za-z0-9_]*)$", before)
        if m:
            d.meta.return_type = before[:m.start()].strip()
    if brace >= 0:
        d.meta.locals = scan_locals(masked[brace:], typedef_names)


def parse_params(header: str) -> list[tuple[str, str]]:
    lp = header.find("(")
    if lp < 0:
        return []
    depth = 0
    rp = -1
    for i in range(lp, len(header)):
        if header[i] == "(":
            depth += 1
        elif header[i] == ")":
            depth -= 1
            if depth == 0:
                rp = i
                break
    if rp < 0:
        return []
    inner = header[lp + 1:rp]
    params = []
    for part in _split_top(inner, ","):
        part = _annotation_free(part).strip()
        if not part or part == "void" or part == "...":
            continue
        part = re.sub(r"\[[^\]]*\]\s*$", "", part).strip()
        m = re.search(r"([A-Za-z_][A-Za-z0-9_]*)\s*$", part)
        if not m:
            continue
        name = m.group(1)
        type_text = part[:m.start()].strip()
        params.append((name, type_text))
    return params


def _split_top(text: str, sep: str) -> list[str]:
    parts = []
    depth = 0
    cur = []
    for c in text:
        if c in "(<[":
            depth += 1
        elif c in ")>]":
            depth -= 1
        if c == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(c)
    parts.append("".join(cur))
    return parts


_BASE_TYPE_WORDS = {"void", "char", "short", "int", "long", "float", "double",
                    "unsigned", "signed", "const", "static", "register",
                    "volatile", "struct", "union", "enum"}

_DECL_HEAD_RE = re.compile(
    r"^\s*((?:(?:const|static|register|volatile|unsigned|signed|struct|union|enum)\s+)*"
    r"[A-Za-z_][A-Za-z0-9_]*(?:\s*<[^<>;{}]*>)?"
    r"(?:\s+(?:unsigned|signed|int|long|short|char|double))*"
    r"(?:\s*\*+\s*|\s+)[*\s]*)"
    r"([A-Za-z_][A-Za-z0-9_]*)\s*(\[[^\]]*\])?\s*(?:$|[=:,])")


def scan_locals(masked_body: str, typedef_names: set[str]) -> list[tuple[str, str]]:
    """Local variable declarations found in a (masked) procedure body.

    Pattern-based and intentionally permissive: it exists to answer scope
    questions, where over-approximation is preferable to missing a name.
    """
    found: list[tuple[str, str]] = []
    seen = set()
    for segment in re.split(r"[;{}]", masked_body):
        segment = segment.strip()
        fm = re.match(r"for\s*\(\s*", segment)
        if fm:
            segment = segment[fm.end():]
        m = _DECL_HEAD_RE.match(segment)
        if not m:
            continue
        type_text, name = m.group(1).strip(), m.group(2)
        head = _IDENT_RE.match(type_text.lstrip("*").lstrip())
        if not head:
            continue
        is_checked = any(type_text.startswith(t) for t in CHECKED_TEMPLATES)
        if not (head.group(0) in _BASE_TYPE_WORDS
                or head.group(0) in typedef_names or is_checked):
            continue
        if name in C_KEYWORDS or name in seen:
            continue
        seen.add(name)
        found.append((name, type_text))
        # plain comma declarator lists (no initializers) share the type
        rest = segment[m.end() - 1:] if segment[m.end() - 1:].startswith(",") else ""
        for extra in re.finditer(r",\s*\**\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?=,|$)", rest):
            nm = extra.group(1)
            if nm not in seen and nm not in C_KEYWORDS:
                seen.add(nm)
                found.append((nm, type_text))
    return found


def scan_references(d: Declaration, universe: set[str]) -> set[str]:
    """Names from the universe occurring as tokens in d's code.

    Comments and string/char literals never contribute tokens. Procedure
    names count whether used as call targets or as function-pointer
    values (a deliberate over-approximation).
    """
    masked = mask_comments_and_literals(d.code)
    if d.kind == DeclKind.MACRO:
        # Skip the '#define NAME' prefix so a macro mentioning itself is not
        # self-referential by construction; macros get no out-edges anyway.
        masked = re.sub(r"#\s*define\s+[A-Za-z_][A-Za-z0-9_]*", " ", masked, count=1)
    return {t for t in identifier_tokens(masked) if t in universe}


def reconstruct_unit(unit: SourceUnit, decls: list[Declaration],
                     replacements: dict[str, str] | None = None,
                     insertions: dict[str, list[str]] | None = None) -> str:
    """Rebuild a unit's text from gap text plus (possibly updated) code.

    replacements maps declaration id to its current code; insertions maps an
    anchor declaration id to texts placed immediately before the anchor.
    With neither argument the original text is reproduced byte-for-byte.
    """
    replacements = replacements or {}
    insertions = insertions or {}
    own = sorted((d for d in decls if d.unit_path == unit.path),
                 key=lambda d: d.start)
    out = []
    pos = 0
    for d in own:
        out.append(unit.text[pos:d.start])
        for ins in insertions.get(d.id, []):
            out.append(ins)
            if not ins.endswith("\n"):
                out.append("\n")
            out.append("\n")
        out.append(replacements.get(d.id, d.code))
        pos = d.end
    out.append(unit.text[pos:])
    return "".join(out)
