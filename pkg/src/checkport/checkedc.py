"""Checked C pointer kinds, bounds expressions and the typ3c-lite classifier.

The abbreviated spellings used throughout (`ptr<T>`, `arr<T>`, `nt_arr<T>`)
stand for `_Ptr<T>`, `_Array_ptr<T>` and `_Nt_array_ptr<T>`; bounds attach
after a colon as `count(e)`, `byte_count(e)` or `bounds(lo, hi)`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import BoundsSyntaxError, DegenerateArray
from .source_model import (
    DeclKind,
    Declaration,
    mask_comments,
    mask_comments_and_literals,
)


class PointerKind(str, Enum):
    PTR = "ptr"
    ARR = "arr"
    NT_ARR = "nt_arr"
    UNCHECKED = "unchecked"


class SiteScope(str, Enum):
    PARAM = "param"
    LOCAL = "local"
    GLOBAL = "global"
    FIELD = "field"
    RETURN = "return"


# ---------------------------------------------------------------------------
# Bounds expression grammar: identifiers, integer literals, + - * /, parens.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Num | Var | BinOp

_TOKEN_RE = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_]*)|([()+\-*/]))")


def parse_expr(text: str) -> Expr:
    tokens = _tokenize_expr(text)
    expr, pos = _parse_sum(tokens, 0)
    if pos != len(tokens):
        raise BoundsSyntaxError(f"trailing tokens in bounds expression: {text!r}")
    return expr


def _tokenize_expr(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise BoundsSyntaxError(f"bad character in bounds expression: {text!r}")
            break
        tokens.append(m.group(1) or m.group(2) or m.group(3))
        pos = m.end()
    if not tokens:
        raise BoundsSyntaxError("empty bounds expression")
    return tokens


def _parse_sum(tokens, pos):
    left, pos = _parse_product(tokens, pos)
    while pos < len(tokens) and tokens[pos] in "+-":
        op = tokens[pos]
        right, pos = _parse_product(tokens, pos + 1)
        left = BinOp(op, left, right)
    return left, pos


def _parse_product(tokens, pos):
    left, pos = _parse_atom(tokens, pos)
    while pos < len(tokens) and tokens[pos] in "*/":
        op = tokens[pos]
        right, pos = _parse_atom(tokens, pos + 1)
        left = BinOp(op, left, right)
    return left, pos


def _parse_atom(tokens, pos):
    if pos >= len(tokens):
        raise BoundsSyntaxError("unexpected end of bounds expression")
    tok = tokens[pos]
    if tok == "(":
        expr, pos = _parse_sum(tokens, pos + 1)
        if pos >= len(tokens) or tokens[pos] != ")":
            raise BoundsSyntaxError("unbalanced parentheses in bounds expression")
        return expr, pos + 1
    if tok.isdigit():
        return Num(int(tok)), pos + 1
    if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
        return Var(tok), pos + 1
    raise BoundsSyntaxError(f"unexpected token {tok!r} in bounds expression")


def expr_identifiers(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, BinOp):
        return expr_identifiers(expr.left) | expr_identifiers(expr.right)
    return set()


def _prec(expr: Expr) -> int:
    if isinstance(expr, BinOp):
        return 1 if expr.op in "+-" else 2
    return 3


def print_expr(expr: Expr) -> str:
    """Compact text with minimal parentheses; inverse of parse_expr."""
    if isinstance(expr, Num):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    lhs = print_expr(expr.left)
    rhs = print_expr(expr.right)
    if _prec(expr.left) < _prec(expr):
        lhs = f"({lhs})"
    # parsing is left-associative, so a nested right operand keeps its parens
    if _prec(expr.right) <= _prec(expr):
        rhs = f"({rhs})"
    return f"{lhs} {expr.op} {rhs}"


def normalize_expr(expr: Expr) -> str:
    """Canonical text: commutative chains of + and * sorted, no whitespace."""
    return _norm(expr)


def _norm(expr: Expr) -> str:
    if isinstance(expr, Num):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if expr.op in "+*":
        terms = sorted(_flatten(expr, expr.op))
        return expr.op.join(t if _simple(t) else f"({t})" for t in terms)
    lhs, rhs = _norm(expr.left), _norm(expr.right)
    if not _simple(lhs):
        lhs = f"({lhs})"
    if not _simple(rhs):
        rhs = f"({rhs})"
    return f"{lhs}{expr.op}{rhs}"


def _flatten(expr: Expr, op: str) -> list[str]:
    if isinstance(expr, BinOp) and expr.op == op:
        return _flatten(expr.left, op) + _flatten(expr.right, op)
    return [_norm(expr)]


def _simple(text: str) -> bool:
    return re.fullmatch(r"[A-Za-z0-9_]+", text) is not None


# ---------------------------------------------------------------------------
# Bounds annotations
# ---------------------------------------------------------------------------

class BoundsForm(str, Enum):
    NONE = "none"
    COUNT = "count"
    BYTE_COUNT = "byte_count"
    BOUNDS = "bounds"


@dataclass(frozen=True)
class BoundsAnnotation:
    form: BoundsForm = BoundsForm.NONE
    exprs: tuple[Expr, ...] = ()

    def __bool__(self) -> bool:
        return self.form != BoundsForm.NONE

    def identifiers(self) -> set[str]:
        out: set[str] = set()
        for e in self.exprs:
            out |= expr_identifiers(e)
        return out


NO_BOUNDS = BoundsAnnotation()


def parse_bounds(text: str) -> BoundsAnnotation:
    """Parse the annotation text that follows the colon of a declaration."""
    text = text.strip()
    if not text:
        return NO_BOUNDS
    m = re.fullmatch(r"(count|byte_count|bounds)\s*\((.*)\)", text, re.S)
    if not m:
        raise BoundsSyntaxError(f"unrecognized bounds form: {text!r}")
    form = BoundsForm(m.group(1))
    inner = m.group(2)
    if form == BoundsForm.BOUNDS:
        parts = _split_args(inner)
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise BoundsSyntaxError(f"bounds(lo, hi) needs two expressions: {text!r}")
        return BoundsAnnotation(form, (parse_expr(parts[0]), parse_expr(parts[1])))
    return BoundsAnnotation(form, (parse_expr(inner),))


def _split_args(inner: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for c in inner:
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth < 0:
                raise BoundsSyntaxError(f"unbalanced parens: {inner!r}")
        if c == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(c)
    parts.append("".join(cur))
    return parts


def print_bounds(b: BoundsAnnotation) -> str:
    if not b:
        return ""
    args = ", ".join(print_expr(e) for e in b.exprs)
    return f"{b.form.value}({args})"


def normalize_bounds(b: BoundsAnnotation) -> str:
    if not b:
        return ""
    args = ",".join(normalize_expr(e) for e in b.exprs)
    return f"{b.form.value}({args})"


def nt_count_from_array(array_size: int) -> BoundsAnnotation:
    """count() for an nt_arr view of a fixed array: size minus the null slot."""
    if array_size < 1:
        raise DegenerateArray("cannot form an nt_arr count for a zero-length array")
    return BoundsAnnotation(BoundsForm.COUNT, (Num(array_size - 1),))


# ---------------------------------------------------------------------------
# Annotation sites
# ---------------------------------------------------------------------------

@dataclass
class AnnotationSite:
    decl_id: str
    symbol: str
    kind: PointerKind
    bounds: BoundsAnnotation = NO_BOUNDS
    scope: SiteScope = SiteScope.LOCAL
    struct_name: str = ""        # for FIELD sites
    line: int = 0                # 1-based within the declaration's code
    element_type: str = ""       # pointee type text
    nested: bool = False         # pointer-to-pointer / arr<arr<T>>
    array_size: int | None = None  # fixed array declarator, if any
    implicit: bool = False       # fixed arrays carry their bound implicitly

    @property
    def annotated(self) -> bool:
        return bool(self.bounds) or self.implicit


def validate_scope(site: AnnotationSite, meta, globals_: set[str],
                   fields: set[str], macros: set[str] | None = None):
    """Check every identifier of the site's bounds against visible names.

    Returns (True, "") when valid, else (False, offending_identifier).
    Visible names: parameters and locals of the owning procedure, globals,
    sibling fields for field sites, and macro names.
    """
    if not site.bounds:
        return True, ""
    visible = set(globals_) | set(macros or ())
    if meta is not None:
        visible |= {n for n, _ in meta.params}
        visible |= {n for n, _ in meta.locals}
    if site.scope == SiteScope.FIELD:
        visible |= set(fields)
    for ident in sorted(site.bounds.identifiers()):
        if ident not in visible:
            return False, ident
    return True, ""


# ---------------------------------------------------------------------------
# Declaration-text site extraction
# ---------------------------------------------------------------------------

_CHECKED_DECL_RE = re.compile(
    r"\b(ptr|arr|nt_arr)\s*<\s*([^<>]*?(?:<[^<>]*>)?[^<>]*?)\s*>\s*"
    r"([A-Za-z_][A-Za-z0-9_]*)")


def _scan_annotation(text: str, pos: int) -> tuple[str, int]:
    """Annotation text starting at a ':' after pos, with balanced parens.

    Returns (annotation, end_offset); ('', pos) when none present.
    """
    m = re.match(r"\s*:\s*(count|byte_count|bounds)\s*\(", text[pos:])
    if not m:
        return "", pos
    i = pos + m.end()
    depth = 1
    while i < len(text) and depth:
        if text[i] == "(":
            depth += 1
        elif text[i] == ")":
            depth -= 1
        i += 1
    if depth:
        return "", pos
    return text[pos + m.start(1):i], i

_C_POINTER_DECL_RE = re.compile(
    r"(?:^|[({;,]\s*|\n\s*)"
    r"((?:(?:const|static|register|volatile|unsigned|signed|struct|union|enum)\s+)*"
    r"[A-Za-z_][A-Za-z0-9_]*(?:\s+(?:unsigned|signed|int|long|short|char|double))*"
    r"(?:\s+const)?)\s*"
    r"(\*+)\s*(?:const\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*(?=[=;,)\[]|$)")

_ARRAY_DECL_RE = re.compile(
    r"(?:^|[({;,]\s*|\n\s*)"
    r"((?:(?:const|static|register|volatile|unsigned|signed|struct|union|enum)\s+)*"
    r"[A-Za-z_][A-Za-z0-9_]*(?:\s+(?:unsigned|signed|int|long|short|char|double))*)\s+"
    r"([A-Za-z_][A-Za-z0-9_]*)\s*\[\s*([^\]]*)\]")

_TYPE_WORDS = {"void", "char", "short", "int", "long", "float", "double",
               "unsigned", "signed", "const", "static", "register", "volatile",
               "struct", "union", "enum", "return", "sizeof"}


def extract_sites(d: Declaration, code: str | None = None,
                  typedef_names: set[str] | None = None) -> list[AnnotationSite]:
    """All pointer declaration sites in a declaration's (current) code.

    Recognizes both checked spellings (with or without a bounds annotation)
    and plain C pointer declarators; fixed-size arrays are recorded with
    their size so nt_arr counts can be derived from them.
    """
    code = d.code if code is None else code
    typedef_names = typedef_names or set()
    masked = mask_comments(code)
    struct_name = d.name if d.kind == DeclKind.TYPEDECL else ""
    line_at = _line_lookup(code)
    sites: list[AnnotationSite] = []
    taken: set[str] = set()

    for m in _CHECKED_DECL_RE.finditer(masked):
        kind_txt, inner, symbol = m.group(1), m.group(2), m.group(3)
        if symbol in taken:
            continue
        nested = bool(re.match(r"\s*(ptr|arr|nt_arr)\s*<", inner))
        ann, ann_end = _scan_annotation(masked, m.end())
        following = masked[ann_end or m.end():].lstrip()
        scope = _scope_for(d, symbol, masked, m.start())
        if not ann and following.startswith("("):
            scope = SiteScope.RETURN  # checked return type of a procedure
        bounds = parse_bounds(ann)
        sites.append(AnnotationSite(
            decl_id=d.id, symbol=symbol, kind=PointerKind(kind_txt),
            bounds=bounds, scope=scope,
            struct_name=struct_name, line=line_at(m.start(3)),
            element_type=inner.strip(), nested=nested))
        taken.add(symbol)

    for m in _C_POINTER_DECL_RE.finditer(masked):
        type_text, stars, symbol = m.group(1).strip(), m.group(2), m.group(3)
        if symbol in taken or symbol in _TYPE_WORDS:
            continue
        head = type_text.split()[-1] if type_text.split() else ""
        base_words = set(type_text.split())
        if not (base_words & _TYPE_WORDS or head in typedef_names
                or (typedef_names and head in typedef_names)):
            # unknown head: accept only if it looks like a type identifier
            if head in ("", None) or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", head):
                continue
        element = type_text
        for kw in ("static", "register", "extern"):
            element = re.sub(rf"\b{kw}\b\s*", "", element).strip()
        sites.append(AnnotationSite(
            decl_id=d.id, symbol=symbol, kind=PointerKind.UNCHECKED,
            scope=_scope_for(d, symbol, masked, m.start()),
            struct_name=struct_name, line=line_at(m.start(3)),
            element_type=element, nested=len(stars) > 1))
        taken.add(symbol)

    for m in _ARRAY_DECL_RE.finditer(masked):
        type_text, symbol, size_txt = m.group(1).strip(), m.group(2), m.group(3)
        if symbol in taken or symbol in _TYPE_WORDS:
            continue
        head = type_text.split()[-1] if type_text.split() else ""
        if not (set(type_text.split()) & _TYPE_WORDS or head in typedef_names):
            continue
        size = int(size_txt) if size_txt.strip().isdigit() else None
        sites.append(AnnotationSite(
            decl_id=d.id, symbol=symbol, kind=PointerKind.ARR,
            scope=_scope_for(d, symbol, masked, m.start()),
            struct_name=struct_name, line=line_at(m.start(2)),
            element_type=type_text, array_size=size, implicit=True))
        taken.add(symbol)

    sites.sort(key=lambda s: (s.line, s.symbol))
    return sites


def _line_lookup(code: str):
    starts = [0] + [m.end() for m in re.finditer(r"\n", code)]

    def line_at(offset: int) -> int:
        lo, hi = 0, len(starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if starts[mid] <= offset:
                lo = mid
            else:
                hi = mid - 1
        return lo + 1

    return line_at


def _scope_for(d: Declaration, symbol: str, masked: str, offset: int) -> SiteScope:
    if d.kind == DeclKind.GLOBAL:
        return SiteScope.GLOBAL
    if d.kind == DeclKind.TYPEDECL:
        return SiteScope.FIELD
    if symbol in {n for n, _ in d.meta.params}:
        return SiteScope.PARAM
    brace = masked.find("{")
    if brace >= 0 and offset < brace:
        return SiteScope.PARAM
    return SiteScope.LOCAL


# ---------------------------------------------------------------------------
# typ3c-lite: pattern-based pointer classification
# ---------------------------------------------------------------------------

_STRING_FNS = ("strlen", "strcpy", "strcmp", "strcat")


def classify_pointer_lite(d: Declaration, code: str | None = None,
                          typedef_names: set[str] | None = None) -> list[AnnotationSite]:
    """Assign pointer kinds from local usage patterns.

    nt_arr: the symbol drives a null-character scan or feeds a recognized
    string function. arr: indexed or used in pointer arithmetic. unchecked:
    cast between pointer and integer. ptr: everything else. Explicit checked
    spellings pass through unchanged.
    """
    code = d.code if code is None else code
    sites = extract_sites(d, code, typedef_names)
    body = mask_comments(code)
    int_names = _integer_typed_names(d)

    out = []
    for site in sites:
        if site.kind != PointerKind.UNCHECKED or site.implicit:
            out.append(site)  # explicit spelling or fixed array: never downgraded
            continue
        sym = re.escape(site.symbol)
        kind = PointerKind.PTR
        if _int_pointer_cast(body, sym, int_names):
            kind = PointerKind.UNCHECKED
        elif _null_scan(body, sym):
            kind = PointerKind.NT_ARR
        elif _indexed_or_arith(body, sym):
            kind = PointerKind.ARR
        out.append(replace(site, kind=kind))
    return out


def _null_scan(body: str, sym: str) -> bool:
    if re.search(rf"\*\s*{sym}\s*!=\s*(?:0\b|'\\0')", body):
        return True
    if re.search(rf"\*\s*{sym}\+\+\s*!=\s*(?:0\b|'\\0')", body):
        return True
    for fn in _STRING_FNS:
        call = re.search(rf"\b{fn}\s*\(([^()]*)\)", body)
        if call and re.search(rf"(?:^|[,(\s]){sym}(?:$|[,)\s])", call.group(1)):
            return True
    return False


def _indexed_or_arith(body: str, sym: str) -> bool:
    if re.search(rf"\b{sym}\s*\[", body):
        return True
    if re.search(rf"\b{sym}\s*(?:\+\+|--|\+=|-=)", body):
        return True
    if re.search(rf"(?:\+\+|--)\s*{sym}\b", body):
        return True
    if re.search(rf"\*\s*\(\s*{sym}\s*[+-]", body):
        return True
    if re.search(rf"\b{sym}\s*=\s*{sym}\s*[+-]", body):
        return True
    return False


def _int_pointer_cast(body: str, sym: str, int_names: set[str]) -> bool:
    # pointer cast to integer: (int) p / (long) p
    if re.search(rf"\(\s*(?:unsigned\s+|signed\s+)?(?:int|long|short)\s*\)\s*\(?\s*{sym}\b", body):
        return True
    # pointer assigned from a cast of an integer-typed name: p = (T*) x
    m = re.search(rf"\b{sym}\s*=\s*\(\s*[^()]*\*\s*\)\s*\(?\s*([A-Za-z_][A-Za-z0-9_]*)", body)
    if m and m.group(1) in int_names:
        return True
    return False


def _integer_typed_names(d: Declaration) -> set[str]:
    names = set()
    for name, type_text in d.meta.params + d.meta.locals:
        words = set(type_text.split())
        if words & {"int", "long", "short", "unsigned", "signed", "size_t"} \
                and "*" not in type_text:
            names.add(name)
    return names


# ---------------------------------------------------------------------------
# Declaration-line rewriting and spelling conversion
# ---------------------------------------------------------------------------

def annotate_declaration_line(line: str, symbol: str, kind: PointerKind,
                              bounds_text: str) -> str:
    """Rewrite one declaration line so `symbol` carries kind and bounds.

    Works on either plain C pointer declarators or existing checked
    spellings; everything around the declarator (indentation, trailing
    comma or initializer) is preserved.
    """
    sym = re.escape(symbol)
    ann = f" : {bounds_text}" if bounds_text else ""
    spelled = {PointerKind.PTR: "ptr", PointerKind.ARR: "arr",
               PointerKind.NT_ARR: "nt_arr"}.get(kind)

    m = re.search(
        rf"\b(ptr|arr|nt_arr)\s*<([^<>]*(?:<[^<>]*>)?[^<>]*)>\s*{sym}\b", line)
    if m:
        _, end = _scan_annotation(line, m.end())
        new = f"{spelled or m.group(1)}<{m.group(2)}> {symbol}{ann}"
        return line[:m.start()] + new + _rejoin(line[end:])

    m = re.search(
        rf"((?:(?:const|static|register|volatile|unsigned|signed|struct|union|enum)\s+)*"
        rf"[A-Za-z_][A-Za-z0-9_]*(?:\s+(?:unsigned|signed|int|long|short|char|double))*"
        rf"(?:\s+const)?)\s*(\*+)\s*{sym}\b\s*", line)
    if m:
        elem = re.sub(r"\b(?:static|register|extern)\b\s*", "", m.group(1)).strip()
        if len(m.group(2)) > 1:
            elem = f"{elem}{'*' * (len(m.group(2)) - 1)}"
        storage = ""
        stm = re.match(r"(?:static|extern)\s+", m.group(1))
        if stm:
            storage = stm.group(0)
        new = f"{storage}{spelled}<{elem}> {symbol}{ann}"
        return line[:m.start()] + new + _rejoin(line[m.end():])
    return line


def _rejoin(tail: str) -> str:
    if tail.startswith("="):
        return " " + tail
    return tail


def strip_annotation(line: str, symbol: str) -> str:
    """Remove the bounds annotation attached to `symbol` on this line."""
    m = re.search(rf"\b{re.escape(symbol)}\b", line)
    if not m:
        return line
    ann, end = _scan_annotation(line, m.end())
    if not ann:
        return line
    return line[:m.end()] + line[end:]


_LONG_SPELLINGS = (("nt_arr<", "_Nt_array_ptr<"), ("arr<", "_Array_ptr<"),
                   ("ptr<", "_Ptr<"))


def to_long_spelling(text: str) -> str:
    """Convert abbreviated checked-pointer spellings to the full ones."""
    for short, long_ in _LONG_SPELLINGS:
        text = re.sub(rf"\b{re.escape(short)}", long_, text)
    return text
