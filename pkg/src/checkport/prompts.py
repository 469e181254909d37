"""Prompt assembly for the three transformation passes.

Task descriptions and worked examples are fixed constants shipped with the
tool; the rendered prompt always carries its sections in the same order so
that fingerprints are stable and replay works.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

from .checkedc import AnnotationSite, PointerKind
from .errors import PromptTooLarge
from .source_model import Declaration

HISTORY_CAP = 20
DEFAULT_TOKEN_BUDGET = 24000  # ~4 chars per token against a 32k context


class TaskId(str, Enum):
    NESTED_ARRAYS = "nested_arrays"
    BOUNDS_INFERENCE = "bounds_inference"
    GLOBALS_FIELDS = "globals_fields"


@dataclass(frozen=True)
class TaskSpec:
    id: TaskId
    description: str
    example: str


@dataclass
class RefactorHistoryEntry:
    decl_name: str
    old_code: str
    new_code: str

    def __post_init__(self):
        if self.old_code == self.new_code:
            raise ValueError("history entry must record an actual change")


@dataclass
class TaskElements:
    items: list[tuple[str, int]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.items)


@dataclass(frozen=True)
class PromptText:
    rendered: str
    fingerprint: str


CHECKEDC_PREAMBLE = """\
Checked C has three checked pointer types that support the following annotations:

ptr<T>     A pointer to a single value of type T, or null. It is never used
           in pointer arithmetic or indexing, and it carries no bounds
           annotation. The compiler inserts a null check at each dereference.

arr<T>     A pointer to an array of T values. It must carry a bounds
           annotation that tells the compiler how much memory it may access.
           Annotations are written after a colon at the declaration:
             arr<T> p : count(n)          p can access p[0] .. p[n-1]
             arr<T> p : byte_count(n)     p can access n bytes from p
             arr<T> p : bounds(lo, hi)    accesses satisfy lo <= p+i < hi
           Bounds expressions may use variables that are in scope at the
           declaration, integer constants, parentheses and + - * /.

nt_arr<T>  A pointer to a null-terminated array of T (most often a string).
           nt_arr<T> p : count(n) means the array has at least n+1 elements
           and element n is the terminator. The bounds of an nt_arr widen as
           code checks elements against the null character, so
           'while (*p != 0) p++;' is a valid scan of nt_arr<char> p : count(0).
           When a fixed array of size N is viewed as an nt_arr, its count is
           N - 1 (one slot is reserved for the terminator).

Rules that the rewritten code must follow:
- A bounds annotation appears after a colon, directly on the declaration of
  the pointer it describes, for parameters, locals, globals, struct fields
  and return types alike.
- Every identifier used in a bounds expression must be in scope at the
  declaration that carries the annotation.
- Nested array pointers (arr of arr) are not valid Checked C; such types are
  restructured with a helper struct instead.
- Plain C pointers (T*) may be converted to ptr<T>, arr<T> or nt_arr<T>
  according to how they are used.
- Do not change code that needs no change; unchanged declarations keep their
  exact original text.\
"""

REFACTOR_INSTRUCTION = """\
Similar changes have been made in other parts of the code. Given the refactor
history, update the current code accordingly.\
"""

OUTPUT_FORMAT_INSTRUCTION = """\
Each change must be outputted as a block with original lines and refactored
lines in the below format. Output a series of such blocks, one for every change.
The original lines must be copied exactly from the code being transformed.
To insert new lines, include an existing anchor line in both sections.

<<<<ORIGINAL
(the lines to replace, exactly as they appear)
====
>>>>REFACTORED
(the replacement lines)
<<<<END\
"""

NESTED_ARRAYS_DESCRIPTION = """\
You are given a list of Checked C declarations and a partially converted
Checked C code snippet. Array of arr<T> is not supported in Checked C. Your
task is to replace them with an array of struct having a pointer field 'ptr'
and a bounds field 'len'. You will also have to replace the uses of the
nested array with the uses of the struct 'ptr' field instead. Make sure to
update the 'len' field whenever the 'ptr' field is updated.\
"""

NESTED_ARRAYS_EXAMPLE = """\
From:
int foo(arr<arr<int>> a, int i) {
  return a[i][i];
}
To:
// New struct
typedef struct arr_of_int {
  arr<int> ptr : count(len);
  int len;
} arr_of_int;
// type of a changes
int foo(arr<struct arr_of_int> a, int i) {
  // nested pointer access via the ptr field
  return a[i].ptr[i];
}\
"""

BOUNDS_DESCRIPTION = """\
Determine and assign 'count(..)' or 'bounds(.., ..)' expressions for each arr
and nt_arr in the given function. To find valid bounds for a pointer p,
examine all uses of p and set bounds that encompass every access.
Alternatively, adopt the bounds from the pointer from which p was assigned.

You will be provided a list of pointer variable names along with their
declaration line number. You must choose one of the following rules for each
of them.

[A0] Infer a valid bounds expression:
    Provide a 'count(..)' or 'bounds(..,..)' expression at the line of
    declaration. Choose this only when you are completely sure that the
    bounds are valid.

[A1] Say unknown:
    When there is not enough information to infer bounds for a pointer, it is
    okay to leave the annotated line same as the original line. Follow this
    by explaining why enough information is not available. This can be chosen
    when there is not a clear upper bound to all accesses through the pointer
    or the pointer depends on other pointers whose bounds are not known.

[A2] Change an arr to nt_arr:
    If you cannot infer the bounds to arr p but you do know that p is
    terminated with a null character from its use, you can change its type to
    nt_arr. Make sure to also change the pointers that p was derived from to
    nt_arr in such a case. This can also be due to a callee now taking
    nt_arr instead of arr due to an earlier refactor.

[A3] Add a parameter for bounds:
    If you cannot infer a reasonable bound for a pointer parameter, add a new
    parameter to store its bounds and use that in the bounds expression.
    Going ahead, all calls of this function will have to be passed this extra
    bounds argument.\
"""

BOUNDS_EXAMPLE = """\
From:
struct x { int f; int g; }
int foo(arr<struct x> a, int i) {
  int j = a[i].f;
  arr<struct x> p = a;
  return a[j].f;
}
To:
// [A3] As j is read from the heap, the access
// a[j] could be anything. Moreover, j is not
// in scope at line 1. Since 'a' is a pointer
// parameter, add a bounds parameter instead
// of saying 'unknown'.
int foo(arr<struct x> a : count(count_for_a),
  int count_for_a, int i) {
  int j = a[i].f;
  // [A0] As p is assigned a, the bounds for a
  // are valid for p too.
  arr<struct x> p : count(count_for_a) = a;
  return a[j].f;
}

From:
void foo() {
  char a[10]; nt_arr<char> p = a;
}
To:
void foo() {
  char a[10];
  // [A0] When an array is converted to nt_arr
  // the count is the size of the array - 1.
  nt_arr<char> p : count(9) = a;
}\
"""

GLOBALS_DESCRIPTION = """\
You are given a Checked C code snippet, with a history of refactors. The
refactors introduce a new variable to store the bounds of a pointer variable,
which can be a struct field or a global variable. Update the newly introduced
bounds variable with the correct bounds whenever its corresponding pointer
variable is assigned a new value. Make the update in the same statement as
the assignment.\
"""

GLOBALS_EXAMPLE = """\
From:
void foo(arr<struct x> a, int i) {
  a[i].p = malloc(sizeof(int) * 10);
}

To:
struct x {
  int count_for_p;
  arr<int> p: count(count_for_p);
}

void foo(arr<struct x> a, int i){
  a[i].p = malloc(sizeof(int) * 10),
  a[i].count_for_p = 10;
}\
"""

TASKS: dict[TaskId, TaskSpec] = {
    TaskId.NESTED_ARRAYS: TaskSpec(TaskId.NESTED_ARRAYS,
                                   NESTED_ARRAYS_DESCRIPTION,
                                   NESTED_ARRAYS_EXAMPLE),
    TaskId.BOUNDS_INFERENCE: TaskSpec(TaskId.BOUNDS_INFERENCE,
                                      BOUNDS_DESCRIPTION, BOUNDS_EXAMPLE),
    TaskId.GLOBALS_FIELDS: TaskSpec(TaskId.GLOBALS_FIELDS,
                                    GLOBALS_DESCRIPTION, GLOBALS_EXAMPLE),
}

NONE_MARKER = "(none)"

SECTION_TASK = "## Task"
SECTION_OUTPUT = "## Output format"
SECTION_EXAMPLE = "## Example"
SECTION_CONTEXT = "## Context"
SECTION_CODE = "## Code"
SECTION_HISTORY = "## Refactor history"
SECTION_ELEMENTS = "## Task elements"


def estimate_tokens(text: str) -> int:
    return len(text) // 4


def fingerprint_of(rendered: str) -> str:
    return hashlib.sha256(rendered.encode("utf-8")).hexdigest()


def render_prompt(task: TaskSpec, prelude: list[str], code: str,
                  history: list[RefactorHistoryEntry],
                  elements: TaskElements,
                  token_budget: int = DEFAULT_TOKEN_BUDGET) -> PromptText:
    """Assemble the full prompt; section order is fixed.

    Empty prelude/history/elements render as an explicit "(none)" so the
    model is told the section is intentionally empty.
    """
    if not code:
        raise ValueError("cannot render a prompt for empty code")
    parts = [
        CHECKEDC_PREAMBLE,
        "",
        SECTION_TASK,
        task.description,
        "",
        REFACTOR_INSTRUCTION,
        "",
        SECTION_OUTPUT,
        OUTPUT_FORMAT_INSTRUCTION,
        "",
        SECTION_EXAMPLE,
        "Consider this example input and output as a reference.",
        task.example,
        "",
        SECTION_CONTEXT,
        "Here is relevant context for the given code:",
        _render_prelude(prelude),
        "",
        SECTION_CODE,
        "This is the code that must be transformed:",
        code,
        "",
        SECTION_HISTORY,
        "This is a history of the previous changes:",
        _render_history(history),
        "",
        SECTION_ELEMENTS,
        "Perform the given task on these parts of the code:",
        _render_elements(elements),
        "",
    ]
    rendered = "\n".join(parts)
    if estimate_tokens(rendered) > token_budget:
        raise PromptTooLarge(
            f"prompt is ~{estimate_tokens(rendered)} tokens; "
            f"budget is {token_budget}")
    return PromptText(rendered=rendered, fingerprint=fingerprint_of(rendered))


def _render_prelude(prelude: list[str]) -> str:
    if not prelude:
        return NONE_MARKER
    return "\n\n".join(frag.rstrip() for frag in prelude)


def _render_history(history: list[RefactorHistoryEntry]) -> str:
    if not history:
        return NONE_MARKER
    shown = history[:HISTORY_CAP]
    parts = []
    for entry in shown:
        parts.append(f"### {entry.decl_name}")
        parts.append("Before:")
        parts.append(entry.old_code.rstrip())
        parts.append("After:")
        parts.append(entry.new_code.rstrip())
    omitted = len(history) - len(shown)
    if omitted > 0:
        parts.append(f"({omitted} older changes omitted)")
    return "\n".join(parts)


def _render_elements(elements: TaskElements) -> str:
    if not elements:
        return NONE_MARKER
    return "\n".join(f"- {sym} (line {line})" for sym, line in elements.items)


def elements_for(task: TaskSpec, d: Declaration,
                 sites: list[AnnotationSite]) -> TaskElements:
    """Task-specific code elements for d, from the pass's site list.

    Nested-array pass: symbols whose type is being restructured.
    Bounds pass: unannotated arr/nt_arr symbols with declaration lines.
    Globals pass: freshly introduced count_for_* names relevant to d (their
    base pointer occurs in d's code; the count variable itself lives on the
    global or struct declaration).
    """
    items: list[tuple[str, int]] = []
    if task.id == TaskId.NESTED_ARRAYS:
        for s in sites:
            if s.nested:
                items.append((s.symbol, s.line))
    elif task.id == TaskId.BOUNDS_INFERENCE:
        for s in sites:
            if s.kind in (PointerKind.ARR, PointerKind.NT_ARR) \
                    and not s.annotated and s.scope.value != "return":
                items.append((s.symbol, s.line))
    else:
        for s in sites:
            items.append((s.symbol, s.line))
    if task.id != TaskId.GLOBALS_FIELDS:
        for sym, _ in items:
            if sym not in d.code:
                raise ValueError(f"element {sym!r} does not occur in {d.id}")
    return TaskElements(items=items)
