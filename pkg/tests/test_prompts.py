import pytest

from checkport.checkedc import classify_pointer_lite
from checkport.errors import PromptTooLarge
from checkport.prompts import (
    NONE_MARKER,
    TASKS,
    RefactorHistoryEntry,
    TaskElements,
    TaskId,
    elements_for,
    render_prompt,
)
from checkport.source_model import SourceUnit, extract_declarations


def decl_of(text, name=None):
    decls = extract_declarations([SourceUnit(path="t.c", text=text)])
    if name is None:
        return decls[0]
    return next(d for d in decls if d.name == name)


BOUNDS = TASKS[TaskId.BOUNDS_INFERENCE]
NESTED = TASKS[TaskId.NESTED_ARRAYS]
GLOBALS = TASKS[TaskId.GLOBALS_FIELDS]


class TestRenderPrompt:
    def test_section_order_fixed(self):
        p = render_prompt(BOUNDS, [], "int f(void) {\n}\n", [],
                          TaskElements([("p", 1)]))
        text = p.rendered
        markers = ["Checked C has three checked pointer types",
                   "## Task", "Similar changes have been made",
                   "## Output format", "## Example", "## Context",
                   "## Code", "## Refactor history", "## Task elements"]
        positions = [text.find(m) for m in markers]
        assert all(pos >= 0 for pos in positions)
        assert positions == sorted(positions)

    def test_empty_sections_render_none_marker(self):
        p = render_prompt(BOUNDS, [], "int f(void) {\n}\n", [], TaskElements([]))
        context = p.rendered.split("## Context")[1].split("## Code")[0]
        history = p.rendered.split("## Refactor history")[1].split("## Task elements")[0]
        assert NONE_MARKER in context
        assert NONE_MARKER in history

    def test_one_element_line(self):
        p = render_prompt(BOUNDS, [], "int f(int* p) {\n  p[0] = 1;\n}\n", [],
                          TaskElements([("p", 1)]))
        assert "- p (line 1)" in p.rendered

    def test_prelude_contains_annotated_callee_signature(self):
        sig = "static int countint(lua_Integer key, arr<unsigned int> nums : count(count_nums), int count_nums)"
        p = render_prompt(BOUNDS, [sig], "int caller(void) {\n  return 0;\n}\n",
                          [], TaskElements([]))
        assert sig in p.rendered

    def test_nested_task_carries_example_and_element(self):
        code = "int foo(arr<arr<int>> a, int i) {\n  return a[i].ptr[i];\n}\n"
        p = render_prompt(NESTED, [], code, [], TaskElements([("a", 1)]))
        assert "typedef struct arr_of_int" in p.rendered
        assert "arr<int> ptr : count(len);" in p.rendered
        assert "- a (line 1)" in p.rendered

    def test_history_rendered_most_recent_first_with_cap(self):
        entries = [RefactorHistoryEntry(f"d{i}", f"old{i}", f"new{i}")
                   for i in range(25)]
        p = render_prompt(BOUNDS, [], "int f(void) {\n}\n", entries,
                          TaskElements([]))
        assert "### d0" in p.rendered
        assert "### d19" in p.rendered
        assert "### d20" not in p.rendered
        assert "(5 older changes omitted)" in p.rendered

    def test_fingerprint_is_pure_function_of_rendered(self):
        a = render_prompt(BOUNDS, [], "int f(void) {\n}\n", [], TaskElements([]))
        b = render_prompt(BOUNDS, [], "int f(void) {\n}\n", [], TaskElements([]))
        assert a.rendered == b.rendered
        assert a.fingerprint == b.fingerprint
        c = render_prompt(BOUNDS, [], "int g(void) {\n}\n", [], TaskElements([]))
        assert c.fingerprint != a.fingerprint

    def test_token_budget_enforced(self):
        with pytest.raises(PromptTooLarge):
            render_prompt(BOUNDS, [], "x" * 200000, [], TaskElements([]),
                          token_budget=1000)

    def test_history_entry_requires_change(self):
        with pytest.raises(ValueError):
            RefactorHistoryEntry("d", "same", "same")


class TestElementsFor:
    def test_bounds_all_annotated_gives_empty(self):
        d = decl_of("void f(arr<int> p : count(n), int n) {\n  p[0] = 1;\n}\n")
        sites = classify_pointer_lite(d)
        assert not elements_for(BOUNDS, d, sites)

    def test_bounds_unannotated_param_listed_with_line(self):
        d = decl_of(
            "static void byteReverse(\n"
            "unsigned char* buf,\n"
            "unsigned longs) {\n"
            "  buf[0] = 1;\n  buf += 4;\n}\n", "byteReverse")
        sites = classify_pointer_lite(d)
        els = elements_for(BOUNDS, d, sites)
        assert els.items == [("buf", 2)]

    def test_bounds_never_lists_annotated_symbols(self):
        d = decl_of(
            "void f(arr<int> a : count(n), int* b, int n) {\n"
            "  a[0] = b[0];\n}\n")
        sites = classify_pointer_lite(d)
        els = elements_for(BOUNDS, d, sites)
        assert [s for s, _ in els.items] == ["b"]

    def test_nested_task_lists_nested_sites(self):
        d = decl_of("long get(long** a, int i) {\n  return a[i][i];\n}\n")
        sites = classify_pointer_lite(d)
        els = elements_for(NESTED, d, sites)
        assert [s for s, _ in els.items] == ["a"]

    def test_ptr_kind_not_listed_for_bounds(self):
        d = decl_of("int f(int* p) {\n  return *p;\n}\n")
        sites = classify_pointer_lite(d)
        assert not elements_for(BOUNDS, d, sites)

    def test_element_symbol_must_occur_in_code(self):
        d = decl_of("int f(int* p) {\n  return *p;\n}\n")
        from checkport.checkedc import AnnotationSite, PointerKind

        ghost = AnnotationSite(decl_id=d.id, symbol="ghost",
                               kind=PointerKind.ARR, line=1)
        with pytest.raises(ValueError):
            elements_for(BOUNDS, d, [ghost])
