import json

import pytest

from checkport.errors import BackendUnavailable, ReplayMiss
from checkport.gateway import (
    CompletionSet,
    HttpBackend,
    HttpConfig,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    complete_n,
    query_fingerprint,
)
from checkport.mockllm import mock_respond
from checkport.patching import apply_patch, parse_response
from checkport.prompts import TASKS, TaskElements, TaskId, render_prompt


def bounds_prompt(code, elements):
    return render_prompt(TASKS[TaskId.BOUNDS_INFERENCE], [], code, [],
                         TaskElements(elements))


MALLOC_CODE = (
    "void alloc_row(int n) {\n"
    "  long* p;\n"
    "  p = malloc(n * sizeof(long));\n"
    "  p[0] = 0;\n"
    "}"
)


class TestMockRules:
    def test_r1_malloc_count(self):
        p = bounds_prompt(MALLOC_CODE, [("p", 2)])
        resp = mock_respond(p)
        patch = parse_response(resp)
        assert len(patch.blocks) == 1
        out = apply_patch(patch, MALLOC_CODE)
        assert "arr<long> p : count(n);" in out

    def test_r1_sizeof_first(self):
        code = "void f(int n) {\n  int* q;\n  q = malloc(sizeof(int) * (n + 1));\n}"
        resp = mock_respond(bounds_prompt(code, [("q", 2)]))
        out = apply_patch(parse_response(resp), code)
        assert "arr<int> q : count(n + 1);" in out

    def test_r2_loop_count(self):
        code = ("void fill(int* p, int e) {\n"
                "  int i;\n"
                "  for (i = 0; i < e; i++) {\n"
                "    p[i] = 0;\n"
                "  }\n"
                "}")
        resp = mock_respond(bounds_prompt(code, [("p", 1)]))
        out = apply_patch(parse_response(resp), code)
        assert "arr<int> p : count(e)," in out

    def test_r3_null_scan(self):
        code = "int slen(char* s) {\n  int n = 0;\n  while (*s != '\\0') { s++; n++; }\n  return n;\n}"
        resp = mock_respond(bounds_prompt(code, [("s", 1)]))
        out = apply_patch(parse_response(resp), code)
        assert "nt_arr<char> s : count(0)" in out

    def test_r4_copies_annotated_bounds(self):
        code = ("void g(arr<int> a : count(n), int n) {\n"
                "  arr<int> q = a;\n"
                "  q[0] = 1;\n"
                "}")
        resp = mock_respond(bounds_prompt(code, [("q", 2)]))
        out = apply_patch(parse_response(resp), code)
        assert "arr<int> q : count(n) = a;" in out

    def test_r4_fixed_array_nt_count(self):
        code = ("int first(void) {\n"
                "  char a[10];\n"
                "  nt_arr<char> p = a;\n"
                "  return p[0];\n"
                "}")
        resp = mock_respond(bounds_prompt(code, [("p", 3)]))
        out = apply_patch(parse_response(resp), code)
        assert "nt_arr<char> p : count(9) = a;" in out

    def test_r5_no_rule_fires(self):
        code = "int pick(int* p, int k) {\n  return p[k];\n}"
        resp = mock_respond(bounds_prompt(code, [("p", 1)]))
        assert resp == ""

    def test_empty_elements_empty_response(self):
        p = bounds_prompt(MALLOC_CODE, [])
        assert mock_respond(p) == ""

    def test_non_bounds_task_empty(self):
        p = render_prompt(TASKS[TaskId.NESTED_ARRAYS], [], MALLOC_CODE, [],
                          TaskElements([("p", 2)]))
        assert mock_respond(p) == ""

    def test_mock_is_deterministic(self):
        p = bounds_prompt(MALLOC_CODE, [("p", 2)])
        assert mock_respond(p) == mock_respond(p)


class TestCompleteN:
    def test_mock_returns_n_identical(self):
        p = bounds_prompt(MALLOC_CODE, [("p", 2)])
        cs = complete_n(p, 3, MockBackend())
        assert len(cs.completions) == 3
        assert len(set(cs.completions)) == 1
        assert cs.backend == "mock"

    def test_n_must_be_positive(self):
        p = bounds_prompt(MALLOC_CODE, [])
        with pytest.raises(ValueError):
            complete_n(p, 0, MockBackend())

    def test_fingerprint_covers_n_and_salt(self):
        p = bounds_prompt(MALLOC_CODE, [])
        base = query_fingerprint(p, 10, "model|t=0")
        assert query_fingerprint(p, 5, "model|t=0") != base
        assert query_fingerprint(p, 10, "other|t=1") != base
        assert query_fingerprint(p, 10, "model|t=0") == base


class TestReplayStore:
    def test_round_trip(self, tmp_path):
        store = ReplayStore(tmp_path / "cache")
        store.append("abc123", "prompt text", ["r1", "r2"])
        assert store.lookup("abc123") == ["r1", "r2"]
        assert store.lookup("missing") is None

    def test_append_only_growth(self, tmp_path):
        store = ReplayStore(tmp_path / "cache")
        store.append("k", "p", ["first"])
        store.append("k", "p", ["second"])
        assert store.lookup("k") == ["first", "second"]

    def test_persists_across_instances(self, tmp_path):
        ReplayStore(tmp_path / "c").append("k", "p", ["r"])
        assert ReplayStore(tmp_path / "c").lookup("k") == ["r"]

    def test_replay_hit_returns_recorded_verbatim(self, tmp_path):
        store = ReplayStore(tmp_path / "c")
        p = bounds_prompt(MALLOC_CODE, [("p", 2)])
        fp = query_fingerprint(p, 10, "")
        responses = [f"response {i}" for i in range(10)]
        store.append(fp, p.rendered, responses)
        cs = complete_n(p, 10, ReplayBackend(store))
        assert cs.completions == responses

    def test_replay_miss(self, tmp_path):
        store = ReplayStore(tmp_path / "c")
        p = bounds_prompt(MALLOC_CODE, [])
        with pytest.raises(ReplayMiss):
            complete_n(p, 10, ReplayBackend(store))

    def test_recording_wrapper_appends(self, tmp_path):
        store = ReplayStore(tmp_path / "c")
        p = bounds_prompt(MALLOC_CODE, [("p", 2)])
        cs = complete_n(p, 2, RecordingBackend(MockBackend(), store))
        fp = query_fingerprint(p, 2, "")
        assert store.lookup(fp) == cs.completions
        # replay now serves the same responses
        cs2 = complete_n(p, 2, ReplayBackend(store))
        assert cs2.completions == cs.completions

    def test_store_file_schema(self, tmp_path):
        store = ReplayStore(tmp_path / "c")
        store.append("deadbeef", "the prompt", ["resp"])
        doc = json.loads(store.path_for("deadbeef").read_text())
        assert set(doc) == {"fingerprint", "prompt", "responses"}
        assert doc["fingerprint"] == "deadbeef"


class FakeResponse:
    def __init__(self, status_code, body):
        self.status_code = status_code
        self._body = body
        self.text = json.dumps(body)

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def chat_body(contents):
    return {"choices": [{"message": {"content": c}} for c in contents]}


class TestHttpBackend:
    def make(self, outcomes):
        cfg = HttpConfig(url="http://example.invalid/v1/chat", api_key="k",
                         model="m", backoff=0.0)
        return HttpBackend(cfg, session=FakeSession(outcomes))

    def test_success(self):
        backend = self.make([FakeResponse(200, chat_body(["a", "b"]))])
        p = bounds_prompt(MALLOC_CODE, [])
        cs = complete_n(p, 2, backend)
        assert cs.completions == ["a", "b"]

    def test_retries_then_succeeds(self):
        backend = self.make([ConnectionError("down"),
                             FakeResponse(500, {}),
                             FakeResponse(200, chat_body(["ok"]))])
        p = bounds_prompt(MALLOC_CODE, [])
        cs = complete_n(p, 1, backend)
        assert cs.completions == ["ok"]
        assert backend.session.calls == 3

    def test_exhausted_retries_unavailable(self):
        backend = self.make([ConnectionError("down")] * 3)
        p = bounds_prompt(MALLOC_CODE, [])
        with pytest.raises(BackendUnavailable):
            complete_n(p, 1, backend)

    def test_client_error_fails_fast(self):
        backend = self.make([FakeResponse(401, {"error": "no auth"})])
        p = bounds_prompt(MALLOC_CODE, [])
        with pytest.raises(BackendUnavailable):
            complete_n(p, 1, backend)
        assert backend.session.calls == 1


class TestCompletionSet:
    def test_bounds_on_cardinality(self):
        with pytest.raises(ValueError):
            CompletionSet(completions=[], n_requested=3, backend="mock")
        with pytest.raises(ValueError):
            CompletionSet(completions=["a", "b"], n_requested=1, backend="mock")
