"""Shared helpers: a scripted backend for driving the pipeline in tests.

The scripted backend plays the role of the live model: each rule matches a
query by task and by a substring of the prompt's code section, and returns
fixed responses. Wrapping it in RecordingBackend produces replay stores the
way a recorded live run would.
"""

import json
from pathlib import Path

import pytest

from checkport.gateway import RecordingBackend, ReplayStore
from checkport.mockllm import _section
from checkport.prompts import (
    SECTION_CODE,
    SECTION_HISTORY,
    TASKS,
    TaskId,
)

FIXTURES = Path(__file__).parent / "fixtures"


class ScriptedBackend:
    """Answers queries from a rule table keyed on task and code content."""

    name = "scripted"

    def __init__(self, rules):
        self.rules = list(rules)
        self.unmatched = []

    def complete(self, p, n, fingerprint):
        code = _section(p.rendered, SECTION_CODE, SECTION_HISTORY)
        for rule in self.rules:
            task = rule.get("task")
            if task and TASKS[TaskId(task)].description.splitlines()[0] \
                    not in p.rendered:
                continue
            if rule["contains"] in code:
                responses = rule["responses"]
                return [_as_text(r) for r in responses][:n] or [""]
        self.unmatched.append(code.split("\n")[0])
        return [""]


def _as_text(response):
    if isinstance(response, list):
        return "\n".join(response)
    return response


def load_script(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def record_store(units_dir_or_rules, store_dir):
    """Build a replay store by running the scripted backend through the
    recording wrapper (done by the caller driving the pipeline)."""
    store = ReplayStore(store_dir)
    backend = RecordingBackend(ScriptedBackend(units_dir_or_rules), store)
    return backend, store


@pytest.fixture
def fixtures_dir():
    return FIXTURES
