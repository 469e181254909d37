"""Completion backends: live HTTP, record/replay store, rule-based mock.

All backends answer the same call: prompt in, N response strings out. The
replay store keys entries by a query fingerprint covering the rendered
prompt, the completion count and a backend-config salt (model name and
temperature), so a cache is only ever replayed against the configuration
that produced it.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import BackendUnavailable, ReplayMiss
from .prompts import PromptText


@dataclass
class CompletionSet:
    completions: list[str]
    n_requested: int
    backend: str

    def __post_init__(self):
        if not (1 <= len(self.completions) <= self.n_requested):
            raise ValueError(
                f"{len(self.completions)} completions for n={self.n_requested}")


def query_fingerprint(p: PromptText, n: int, salt: str) -> str:
    h = hashlib.sha256()
    h.update(p.rendered.encode("utf-8"))
    h.update(b"\x00")
    h.update(str(n).encode())
    h.update(b"\x00")
    h.update(salt.encode("utf-8"))
    return h.hexdigest()


class Backend(Protocol):
    name: str

    def complete(self, p: PromptText, n: int, fingerprint: str) -> list[str]:
        ...


class ReplayStore:
    """One JSON file per fingerprint: {fingerprint, prompt, responses}."""

    def __init__(self, location: str | Path):
        self.location = Path(location)

    def path_for(self, fingerprint: str) -> Path:
        return self.location / f"{fingerprint}.json"

    def lookup(self, fingerprint: str) -> list[str] | None:
        path = self.path_for(fingerprint)
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        return list(doc["responses"])

    def append(self, fingerprint: str, prompt: str, responses: list[str]) -> None:
        """Add responses for a fingerprint; existing entries only ever grow."""
        self.location.mkdir(parents=True, exist_ok=True)
        path = self.path_for(fingerprint)
        if path.exists():
            doc = json.loads(path.read_text(encoding="utf-8"))
            doc["responses"] = list(doc["responses"]) + list(responses)
        else:
            doc = {"fingerprint": fingerprint, "prompt": prompt,
                   "responses": list(responses)}
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    def fingerprints(self) -> list[str]:
        if not self.location.is_dir():
            return []
        return sorted(p.stem for p in self.location.glob("*.json"))


class ReplayBackend:
    name = "replay"

    def __init__(self, store: ReplayStore):
        self.store = store

    def complete(self, p: PromptText, n: int, fingerprint: str) -> list[str]:
        responses = self.store.lookup(fingerprint)
        if responses is None:
            raise ReplayMiss(f"no recorded completions for {fingerprint[:12]}…")
        return responses[:n] if len(responses) > n else responses


class MockBackend:
    """Deterministic rule-table stand-in for a live model (see mockllm)."""

    name = "mock"

    def complete(self, p: PromptText, n: int, fingerprint: str) -> list[str]:
        from .mockllm import mock_respond

        return [mock_respond(p)] * n


class RecordingBackend:
    """Wraps any backend and appends its responses to a replay store."""

    def __init__(self, inner: Backend, store: ReplayStore):
        self.inner = inner
        self.store = store
        self.name = inner.name

    def complete(self, p: PromptText, n: int, fingerprint: str) -> list[str]:
        responses = self.inner.complete(p, n, fingerprint)
        self.store.append(fingerprint, p.rendered, responses)
        return responses


@dataclass
class HttpConfig:
    url: str
    api_key: str = ""
    model: str = "default"
    temperature: float | None = None
    timeout: float = 120.0
    max_attempts: int = 3
    backoff: float = 0.5


class HttpBackend:
    """Chat-completions style endpoint; N completions per request."""

    name = "http"

    def __init__(self, config: HttpConfig, session=None):
        import requests

        self.config = config
        self.session = session or requests.Session()

    def complete(self, p: PromptText, n: int, fingerprint: str) -> list[str]:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": p.rendered}],
            "n": n,
        }
        if self.config.temperature is not None:
            payload["temperature"] = self.config.temperature
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"

        last_error = None
        for attempt in range(self.config.max_attempts):
            try:
                resp = self.session.post(self.config.url, json=payload,
                                         headers=headers,
                                         timeout=self.config.timeout)
                if resp.status_code >= 500:
                    raise RuntimeError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise BackendUnavailable(
                        f"backend rejected the request: {resp.status_code} "
                        f"{resp.text[:200]}")
                doc = resp.json()
                out = [c["message"]["content"] for c in doc["choices"]]
                if not out:
                    raise RuntimeError("backend returned zero choices")
                return out[:n]
            except BackendUnavailable:
                raise
            except Exception as e:  # noqa: BLE001 - retry any transport fault
                last_error = e
                if attempt + 1 < self.config.max_attempts:
                    time.sleep(self.config.backoff * (2 ** attempt))
        raise BackendUnavailable(
            f"backend unreachable after {self.config.max_attempts} attempts: "
            f"{last_error}")


def complete_n(p: PromptText, n: int, backend: Backend,
               salt: str = "") -> CompletionSet:
    """N completions for a prompt through the given backend."""
    if n < 1:
        raise ValueError("n must be at least 1")
    fingerprint = query_fingerprint(p, n, salt)
    responses = backend.complete(p, n, fingerprint)
    return CompletionSet(completions=responses, n_requested=n,
                         backend=backend.name)
