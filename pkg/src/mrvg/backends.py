"""Chat-completion backends: a live HTTP client and a recorded-fixture replayer.

The HTTP backend posts OpenAI-compatible bodies ({model, messages,
response_format}) to ``$MRVG_LLM_BASE_URL/chat/completions`` with
``$MRVG_LLM_API_KEY`` as a bearer token.
"""

from __future__ import annotations

import os
from pathlib import Path

import requests

ENV_BASE_URL = "MRVG_LLM_BASE_URL"
ENV_API_KEY = "MRVG_LLM_API_KEY"


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Network failure, non-2xx status, or an unparseable transport envelope."""


class HttpBackend:
    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0):
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")
        self.api_key = api_key or os.environ.get(ENV_API_KEY, "")
        self.timeout = timeout
        if not self.base_url:
            raise BackendError(f"no backend URL; set {ENV_BASE_URL} or pass base_url")

    def complete(self, request: dict, *, key: str | None = None, context=None) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=request,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"chat endpoint returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response envelope: {exc}") from exc


class FixtureBackend:
    """Replays recorded response bodies from ``<dir>/<key>.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise BackendError(f"fixture directory does not exist: {self.directory}")

    def complete(self, request: dict, *, key: str | None = None, context=None) -> str:
        if not key:
            raise BackendError("fixture backend needs a request key")
        path = self.directory / f"{key}.json"
        if not path.exists():
            raise TransportError(f"no recorded fixture for key {key!r} ({path})")
        return path.read_text(encoding="utf-8")


def make_backend(spec: str):
    """Build a backend from a CLI spec: http | fixtures:<dir> | heuristic."""
    if spec == "http":
        return HttpBackend()
    if spec.startswith("fixtures:"):
        return FixtureBackend(spec.split(":", 1)[1])
    if spec == "heuristic":
        from .matcher import HeuristicBackend

        return HeuristicBackend()
    raise BackendError(f"unknown backend spec {spec!r}")
