"""Chat-completion interface: single-shot structured calls, a ReAct tool loop,
and a deterministic record/replay cache keyed by request digest.

The wire format for tool use is plain JSON in the assistant text — either
{"action": <tool>, "args": {...}} or {"final": <answer>} — so any
chat-completions endpoint works without function-calling support.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import requests

DEFAULT_MAX_RETRIES = 2
DEFAULT_MAX_STEPS = 8


class BackendError(Exception):
    """Fatal backend failure; aborts the calling operation."""


class CacheMiss(BackendError):
    """Replay-only backend asked for a request that is not in the cache."""


class UnparseableOutput(Exception):
    """Model output never matched the expected shape; carries all raw replies."""

    def __init__(self, message: str, raw_responses: list[str]):
        super().__init__(message)
        self.raw_responses = raw_responses


class ToolFailure(Exception):
    """A tool implementation failed; converted to an observation, never fatal."""


@dataclass(frozen=True)
class ChatRequest:
    system: str
    messages: tuple[tuple[str, str], ...]  # (role, content), role in user|assistant|tool
    temperature: float = 0.0
    model_id: str = "default"

    def add(self, role: str, content: str) -> "ChatRequest":
        return replace(self, messages=self.messages + ((role, content),))


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict[str, str] = field(default_factory=dict)  # arg name -> type label


@dataclass(frozen=True)
class ReactStep:
    thought: str
    action: str
    args: dict
    observation: str


@dataclass(frozen=True)
class ReactTrace:
    steps: tuple[ReactStep, ...]
    final: str
    truncated: bool = False


class LlmBackend:
    """complete(request) -> assistant text. Implementations must be safe for
    concurrent calls."""

    def complete(self, request: ChatRequest) -> str:
        raise NotImplementedError


def canonical_request(request: ChatRequest) -> str:
    return json.dumps(
        {
            "system": request.system,
            "messages": [[role, content] for role, content in request.messages],
            "temperature": request.temperature,
            "model_id": request.model_id,
        },
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )


def cache_key(request: ChatRequest) -> str:
    """SHA-256 of the canonical serialization; content is hashed verbatim."""
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()


class HttpBackend(LlmBackend):
    """OpenAI-compatible chat-completions client.

    Base URL and key come from AUTOCT_LLM_URL / AUTOCT_LLM_KEY unless given
    explicitly. Internal "tool" turns are sent as user messages.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None, timeout: float = 120.0):
        self.base_url = (base_url or os.environ.get("AUTOCT_LLM_URL", "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("AUTOCT_LLM_KEY", "")
        self.timeout = timeout
        if not self.base_url:
            raise BackendError("no LLM endpoint configured (set AUTOCT_LLM_URL)")

    def complete(self, request: ChatRequest) -> str:
        messages = [{"role": "system", "content": request.system}]
        for role, content in request.messages:
            messages.append({"role": "user" if role == "tool" else role, "content": content})
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json={
                    "model": request.model_id,
                    "temperature": request.temperature,
                    "messages": messages,
                },
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendError(f"LLM request failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"LLM endpoint returned {resp.status_code}: {resp.text[:500]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc


class ScriptedBackend(LlmBackend):
    """Returns canned responses in order; for tests and fixtures."""

    def __init__(self, responses: list[str]):
        self._responses = list(responses)
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.requests.append(request)
            if not self._responses:
                raise BackendError("scripted backend ran out of responses")
            return self._responses.pop(0)


class CachedBackend(LlmBackend):
    """File cache in <cache_dir>/<first2>/<digest>.json holding request+response.

    With an inner backend, misses fall through and are recorded (write to
    temp file then rename, so concurrent writers are safe). Without one the
    backend is replay-only and a miss is a fatal CacheMiss.
    """

    def __init__(self, cache_dir: str, inner: LlmBackend | None = None):
        self.cache_dir = Path(cache_dir)
        self.inner = inner
        self._lock = threading.Lock()
        self.calls = 0
        self.hits = 0
        self.misses = 0

    def _path(self, digest: str) -> Path:
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def complete(self, request: ChatRequest) -> str:
        digest = cache_key(request)
        path = self._path(digest)
        with self._lock:
            self.calls += 1
        if path.exists():
            with self._lock:
                self.hits += 1
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        if self.inner is None:
            raise CacheMiss(f"no cached response for request {digest}")
        response = self.inner.complete(request)
        with self._lock:
            self.misses += 1
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(
            {"request": json.loads(canonical_request(request)), "response": response},
            sort_keys=True,
            ensure_ascii=False,
            indent=2,
        )
        fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload + "\n")
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return response


def verify_cache(cache_dir: str) -> list[str]:
    """Check every cache file's name against the digest of its stored request.

    Returns a list of problems; empty means the cache is intact.
    """
    problems: list[str] = []
    root = Path(cache_dir)
    for path in sorted(root.glob("*/*.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            req = payload["request"]
            request = ChatRequest(
                system=req["system"],
                messages=tuple((r, c) for r, c in req["messages"]),
                temperature=req["temperature"],
                model_id=req["model_id"],
            )
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"{path}: unreadable ({exc})")
            continue
        if cache_key(request) != path.stem:
            problems.append(f"{path}: digest mismatch")
    return problems


# ---------------------------------------------------------------------------
# JSON extraction and structured completion
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_-]*)\n(.*?)```", re.DOTALL)


def extract_json(text: str):
    """Return the first JSON value in the text, tolerating prose and fences.

    Raises ValueError if no JSON value can be decoded.
    """
    candidates = _FENCE_RE.findall(text) + [text]
    decoder = json.JSONDecoder()
    for candidate in candidates:
        for match in re.finditer(r"[\[{]", candidate):
            try:
                value, _ = decoder.raw_decode(candidate[match.start():])
                return value
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in response")


def complete_structured(
    backend: LlmBackend,
    request: ChatRequest,
    schema: dict,
    max_retries: int = DEFAULT_MAX_RETRIES,
):
    """Run a completion and parse/validate its first JSON value.

    On a parse or schema failure the request is reissued with a corrective
    message appended, up to max_retries extra attempts.
    """
    raw_responses: list[str] = []
    current = request
    for _ in range(max_retries + 1):
        text = backend.complete(current)
        raw_responses.append(text)
        problem = ""
        try:
            value = extract_json(text)
        except ValueError:
            problem = "the reply did not contain a JSON value"
        else:
            try:
                jsonschema.validate(value, schema)
                return value
            except jsonschema.ValidationError as exc:
                problem = f"the JSON did not match the expected shape: {exc.message}"
        current = current.add("assistant", text).add(
            "user",
            f"Your previous reply could not be used: {problem}. "
            "Respond again with only a valid JSON value of the required shape.",
        )
    raise UnparseableOutput(
        f"no valid structured output after {max_retries + 1} attempts", raw_responses
    )


# ---------------------------------------------------------------------------
# ReAct loop
# ---------------------------------------------------------------------------

def render_tool_protocol(tools: list[ToolSpec]) -> str:
    lines = ["You can use the following tools:"]
    for tool in tools:
        params = ", ".join(f"{name}: {kind}" for name, kind in tool.parameters.items()) or "no arguments"
        lines.append(f"- {tool.name} ({params}): {tool.description}")
    lines.append(
        'To use a tool, respond with a single JSON object: {"action": "<tool name>", "args": {...}}. '
        'When you have enough information, respond with {"final": "<your answer>"}.'
    )
    return "\n".join(lines)


def _parse_turn(text: str):
    try:
        value = extract_json(text)
    except ValueError:
        return None
    if isinstance(value, dict) and "final" in value:
        final = value["final"]
        return ("final", final if isinstance(final, str) else json.dumps(final))
    if isinstance(value, dict) and isinstance(value.get("action"), str):
        args = value.get("args") or {}
        return ("action", value["action"], args if isinstance(args, dict) else {})
    return None


def react_loop(
    backend: LlmBackend,
    system: str,
    user: str,
    tools: list[ToolSpec],
    tool_impls: dict,
    max_steps: int = DEFAULT_MAX_STEPS,
    temperature: float = 0.0,
    model_id: str = "default",
) -> ReactTrace:
    """Alternate model calls and tool invocations until a final answer.

    Tool failures become observations and the loop continues; backend
    failures propagate. Hitting max_steps sets truncated and the last
    assistant text stands in as the final answer.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    for tool in tools:
        if tool.name not in tool_impls:
            raise ValueError(f"tool {tool.name!r} has no implementation")
    request = ChatRequest(
        system=system + "\n\n" + render_tool_protocol(tools),
        messages=(("user", user),),
        temperature=temperature,
        model_id=model_id,
    )
    steps: list[ReactStep] = []
    last_text = ""
    while True:
        text = backend.complete(request)
        last_text = text
        parsed = _parse_turn(text)
        if parsed is None or parsed[0] == "final":
            # A turn with no parseable action is treated as the final answer.
            final = parsed[1] if parsed else text
            return ReactTrace(steps=tuple(steps), final=final, truncated=False)
        _, action, args = parsed
        try:
            if action not in tool_impls:
                raise ToolFailure(f"unknown tool {action!r}")
            observation = str(tool_impls[action](**args))
        except BackendError:
            raise
        except Exception as exc:  # noqa: BLE001 - any tool failure feeds back
            observation = f"ERROR: {exc}"
        steps.append(ReactStep(thought=text, action=action, args=dict(args), observation=observation))
        if len(steps) >= max_steps:
            return ReactTrace(steps=tuple(steps), final=last_text, truncated=True)
        request = request.add("assistant", text).add("tool", f"Observation: {observation}")
