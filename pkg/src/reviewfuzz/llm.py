"""Chat-model clients and prompt templates.

A client is anything with ``complete(system, user, max_tokens) -> str``.
Every prompt's user message ends with a machine-readable ``### INPUT JSON``
block carrying the same facts as the prose above it; the mock client reads
only that block, which keeps it a pure function of its arguments.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

from .recording import RecordingTransport

MAX_OUTPUT_TOKENS = 5000
INPUT_MARKER = "### INPUT JSON"
TEMPLATE_NAMES = ("stage1", "stage2", "localize_select", "localize_verify", "annotate", "cwe_hint", "repair")
_SLOT = re.compile(r"\{([a-z_0-9]+)\}")


class ModelClient(Protocol):
    def complete(self, system: str, user: str, max_tokens: int = MAX_OUTPUT_TOKENS) -> str: ...


class ModelOutputError(ValueError):
    """The model reply does not honour the structured-output contract."""


def fill(template: str, **slots: str) -> str:
    """Replace ``{name}`` slots; braces that are not known slots stay as-is."""

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(slots[key]) if key in slots else m.group(0)

    return _SLOT.sub(sub, template)


@dataclass(frozen=True)
class Template:
    name: str
    system: str
    user: str

    def render(self, input_data: dict, **slots: str) -> tuple:
        payload = json.dumps(input_data, sort_keys=True, ensure_ascii=False)
        return fill(self.system, **slots), fill(self.user, input_json=payload, **slots)


def _split_sections(name: str, text: str) -> Template:
    if "[system]" not in text:
        return Template(name, "", text)
    _, rest = text.split("[system]", 1)
    if "[user]" not in rest:
        raise ValueError(f"template {name}: [user] section missing")
    system, user = rest.split("[user]", 1)
    if "{input_json}" not in user or INPUT_MARKER not in user:
        raise ValueError(f"template {name}: user section must end with the input JSON block")
    return Template(name, system.strip("\n") + "\n", user.lstrip("\n"))


@dataclass(frozen=True)
class PromptSet:
    templates: dict

    def __getitem__(self, name: str) -> Template:
        return self.templates[name]

    @classmethod
    def load(cls, directory: Optional[Path] = None) -> "PromptSet":
        base = Path(directory) if directory else Path(str(resources.files("reviewfuzz") / "prompts"))
        out = {}
        for name in TEMPLATE_NAMES:
            path = base / f"{name}.txt"
            if not path.exists():
                raise FileNotFoundError(f"prompt template missing: {path}")
            out[name] = _split_sections(name, path.read_text(encoding="utf-8"))
        return cls(out)


def extract_input(user: str) -> dict:
    idx = user.rfind(INPUT_MARKER)
    if idx < 0:
        raise ModelOutputError("user payload carries no input block")
    return json.loads(user[idx + len(INPUT_MARKER):].strip())


def parse_json_object(text: str) -> dict:
    """Return the first JSON object in ``text`` (code fences tolerated)."""
    start = text.find("{")
    if start < 0:
        raise ModelOutputError("no JSON object in reply")
    try:
        obj, _ = json.JSONDecoder().raw_decode(text[start:])
    except json.JSONDecodeError as exc:
        raise ModelOutputError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ModelOutputError("reply is not a JSON object")
    return obj


def ask(client: ModelClient, prompts: PromptSet, template: str, input_data: dict,
        validate, max_tokens: int = MAX_OUTPUT_TOKENS, **slots: str) -> tuple:
    """Call the model and validate the reply, with a single repair re-prompt.

    ``validate`` turns the parsed object into a result or raises
    :class:`ModelOutputError`.  Returns ``(result, attempts)``; re-raises the
    second error if the repair also fails.
    """
    system, user = prompts[template].render(input_data, **slots)
    reply = client.complete(system, user, max_tokens)
    try:
        return validate(parse_json_object(reply)), 1
    except ModelOutputError as exc:
        note = fill(prompts["repair"].user, error=str(exc))
        repaired_input = dict(input_data, repair=str(exc))
        _, user2 = prompts[template].render(repaired_input, **slots)
        reply = client.complete(system, note + "\n" + user2, max_tokens)
        return validate(parse_json_object(reply)), 2


class ScriptedClient:
    """Replays canned replies in order; records the prompts it was given."""

    def __init__(self, replies: Sequence[str]) -> None:
        self.replies = list(replies)
        self.calls: list = []

    def complete(self, system: str, user: str, max_tokens: int = MAX_OUTPUT_TOKENS) -> str:
        self.calls.append((system, user, max_tokens))
        if not self.replies:
            raise RuntimeError("scripted client ran out of replies")
        return self.replies.pop(0)


@dataclass
class LiveClient:
    """OpenAI-compatible chat endpoint behind the recording transport."""

    model: str
    fixtures_dir: Path
    base_url: str = "https://api.openai.com/v1"
    replay: bool = False
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.0
    transport: Optional[RecordingTransport] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.transport is None:
            headers = {}
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
            elif not self.replay:
                raise RuntimeError(f"set {self.api_key_env} to use the live model client")
            self.transport = RecordingTransport(Path(self.fixtures_dir), "replay" if self.replay else "record", headers)

    def complete(self, system: str, user: str, max_tokens: int = MAX_OUTPUT_TOKENS) -> str:
        body: dict[str, Any] = {
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": max_tokens,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        data = self.transport.request("POST", f"{self.base_url.rstrip('/')}/chat/completions", body=body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ModelOutputError(f"unexpected completion payload: {exc}") from None


def make_client(kind: str, **kw) -> ModelClient:
    if kind == "mock":
        from .mock import MockClient

        return MockClient(kw.get("rules_path"))
    if kind in ("live", "replay"):
        return LiveClient(
            model=kw.get("model", "gpt-4o-mini"),
            fixtures_dir=Path(kw.get("fixtures_dir", "llm-recordings")),
            base_url=kw.get("base_url", "https://api.openai.com/v1"),
            replay=kind == "replay",
        )
    raise ValueError(f"unknown client kind {kind!r}")
