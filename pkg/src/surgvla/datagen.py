"""Instruction-data generation from source captions via a pluggable LLM backend.

Each caption is expanded with one prompt per task kind (conversation, detailed
description, complex reasoning). Backend replies are parsed with a simple
Q:/A: line grammar, validated against the corpus schema, deduplicated, and
written as JSONL.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import jsonschema

from .errors import BackendError, ConfigurationError, InvalidInputError, ParseError

log = logging.getLogger(__name__)

TASK_KINDS = ("conversation", "detail_description", "complex_reasoning")

PROMPT_TEMPLATES = {
    "complex_reasoning": (
        "{gpt_info}\nBased on the following description, generate questions and "
        "answers that require complex reasoning to understand the scene."
    ),
    "detail_description": (
        "{gpt_info}\nBased on the following description, generate a detailed "
        "description of the scene."
    ),
    "conversation": (
        "{gpt_info}\nBased on the following description, generate a question and "
        "answer that a human might ask about the scene."
    ),
}

DETAIL_QUERY = "Describe the scene in detail."

MAX_ROUNDS = 10

API_KEY_ENV_VAR = "SURGVLA_LLM_API_KEY"

CORPUS_RECORD_SCHEMA = {
    "type": "object",
    "properties": {
        "sample_id": {"type": "string"},
        "dataset": {"type": "string"},
        "modality": {"enum": ["image", "video"]},
        "task_kind": {"enum": list(TASK_KINDS)},
        "rounds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {"q": {"type": "string", "minLength": 1},
                               "a": {"type": "string", "minLength": 1}},
                "required": ["q", "a"],
                "additionalProperties": False,
            },
        },
        "generator": {"type": "string"},
        "prompt_hash": {"type": "string"},
    },
    "required": ["sample_id", "dataset", "modality", "task_kind", "rounds",
                 "generator", "prompt_hash"],
    "additionalProperties": False,
}


@dataclass
class SourceCaption:
    """Original annotation text for one visual sample."""

    sample_id: str
    caption: str
    dataset: str = "synthetic"
    modality: str = "video"

    def __post_init__(self):
        if not self.caption:
            raise InvalidInputError(f"caption for {self.sample_id} is empty")


@dataclass
class GeneratedInstruction:
    sample_id: str
    task_kind: str
    rounds: List[Tuple[str, str]]
    generator: str
    prompt_hash: str
    dataset: str = "synthetic"
    modality: str = "video"

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dataset": self.dataset,
            "modality": self.modality,
            "task_kind": self.task_kind,
            "rounds": [{"q": q, "a": a} for q, a in self.rounds],
            "generator": self.generator,
            "prompt_hash": self.prompt_hash,
        }


def render_prompt(caption: SourceCaption, task_kind: str) -> str:
    """Instantiate the generation prompt for one caption and task kind."""
    if task_kind not in PROMPT_TEMPLATES:
        raise InvalidInputError(f"unknown task kind {task_kind!r}")
    return PROMPT_TEMPLATES[task_kind].format(gpt_info=caption.caption)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class LLMBackend(Protocol):
    """Minimal completion interface every generation/judge backend satisfies."""

    backend_id: str

    def complete(self, prompt: str) -> str: ...


class MockBackend:
    """Deterministic canned backend: derives Q/A text from the caption line."""

    backend_id = "mock"

    def complete(self, prompt: str) -> str:
        caption = prompt.split("\n", 1)[0]
        if "generate a detailed description" in prompt:
            return (
                f"The scene shows {caption}. The surgical field is clearly visible "
                f"and the instruments are in active use."
            )
        if "complex reasoning" in prompt:
            return (
                f"Q: Why is this step important given that {caption}?\n"
                f"A: Because {caption}, the surgeon must proceed carefully to avoid "
                f"injury to surrounding tissue.\n"
                f"Q: What is likely to happen next?\n"
                f"A: The procedure continues from {caption} to the following phase."
            )
        return (
            f"Q: What is happening in the scene?\n"
            f"A: The scene shows {caption}."
        )


class OpenAICompatibleBackend:
    """Live backend speaking the common chat-completions HTTP protocol.

    Credentials come from the environment variable named by API_KEY_ENV_VAR;
    the value is never logged.
    """

    def __init__(self, base_url: str, model: str, timeout: float = 30.0):
        self.backend_id = f"openai:{model}"
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.api_key = os.environ.get(API_KEY_ENV_VAR)
        if not self.api_key:
            raise ConfigurationError(f"live backend needs {API_KEY_ENV_VAR} set")

    def complete(self, prompt: str) -> str:
        import requests

        resp = requests.post(
            f"{self.base_url}/chat/completions",
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={"model": self.model, "messages": [{"role": "user", "content": prompt}]},
            timeout=self.timeout,
        )
        if resp.status_code == 401:
            raise ConfigurationError("backend rejected credentials")
        if resp.status_code >= 400:
            raise BackendError(f"backend returned HTTP {resp.status_code}")
        return resp.json()["choices"][0]["message"]["content"]


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.1
    sleep: Callable[[float], None] = time.sleep


class CachingClient:
    """Wraps a backend with prompt-hash caching, retries, and optional on-disk cache."""

    def __init__(self, backend: LLMBackend, retry: RetryPolicy = RetryPolicy(),
                 cache_path: Optional[str] = None):
        self.backend = backend
        self.retry = retry
        self.cache_path = cache_path
        self.calls = 0
        self.attempts_log: List[int] = []
        self._lock = threading.Lock()
        self._cache: Dict[str, str] = {}
        if cache_path and os.path.exists(cache_path):
            with open(cache_path) as f:
                for line in f:
                    entry = json.loads(line)
                    self._cache[entry["key"]] = entry["text"]

    def _cache_key(self, prompt: str) -> str:
        return f"{self.backend.backend_id}:{prompt_hash(prompt)}"

    def call(self, prompt: str) -> str:
        key = self._cache_key(prompt)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        text = None
        last_err: Optional[Exception] = None
        attempts = 0
        for attempt in range(self.retry.max_attempts):
            attempts += 1
            try:
                self.calls += 1
                text = self.backend.complete(prompt)
                break
            except ConfigurationError:
                raise
            except Exception as e:  # transient backend failure
                last_err = e
                if attempt < self.retry.max_attempts - 1:
                    self.retry.sleep(self.retry.base_delay * (2 ** attempt))
        self.attempts_log.append(attempts)
        if text is None:
            raise BackendError(
                f"backend {self.backend.backend_id} failed after "
                f"{self.retry.max_attempts} attempts: {last_err}"
            )
        with self._lock:
            self._cache[key] = text
            if self.cache_path:
                with open(self.cache_path, "a") as f:
                    f.write(json.dumps({"key": key, "text": text}) + "\n")
        return text


def call_llm(prompt: str, backend: LLMBackend,
             retry_policy: RetryPolicy = RetryPolicy()) -> str:
    """One-shot completion with retries (no caching)."""
    return CachingClient(backend, retry_policy).call(prompt)


def parse_generation(raw: str, task_kind: str) -> List[Tuple[str, str]]:
    """Extract (query, answer) rounds from backend output via the Q:/A: grammar.

    detail_description tolerates free text: the whole reply becomes the answer
    to a fixed query.
    """
    if not raw.strip():
        raise ParseError("backend returned empty text", raw=raw)
    rounds: List[Tuple[str, str]] = []
    question: Optional[str] = None
    for line in raw.splitlines():
        line = line.strip()
        if line.startswith("Q:"):
            question = line[2:].strip()
        elif line.startswith("A:") and question:
            answer = line[2:].strip()
            if answer:
                rounds.append((question, answer))
            question = None
    if not rounds:
        if task_kind == "detail_description":
            return [(DETAIL_QUERY, raw.strip())]
        raise ParseError(f"no Q:/A: pair found in {task_kind} output", raw=raw)
    return rounds[:MAX_ROUNDS]


@dataclass
class CorpusStats:
    total: int = 0
    per_task: Dict[str, int] = field(default_factory=dict)
    per_dataset: Dict[str, int] = field(default_factory=dict)
    deduplicated: int = 0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_task": self.per_task,
            "per_dataset": self.per_dataset,
            "deduplicated": self.deduplicated,
        }


def validate_corpus_record(record: dict):
    jsonschema.validate(record, CORPUS_RECORD_SCHEMA)


def build_corpus(
    captions: Sequence[SourceCaption],
    tasks: Sequence[str],
    client: CachingClient,
) -> Tuple[List[GeneratedInstruction], CorpusStats]:
    """Generate one instruction record per (caption, task kind), deduplicated."""
    if not captions:
        raise InvalidInputError("no captions to expand")
    for t in tasks:
        if t not in TASK_KINDS:
            raise InvalidInputError(f"unknown task kind {t!r}")
    records: List[GeneratedInstruction] = []
    stats = CorpusStats()
    seen: set = set()
    for caption in captions:
        for task in tasks:
            prompt = render_prompt(caption, task)
            try:
                raw = client.call(prompt)
                rounds = parse_generation(raw, task)
            except ParseError as e:
                log.warning("dropping %s/%s: %s", caption.sample_id, task, e)
                continue
            h = prompt_hash(prompt)
            key = (h, tuple(rounds))
            if key in seen:
                stats.deduplicated += 1
                continue
            seen.add(key)
            rec = GeneratedInstruction(
                sample_id=caption.sample_id,
                task_kind=task,
                rounds=rounds,
                generator=client.backend.backend_id,
                prompt_hash=h,
                dataset=caption.dataset,
                modality=caption.modality,
            )
            validate_corpus_record(rec.to_record())
            records.append(rec)
            stats.total += 1
            stats.per_task[task] = stats.per_task.get(task, 0) + 1
            stats.per_dataset[caption.dataset] = stats.per_dataset.get(caption.dataset, 0) + 1
    if not records:
        raise InvalidInputError("no records survived generation and validation")
    return records, stats


def write_corpus_jsonl(records: Sequence[GeneratedInstruction], path: str):
    with open(path, "w") as f:
        for rec in records:
            d = rec.to_record()
            validate_corpus_record(d)
            f.write(json.dumps(d, sort_keys=True) + "\n")


def read_corpus_jsonl(path: str) -> List[dict]:
    out = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            validate_corpus_record(d)
            out.append(d)
    return out
