"""Response generation, judge scoring on the three dimensions, closed-set VQA
accuracy, benchmark report rendering, and the joint-training ablation harness.

Accuracy for a dimension is the fraction of judge "correct" verdicts x 100;
the score column is the arithmetic mean of the 1-5 judge scores.
"""
from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .conversation import ChatTemplate, ConversationRecord, Round, WhitespaceTokenizer, render_template, tokenize_and_mask, splice_visual
from .encoding import encode_sample
from .errors import InvalidComparisonError, InvalidInputError, JudgeProtocolError, SurgvlaError
from .training import TrainState

DIMENSIONS = ("conversation", "detail_description", "complex_reasoning")

SELF_ENHANCEMENT_NOTE = (
    "Judge scores may be biased in favor of the judge model's own answer style."
)

JUDGE_CRITERIA = {
    "conversation": (
        "Assess whether the response accurately reflects the video content, "
        "without misinterpretations or false information."
    ),
    "detail_description": (
        "Assess whether the response covers all major points from the video and "
        "includes precise details rather than generic statements."
    ),
    "complex_reasoning": (
        "Assess whether the response demonstrates an understanding of the video's "
        "context and the logical connections between the content points."
    ),
}

JUDGE_PROMPT_VERSION = "v1"

JUDGE_PROMPT = (
    "You are grading a model response for a surgical video question.\n"
    "{criterion}\n"
    "Question: {question}\n"
    "Reference answer: {gold}\n"
    "Model response: {response}\n"
    "Reply with exactly two lines:\n"
    "CORRECT: yes or no\n"
    "SCORE: an integer from 1 to 5"
)


@dataclass
class JudgeVerdict:
    sample_id: str
    dimension: str
    correct: bool
    score: int
    judge_id: str

    def __post_init__(self):
        if self.score not in (1, 2, 3, 4, 5):
            raise InvalidInputError(f"judge score must be 1-5, got {self.score}")
        if self.dimension not in DIMENSIONS:
            raise InvalidInputError(f"unknown dimension {self.dimension!r}")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id, "dimension": self.dimension,
            "correct": self.correct, "score": self.score, "judge_id": self.judge_id,
        }


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace. Idempotent."""
    s = s.lower()
    s = s.translate(str.maketrans("", "", string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


class MockJudgeBackend:
    """Deterministic judge: correct iff the normalized reference answer is a
    substring of the normalized response; score 5 when correct, 1 otherwise."""

    judge_id = "mock"

    def complete(self, prompt: str) -> str:
        gold = _extract_field(prompt, "Reference answer")
        response = _extract_field(prompt, "Model response")
        correct = normalize_answer(gold) in normalize_answer(response)
        return f"CORRECT: {'yes' if correct else 'no'}\nSCORE: {5 if correct else 1}"


def _extract_field(prompt: str, label: str) -> str:
    for line in prompt.splitlines():
        if line.startswith(label + ":"):
            return line[len(label) + 1 :].strip()
    raise JudgeProtocolError(f"judge prompt missing field {label!r}")


def _parse_judge_reply(raw: str) -> Tuple[bool, int]:
    correct = score = None
    for line in raw.splitlines():
        line = line.strip()
        if line.upper().startswith("CORRECT:"):
            token = line.split(":", 1)[1].strip().lower()
            if token in ("yes", "no"):
                correct = token == "yes"
        elif line.upper().startswith("SCORE:"):
            m = re.search(r"[1-5]", line)
            if m:
                score = int(m.group())
    if correct is None or score is None:
        raise JudgeProtocolError(f"unparseable judge reply: {raw!r}")
    return correct, score


def judge(
    question: str,
    gold: str,
    response: str,
    dimension: str,
    backend,
    sample_id: str = "",
    max_retries: int = 2,
) -> JudgeVerdict:
    """Score one response on one dimension via the judge backend."""
    if not response:
        raise InvalidInputError("cannot judge an empty response")
    if dimension not in DIMENSIONS:
        raise InvalidInputError(f"unknown dimension {dimension!r}")
    prompt = JUDGE_PROMPT.format(
        criterion=JUDGE_CRITERIA[dimension], question=question, gold=gold, response=response,
    )
    last: Optional[Exception] = None
    for _ in range(max_retries + 1):
        try:
            correct, score = _parse_judge_reply(backend.complete(prompt))
            return JudgeVerdict(sample_id, dimension, correct, score, backend.judge_id)
        except JudgeProtocolError as e:
            last = e
    raise JudgeProtocolError(f"judge failed after {max_retries + 1} attempts: {last}")


def aggregate(verdicts: Sequence[JudgeVerdict]) -> Dict[str, dict]:
    """Per-dimension accuracy % and mean 1-5 score. Empty dimensions are omitted."""
    out: Dict[str, dict] = {}
    for dim in DIMENSIONS:
        dvs = [v for v in verdicts if v.dimension == dim]
        if not dvs:
            continue
        out[dim] = {
            "accuracy": 100.0 * sum(v.correct for v in dvs) / len(dvs),
            "score": sum(v.score for v in dvs) / len(dvs),
            "n": len(dvs),
        }
    return out


def write_verdicts_jsonl(verdicts: Sequence[JudgeVerdict], path: str):
    ordered = sorted(verdicts, key=lambda v: (v.sample_id, v.dimension))
    with open(path, "w") as f:
        for v in ordered:
            f.write(json.dumps(v.to_dict()) + "\n")


def vqa_accuracy(records, responses: Dict[str, str]) -> Dict[str, float]:
    """Normalized exact-match accuracy per dataset."""
    missing = [r.sample_id for r in records if r.sample_id not in responses]
    if missing:
        raise InvalidInputError(f"missing responses for {missing}")
    hits: Dict[str, int] = {}
    totals: Dict[str, int] = {}
    for r in records:
        totals[r.dataset] = totals.get(r.dataset, 0) + 1
        if normalize_answer(responses[r.sample_id]) == normalize_answer(r.answer):
            hits[r.dataset] = hits.get(r.dataset, 0) + 1
    return {d: 100.0 * hits.get(d, 0) / totals[d] for d in totals}


@dataclass
class DecodingConfig:
    max_new_tokens: int = 16
    # greedy only; sampling is out of scope for the toy model


@dataclass
class DecodedResponse:
    text: str
    truncated: bool

    def __str__(self):
        return self.text


def respond_in_conversation(
    state: TrainState,
    visual,
    record: ConversationRecord,
    r: int,
    config: DecodingConfig = DecodingConfig(),
    history_mode: str = "full",
) -> DecodedResponse:
    """Greedy decoding of the answer to round r, conditioned on the history."""
    rendered = render_template(record, r, history_mode, state.template)
    tokenized = tokenize_and_mask(
        rendered, [rd.answer for rd in record.rounds[: r - 1] if rd.answer],
        state.tokenizer, state.template,
    )
    projected = encode_sample(
        visual, state.encoder, state.projection,
        max_frames=state.max_frames, order=state.concat_order,
    )
    spliced = splice_visual(tokenized, projected.data, state.lm.embed)
    emb = spliced.embeddings.detach()
    generated: List[int] = []
    truncated = True
    with torch.no_grad():
        for _ in range(config.max_new_tokens):
            logits = state.lm(emb)
            next_id = int(logits[-1].argmax())
            if next_id == WhitespaceTokenizer.EOT:
                truncated = False
                break
            generated.append(next_id)
            emb = torch.cat([emb, state.lm.embed([next_id])], dim=0)
    return DecodedResponse(state.tokenizer.decode(generated), truncated)


def generate_response(
    state: TrainState,
    visual,
    question: str,
    config: DecodingConfig = DecodingConfig(),
) -> DecodedResponse:
    """Greedy decoding of one answer given a visual sample and a question."""
    record = ConversationRecord(visual_ref="query", rounds=[Round(question, "")])
    return respond_in_conversation(state, visual, record, 1, config)


@dataclass
class BenchmarkReport:
    """Per-dimension judge aggregates plus per-dataset VQA accuracies."""

    model_name: str
    dimension_results: Dict[str, dict] = field(default_factory=dict)
    vqa_accuracies: Dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""
    notes: List[str] = field(default_factory=lambda: [SELF_ENHANCEMENT_NOTE])

    def __post_init__(self):
        for dim, res in self.dimension_results.items():
            if not 0.0 <= res["accuracy"] <= 100.0:
                raise InvalidInputError(f"{dim} accuracy out of range")
            if res["n"] > 0 and not 1.0 <= res["score"] <= 5.0:
                raise InvalidInputError(f"{dim} mean score out of range")
        for d, acc in self.vqa_accuracies.items():
            if not 0.0 <= acc <= 100.0:
                raise InvalidInputError(f"{d} VQA accuracy out of range")

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "dimension_results": self.dimension_results,
            "vqa_accuracies": self.vqa_accuracies,
            "config_fingerprint": self.config_fingerprint,
            "notes": self.notes,
        }

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkReport":
        return BenchmarkReport(
            model_name=d["model_name"],
            dimension_results=d.get("dimension_results", {}),
            vqa_accuracies=d.get("vqa_accuracies", {}),
            config_fingerprint=d.get("config_fingerprint", ""),
            notes=d.get("notes", []),
        )


_DIM_HEADERS = {
    "conversation": "Conversation",
    "detail_description": "Detail description",
    "complex_reasoning": "Complex reasoning",
}


def render_dimension_table(reports: Sequence[BenchmarkReport]) -> str:
    """Video-reasoning benchmark table: accuracy and score per dimension."""
    header = f"{'Methods':<20}"
    sub = f"{'':<20}"
    for dim in DIMENSIONS:
        header += f" | {_DIM_HEADERS[dim]:^18}"
        sub += f" | {'Accuracy':>8} {'Score':>9}"
    lines = [header, sub, "-" * len(sub)]
    for rep in reports:
        row = f"{rep.model_name:<20}"
        for dim in DIMENSIONS:
            res = rep.dimension_results.get(dim)
            if res is None:
                row += f" | {'-':>8} {'-':>9}"
            else:
                row += f" | {res['accuracy']:>8.1f} {res['score']:>9.1f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def render_vqa_table(reports: Sequence[BenchmarkReport],
                     datasets: Sequence[str] = ("cholec80", "endovis18", "psiava")) -> str:
    """VQA benchmark table: one accuracy column per dataset."""
    header = f"{'Methods':<20}"
    for d in datasets:
        header += f" | {d:>14}"
    lines = [header, "-" * len(header)]
    for rep in reports:
        row = f"{rep.model_name:<20}"
        for d in datasets:
            acc = rep.vqa_accuracies.get(d)
            row += f" | {acc:>14.1f}" if acc is not None else f" | {'-':>14}"
        lines.append(row)
    return "\n".join(lines) + "\n"


@dataclass
class AblationResult:
    video_only: Dict[str, dict]
    joint: Dict[str, dict]

    @property
    def delta(self) -> Dict[str, float]:
        out = {}
        for dim in DIMENSIONS:
            if dim in self.video_only and dim in self.joint:
                out[dim] = self.joint[dim]["accuracy"] - self.video_only[dim]["accuracy"]
        return out


def ablation_delta(video_only: Dict[str, dict], joint: Dict[str, dict]) -> AblationResult:
    """Delta row from two per-dimension aggregate reports."""
    return AblationResult(video_only, joint)


def ablation_joint_vs_video_only(
    config_video_only,
    config_joint,
    video_only_corpus,
    joint_corpus,
    state_factory: Callable[[], TrainState],
    evaluator: Callable[[TrainState], Dict[str, dict]],
    train_fn: Optional[Callable] = None,
) -> AblationResult:
    """Train both arms under identical configs (only the batch modality mix may
    differ) and report the per-dimension accuracy deltas."""
    if config_video_only.to_dict() != config_joint.to_dict():
        diff = {
            k for k in config_video_only.to_dict()
            if config_video_only.to_dict()[k] != config_joint.to_dict()[k]
        }
        raise InvalidComparisonError(
            f"ablation arms differ beyond the modality mix: {sorted(diff)}"
        )
    if train_fn is None:
        from .training import train as train_fn  # noqa: PLC0415
    results = []
    for corpus, config in ((video_only_corpus, config_video_only), (joint_corpus, config_joint)):
        state = state_factory()
        train_fn(config, corpus, state)
        results.append(evaluator(state))
    return AblationResult(video_only=results[0], joint=results[1])


def render_ablation_table(result: AblationResult,
                          video_only_name: str = "video-only",
                          joint_name: str = "joint with image") -> str:
    """Ablation table with a signed delta-accuracy row."""
    header = f"{'Methods':<20}"
    for dim in DIMENSIONS:
        header += f" | {_DIM_HEADERS[dim]:>18}"
    lines = [header, "-" * len(header)]
    for name, res in ((video_only_name, result.video_only), (joint_name, result.joint)):
        row = f"{name:<20}"
        for dim in DIMENSIONS:
            acc = res.get(dim, {}).get("accuracy")
            row += f" | {acc:>18.1f}" if acc is not None else f" | {'-':>18}"
        lines.append(row)
    delta_row = f"{'Delta Acc.':<20}"
    for dim in DIMENSIONS:
        d = result.delta.get(dim)
        delta_row += f" | {d:>+18.1f}" if d is not None else f" | {'-':>18}"
    lines.append(delta_row)
    return "\n".join(lines) + "\n"
