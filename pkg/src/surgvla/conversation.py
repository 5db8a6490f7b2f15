"""Multi-round conversation assembly: round concatenation, chat templating,
tokenization with answer-only loss masks, and visual-token splicing.

Round inputs follow the recursion: round 1 is the first query alone; later
rounds concatenate earlier query/answer pairs with the current query. Loss
masks select answer tokens (plus each answer's end-of-turn token) and nothing
else.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from .errors import AlignmentError, ConfigurationError, InvalidInputError

DEFAULT_SYSTEM_PROMPT = (
    "You are a surgical assistant. Answer questions about the operative scene."
)


@dataclass
class Round:
    query: str
    answer: str = ""


@dataclass
class ConversationRecord:
    """Ordered query/answer rounds bound to one visual sample."""

    visual_ref: str
    rounds: List[Round]
    task_kind: str = "conversation"

    def __post_init__(self):
        if not self.rounds:
            raise InvalidInputError("conversation needs at least one round")
        for i, r in enumerate(self.rounds):
            if not r.query:
                raise InvalidInputError(f"round {i + 1} has an empty query")
        for i, r in enumerate(self.rounds[:-1]):
            if not r.answer:
                raise InvalidInputError(f"non-final round {i + 1} has an empty answer")


def build_round_input(record: ConversationRecord, r: int, history_mode: str = "full") -> str:
    """Raw text input for round r (1-based), by direct concatenation.

    full mode unrolls the whole history; previous_only keeps just the
    (query, answer) pair of round r-1 plus the current query.
    """
    if not 1 <= r <= len(record.rounds):
        raise InvalidInputError(f"round {r} out of range 1..{len(record.rounds)}")
    if history_mode not in ("full", "previous_only"):
        raise InvalidInputError(f"unknown history mode {history_mode!r}")
    if r == 1:
        return record.rounds[0].query
    start = 0 if history_mode == "full" else r - 2
    parts = []
    for prev in record.rounds[start : r - 1]:
        parts.append(prev.query)
        parts.append(prev.answer)
    parts.append(record.rounds[r - 1].query)
    return "".join(parts)


@dataclass(frozen=True)
class ChatTemplate:
    """Role markers and placeholder conventions for rendering conversations."""

    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    user_marker: str = "USER:"
    assistant_marker: str = "ASSISTANT:"
    visual_placeholder: str = "<vis>"
    end_of_turn: str = "</s>"

    def to_dict(self) -> dict:
        return {
            "system_prompt": self.system_prompt,
            "user_marker": self.user_marker,
            "assistant_marker": self.assistant_marker,
            "visual_placeholder": self.visual_placeholder,
            "end_of_turn": self.end_of_turn,
        }


def _rounds_for_render(record: ConversationRecord, r: int, history_mode: str) -> List[Round]:
    if not 1 <= r <= len(record.rounds):
        raise InvalidInputError(f"round {r} out of range 1..{len(record.rounds)}")
    start = 0 if history_mode == "full" or r == 1 else r - 2
    return record.rounds[start:r]


def render_template(
    record: ConversationRecord,
    r: int,
    history_mode: str = "full",
    template: ChatTemplate = ChatTemplate(),
) -> str:
    """Render the prompt up to round r's query, ending at the assistant marker.

    Earlier rounds appear with their answers and end-of-turn markers; the
    visual placeholder appears exactly once, before the first user query.
    """
    if not template.visual_placeholder:
        raise ConfigurationError("chat template has no visual placeholder")
    rounds = _rounds_for_render(record, r, history_mode)
    parts: List[str] = []
    if template.system_prompt:
        parts.append(template.system_prompt)
    parts.append(template.visual_placeholder)
    for i, rnd in enumerate(rounds):
        parts.extend([template.user_marker, rnd.query, template.assistant_marker])
        if i < len(rounds) - 1:
            parts.extend([rnd.answer, template.end_of_turn])
    return " ".join(parts)


def render_conversation(
    record: ConversationRecord, template: ChatTemplate = ChatTemplate()
) -> str:
    """Render the full conversation with all answers, for supervised training."""
    if not template.visual_placeholder:
        raise ConfigurationError("chat template has no visual placeholder")
    parts: List[str] = []
    if template.system_prompt:
        parts.append(template.system_prompt)
    parts.append(template.visual_placeholder)
    for rnd in record.rounds:
        parts.extend([template.user_marker, rnd.query, template.assistant_marker])
        if rnd.answer:
            parts.extend([rnd.answer, template.end_of_turn])
    return " ".join(parts)


def parse_rendered(rendered: str, template: ChatTemplate = ChatTemplate()) -> List[Round]:
    """Invert render_conversation: recover the (query, answer) rounds."""
    body = rendered
    if template.system_prompt and body.startswith(template.system_prompt):
        body = body[len(template.system_prompt):].lstrip()
    if body.startswith(template.visual_placeholder):
        body = body[len(template.visual_placeholder):].lstrip()
    rounds: List[Round] = []
    chunks = [c for c in body.split(template.user_marker) if c.strip()]
    for chunk in chunks:
        if template.assistant_marker not in chunk:
            raise InvalidInputError("rendered text missing assistant marker")
        q, a = chunk.split(template.assistant_marker, 1)
        a = a.replace(template.end_of_turn, "").strip()
        rounds.append(Round(q.strip(), a))
    return rounds


class WhitespaceTokenizer:
    """Toy tokenizer: whitespace words against a fixed vocabulary, byte fallback for
    unknown words. Real tokenizers can be injected anywhere this one is accepted."""

    PAD = 0
    EOT = 1
    VIS = 2
    N_SPECIAL = 3
    N_BYTES = 256

    def __init__(self, template: ChatTemplate = ChatTemplate()):
        self.template = template
        self._word_to_id: dict = {}
        self._id_to_word: dict = {}

    @property
    def vocab_size(self) -> int:
        return self.N_SPECIAL + self.N_BYTES + len(self._word_to_id)

    def fit(self, texts: Sequence[str]) -> "WhitespaceTokenizer":
        words = sorted({w for t in texts for w in t.split() if not self._is_special(w)})
        for w in words:
            if w not in self._word_to_id:
                wid = self.N_SPECIAL + self.N_BYTES + len(self._word_to_id)
                self._word_to_id[w] = wid
                self._id_to_word[wid] = w
        return self

    def _is_special(self, word: str) -> bool:
        return word in (self.template.visual_placeholder, self.template.end_of_turn)

    def encode_word(self, word: str) -> List[int]:
        if word == self.template.visual_placeholder:
            return [self.VIS]
        if word == self.template.end_of_turn:
            return [self.EOT]
        if word in self._word_to_id:
            return [self._word_to_id[word]]
        return [self.N_SPECIAL + b for b in word.encode("utf-8")]

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words: List[str] = []
        pending: List[int] = []
        def flush():
            if pending:
                words.append(bytes(pending).decode("utf-8", errors="replace"))
                pending.clear()
        for i in ids:
            if self.N_SPECIAL <= i < self.N_SPECIAL + self.N_BYTES:
                pending.append(i - self.N_SPECIAL)
                continue
            flush()
            if i == self.VIS:
                words.append(self.template.visual_placeholder)
            elif i == self.EOT:
                words.append(self.template.end_of_turn)
            elif i in self._id_to_word:
                words.append(self._id_to_word[i])
        flush()
        return " ".join(words)

    def vocab_state(self) -> dict:
        return {"words": [self._id_to_word[k] for k in sorted(self._id_to_word)]}

    @classmethod
    def from_vocab_state(cls, state: dict, template: ChatTemplate = ChatTemplate()):
        tok = cls(template)
        tok.fit(state["words"])
        return tok


@dataclass
class TokenizedExample:
    """Token ids with an answer-only loss mask and the visual placeholder span."""

    token_ids: List[int]
    visual_span: Tuple[int, int]
    loss_mask: List[int]
    round_boundaries: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.token_ids) != len(self.loss_mask):
            raise InvalidInputError("loss mask length must equal token count")
        start, length = self.visual_span
        for p in range(start, start + length):
            if 0 <= p < len(self.loss_mask) and self.loss_mask[p]:
                raise InvalidInputError("visual span overlaps a supervised position")

    @property
    def num_supervised(self) -> int:
        return sum(self.loss_mask)


def _find_answer(rendered: str, answer: str, start: int) -> int:
    """Locate an answer at a word boundary at or after start."""
    pos = start
    while True:
        idx = rendered.find(answer, pos)
        if idx < 0:
            return -1
        before_ok = idx == 0 or rendered[idx - 1] == " "
        end = idx + len(answer)
        after_ok = end == len(rendered) or rendered[end] == " "
        if before_ok and after_ok:
            return idx
        pos = idx + 1


def tokenize_and_mask(
    rendered: str,
    answers: Sequence[str],
    tokenizer: WhitespaceTokenizer,
    template: Optional[ChatTemplate] = None,
) -> TokenizedExample:
    """Tokenize a rendered conversation, masking answer spans (and their
    end-of-turn tokens) for the loss."""
    template = template or tokenizer.template
    token_ids: List[int] = []
    loss_mask: List[int] = []
    cursor = 0

    def emit(text: str, mask: int):
        ids = tokenizer.encode(text)
        token_ids.extend(ids)
        loss_mask.extend([mask] * len(ids))

    for i, answer in enumerate(answers):
        idx = _find_answer(rendered, answer, cursor)
        if idx < 0:
            raise AlignmentError(f"answer for round {i + 1} not found in rendered text")
        emit(rendered[cursor:idx], 0)
        emit(answer, 1)
        cursor = idx + len(answer)
        eot = " " + template.end_of_turn
        if rendered.startswith(eot, cursor):
            emit(template.end_of_turn, 1)
            cursor += len(eot)
    emit(rendered[cursor:], 0)

    try:
        vis_pos = token_ids.index(WhitespaceTokenizer.VIS)
        visual_span = (vis_pos, 1)
    except ValueError:
        visual_span = (-1, 0)

    marker_ids = tokenizer.encode(template.user_marker)
    boundaries = [
        i for i in range(len(token_ids) - len(marker_ids) + 1)
        if token_ids[i : i + len(marker_ids)] == marker_ids
    ]
    return TokenizedExample(token_ids, visual_span, loss_mask, boundaries)


@dataclass
class SplicedExample:
    """Embedded input sequence after replacing the placeholder with visual rows."""

    embeddings: torch.Tensor  # S' x D_lm
    token_ids: List[int]  # placeholder id repeated over visual rows
    loss_mask: List[int]


def splice_visual(
    example: TokenizedExample,
    visual: torch.Tensor,
    embed_tokens,
) -> SplicedExample:
    """Replace the placeholder position with the M visual token rows.

    ``embed_tokens`` maps a token id sequence to S x D_lm embeddings; output
    length is S - 1 + M.
    """
    start, length = example.visual_span
    if start < 0 or length != 1:
        raise InvalidInputError("example has no visual placeholder span")
    text_emb = embed_tokens(example.token_ids)
    if visual.ndim != 2:
        raise InvalidInputError(f"visual tokens must be M x D_lm, got {tuple(visual.shape)}")
    if visual.shape[1] != text_emb.shape[1]:
        raise ConfigurationError(
            f"visual width {visual.shape[1]} != text embedding width {text_emb.shape[1]}"
        )
    m = visual.shape[0]
    emb = torch.cat([text_emb[:start], visual.to(text_emb.dtype), text_emb[start + 1 :]], dim=0)
    token_ids = (
        list(example.token_ids[:start])
        + [WhitespaceTokenizer.VIS] * m
        + list(example.token_ids[start + 1 :])
    )
    loss_mask = (
        list(example.loss_mask[:start]) + [0] * m + list(example.loss_mask[start + 1 :])
    )
    return SplicedExample(emb, token_ids, loss_mask)
