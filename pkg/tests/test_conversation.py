import pytest
import torch
from hypothesis import given, settings
import hypothesis.strategies as st

from surgvla.conversation import (
    ChatTemplate,
    ConversationRecord,
    Round,
    WhitespaceTokenizer,
    build_round_input,
    parse_rendered,
    render_conversation,
    render_template,
    splice_visual,
    tokenize_and_mask,
)
from surgvla.errors import AlignmentError, ConfigurationError, InvalidInputError

word = st.text(alphabet="abcdefghij", min_size=1, max_size=6)
phrase = st.lists(word, min_size=1, max_size=4).map(" ".join)


def records(max_rounds=6):
    return st.lists(
        st.tuples(phrase, phrase), min_size=1, max_size=max_rounds
    ).map(lambda qa: ConversationRecord("v0", [Round(q, a) for q, a in qa]))


@pytest.fixture()
def record():
    return ConversationRecord(
        "v0",
        [Round("what phase is this", "calot triangle dissection"),
         Round("which tool is used", "a grasper"),
         Round("is bleeding visible", "no active bleeding")],
    )


@pytest.fixture()
def template():
    return ChatTemplate(system_prompt="SYS")


@pytest.fixture()
def tokenizer(record, template):
    tok = WhitespaceTokenizer(template)
    tok.fit([render_conversation(record, template), "SYS USER: ASSISTANT:"])
    return tok


class TestRoundInput:
    def test_first_round_is_query_alone(self, record):
        assert build_round_input(record, 1) == "what phase is this"

    def test_second_round_concatenates_previous_pair(self, record):
        expected = "what phase is this" + "calot triangle dissection" + "which tool is used"
        assert build_round_input(record, 2, "full") == expected
        assert build_round_input(record, 2, "previous_only") == expected

    def test_third_round_full_history(self, record):
        expected = (
            "what phase is this" + "calot triangle dissection"
            + "which tool is used" + "a grasper" + "is bleeding visible"
        )
        assert build_round_input(record, 3, "full") == expected

    def test_third_round_previous_only(self, record):
        expected = "which tool is used" + "a grasper" + "is bleeding visible"
        assert build_round_input(record, 3, "previous_only") == expected

    def test_round_out_of_range(self, record):
        with pytest.raises(InvalidInputError):
            build_round_input(record, 4)
        with pytest.raises(InvalidInputError):
            build_round_input(record, 0)

    @given(records())
    @settings(max_examples=50, deadline=None)
    def test_prefix_property_full_mode(self, rec):
        for r in range(1, len(rec.rounds)):
            prefix = build_round_input(rec, r, "full") + rec.rounds[r - 1].answer
            assert build_round_input(rec, r + 1, "full").startswith(prefix)

    def test_record_validation(self):
        with pytest.raises(InvalidInputError):
            ConversationRecord("v", [])
        with pytest.raises(InvalidInputError):
            ConversationRecord("v", [Round("", "a")])
        with pytest.raises(InvalidInputError):
            ConversationRecord("v", [Round("q", ""), Round("q2", "a2")])
        # final-round answer may be empty at inference
        ConversationRecord("v", [Round("q", "a"), Round("q2", "")])


class TestRenderTemplate:
    def test_single_round_prompt(self, template):
        rec = ConversationRecord("v", [Round("q1", "")])
        assert render_template(rec, 1, "full", template) == "SYS <vis> USER: q1 ASSISTANT:"

    def test_empty_system_prompt_omitted(self):
        rec = ConversationRecord("v", [Round("q1", "")])
        tpl = ChatTemplate(system_prompt="")
        assert render_template(rec, 1, "full", tpl) == "<vis> USER: q1 ASSISTANT:"

    def test_placeholder_appears_exactly_once(self, record, template):
        rendered = render_template(record, 2, "full", template)
        assert rendered.count("<vis>") == 1
        assert rendered.index("<vis>") < rendered.index("USER:")

    def test_missing_placeholder_rejected(self, record):
        tpl = ChatTemplate(visual_placeholder="")
        with pytest.raises(ConfigurationError):
            render_template(record, 1, "full", tpl)
        with pytest.raises(ConfigurationError):
            render_conversation(record, tpl)

    def test_deterministic(self, record, template):
        assert render_conversation(record, template) == render_conversation(record, template)

    def test_round_trip_recovers_rounds(self, record, template):
        rendered = render_conversation(record, template)
        recovered = parse_rendered(rendered, template)
        assert [(r.query, r.answer) for r in recovered] == [
            (r.query, r.answer) for r in record.rounds
        ]


class TestTokenizeAndMask:
    def test_inference_round_all_zero_mask(self, record, template, tokenizer):
        rendered = render_template(record, 1, "full", template)
        ex = tokenize_and_mask(rendered, [], tokenizer, template)
        assert sum(ex.loss_mask) == 0

    def test_answer_tokens_plus_end_of_turn(self, template, tokenizer):
        rec = ConversationRecord("v", [Round("what phase is this", "calot triangle dissection")])
        rendered = render_conversation(rec, template)
        assert len(tokenizer.encode("calot triangle dissection")) == 3
        ex = tokenize_and_mask(rendered, ["calot triangle dissection"], tokenizer, template)
        assert sum(ex.loss_mask) == 4  # 3 answer tokens + end of turn

    def test_mask_never_overlaps_visual_span(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        ex = tokenize_and_mask(
            rendered, [r.answer for r in record.rounds], tokenizer, template
        )
        start, length = ex.visual_span
        assert all(ex.loss_mask[p] == 0 for p in range(start, start + length))

    def test_mask_sum_equals_answer_token_count(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        answers = [r.answer for r in record.rounds]
        ex = tokenize_and_mask(rendered, answers, tokenizer, template)
        expected = sum(len(tokenizer.encode(a)) for a in answers) + len(answers)
        assert sum(ex.loss_mask) == expected

    def test_masked_tokens_are_answer_tokens(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        answers = [r.answer for r in record.rounds]
        ex = tokenize_and_mask(rendered, answers, tokenizer, template)
        masked = [t for t, m in zip(ex.token_ids, ex.loss_mask) if m]
        expected = []
        for a in answers:
            expected.extend(tokenizer.encode(a) + [WhitespaceTokenizer.EOT])
        assert masked == expected

    def test_alignment_failure_names_round(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        with pytest.raises(AlignmentError, match="round 1"):
            tokenize_and_mask(rendered, ["not in the text"], tokenizer, template)

    def test_round_boundaries_count_rounds(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        ex = tokenize_and_mask(
            rendered, [r.answer for r in record.rounds], tokenizer, template
        )
        assert len(ex.round_boundaries) == len(record.rounds)

    def test_deterministic_token_ids(self, record, template, tokenizer):
        rendered = render_conversation(record, template)
        a = tokenize_and_mask(rendered, [record.rounds[0].answer], tokenizer, template)
        b = tokenize_and_mask(rendered, [record.rounds[0].answer], tokenizer, template)
        assert a.token_ids == b.token_ids and a.loss_mask == b.loss_mask


class TestTokenizer:
    def test_unknown_words_fall_back_to_bytes(self, tokenizer):
        ids = tokenizer.encode("zzz")
        assert ids == [WhitespaceTokenizer.N_SPECIAL + b for b in b"zzz"]

    def test_decode_inverts_encode(self, tokenizer):
        text = "what phase is this </s> zzz"
        assert tokenizer.decode(tokenizer.encode(text)) == text

    def test_vocab_state_round_trip(self, tokenizer, template):
        clone = WhitespaceTokenizer.from_vocab_state(tokenizer.vocab_state(), template)
        text = "calot triangle dissection"
        assert clone.encode(text) == tokenizer.encode(text)


class TestSplice:
    def _example(self, tokenizer, template, record):
        rendered = render_conversation(
            ConversationRecord("v", record.rounds[:1]), template
        )
        return tokenize_and_mask(rendered, [record.rounds[0].answer], tokenizer, template)

    def test_length_arithmetic(self, record, template, tokenizer):
        ex = self._example(tokenizer, template, record)
        emb = torch.nn.Embedding(tokenizer.vocab_size, 8)
        visual = torch.zeros(4, 8)
        spliced = splice_visual(ex, visual, lambda ids: emb(torch.tensor(ids)))
        assert spliced.embeddings.shape[0] == len(ex.token_ids) - 1 + 4

    def test_identity_substitution(self, record, template, tokenizer):
        ex = self._example(tokenizer, template, record)
        emb = torch.nn.Embedding(tokenizer.vocab_size, 8)
        embed = lambda ids: emb(torch.tensor(ids))
        placeholder_row = embed([WhitespaceTokenizer.VIS])
        spliced = splice_visual(ex, placeholder_row, embed)
        assert torch.equal(spliced.embeddings, embed(ex.token_ids))

    def test_mask_alignment_preserved(self, record, template, tokenizer):
        ex = self._example(tokenizer, template, record)
        emb = torch.nn.Embedding(tokenizer.vocab_size, 8)
        spliced = splice_visual(ex, torch.zeros(5, 8), lambda ids: emb(torch.tensor(ids)))
        masked = [t for t, m in zip(spliced.token_ids, spliced.loss_mask) if m]
        expected = [t for t, m in zip(ex.token_ids, ex.loss_mask) if m]
        assert masked == expected

    def test_width_mismatch(self, record, template, tokenizer):
        ex = self._example(tokenizer, template, record)
        emb = torch.nn.Embedding(tokenizer.vocab_size, 8)
        with pytest.raises(ConfigurationError):
            splice_visual(ex, torch.zeros(4, 16), lambda ids: emb(torch.tensor(ids)))

    def test_missing_placeholder(self, tokenizer, template):
        ex = tokenize_and_mask("no placeholder here", [], tokenizer, template)
        emb = torch.nn.Embedding(tokenizer.vocab_size, 8)
        with pytest.raises(InvalidInputError):
            splice_visual(ex, torch.zeros(4, 8), lambda ids: emb(torch.tensor(ids)))
