import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wlpred.textnorm import (
    DELETION,
    INSERTION,
    MATCH,
    SUBSTITUTION,
    InconsistentOffsets,
    ReferenceTranscript,
    align_and_label,
    alignment_cost,
    map_tokens_to_words,
    normalize_text,
    normalize_transcript,
    ops_to_codes,
)

WORDS = st.lists(st.sampled_from(["a", "b", "c"]), max_size=6)


class TestNormalize:
    def test_quotes_and_dashes(self):
        assert normalize_transcript("Don’t—stop!") == ["don't", "stop"]

    def test_empty(self):
        assert normalize_transcript("") == []

    def test_slash_split(self):
        assert normalize_transcript("A/B test") == ["a", "b", "test"]

    def test_punctuation_removed_except_apostrophe(self):
        assert normalize_transcript('He said: "it\'s fine."') == ["he", "said", "it's", "fine"]

    def test_nfkc(self):
        # fullwidth letters and the fi ligature fold to ASCII
        assert normalize_transcript("ＨＩ ﬁt") == ["hi", "fit"]

    @given(st.text(max_size=60))
    @settings(max_examples=300)
    def test_idempotent(self, raw):
        once = normalize_text(raw)
        assert normalize_text(once) == once

    @given(st.text(max_size=60))
    def test_words_contain_no_punctuation(self, raw):
        import unicodedata

        for word in normalize_transcript(raw):
            for ch in word:
                assert ch == "'" or not unicodedata.category(ch).startswith("P")


class TestAlignAndLabel:
    def test_substitution(self):
        labels, ops = align_and_label(["i", "can", "hear"], ["i", "can", "here"])
        assert labels.correct == [1, 1, 0]
        assert labels.valid == [1, 1, 1]
        assert ops_to_codes(ops) == "MMS"

    def test_identity(self):
        labels, ops = align_and_label(["a", "b"], ["a", "b"])
        assert labels.correct == [1, 1]
        assert [op.kind for op in ops] == [MATCH, MATCH]

    def test_insertion(self):
        labels, ops = align_and_label(["a", "b"], ["a", "x", "b"])
        assert labels.correct == [1, 1]
        inserted = [op for op in ops if op.kind == INSERTION]
        assert len(inserted) == 1 and inserted[0].hyp_index == 1

    def test_empty_response_all_deletions(self):
        labels, ops = align_and_label(["a", "b", "c"], [])
        assert labels.correct == [0, 0, 0]
        assert [op.kind for op in ops] == [DELETION] * 3

    def test_empty_reference_all_insertions(self):
        labels, ops = align_and_label([], ["a", "b"])
        assert labels.correct == []
        assert [op.kind for op in ops] == [INSERTION] * 2

    def test_op_index_conventions(self):
        _, ops = align_and_label(["a"], ["b"])
        assert ops == [(SUBSTITUTION, 0, 0)]
        _, ops = align_and_label(["a"], [])
        assert ops[0].ref_index == 0 and ops[0].hyp_index is None
        _, ops = align_and_label([], ["a"])
        assert ops[0].ref_index is None and ops[0].hyp_index == 0

    @given(WORDS, WORDS)
    def test_label_count_matches_reference(self, ref, resp):
        labels, ops = align_and_label(ref, resp)
        assert len(labels.correct) == len(ref)
        assert len(labels.valid) == len(ref)
        assert sum(1 for op in ops if op.kind != INSERTION) == len(ref)

    @given(WORDS)
    def test_identity_gives_all_ones(self, ref):
        labels, _ = align_and_label(ref, list(ref))
        assert labels.correct == [1] * len(ref)

    @given(WORDS, WORDS)
    def test_cost_upper_bounds(self, ref, resp):
        _, ops = align_and_label(ref, resp)
        cost = alignment_cost(ops)
        assert cost <= max(len(ref), len(resp))
        assert cost >= abs(len(ref) - len(resp))


class TestReferenceTranscript:
    def test_char_spans(self):
        ref = ReferenceTranscript.from_raw("I can hear")
        assert ref.words == ["i", "can", "hear"]
        assert ref.char_spans == [(0, 1), (2, 5), (6, 10)]
        assert ref.text == "i can hear"

    def test_spans_strictly_increasing(self):
        ref = ReferenceTranscript.from_words(["aa", "b", "ccc"])
        for (s0, e0), (s1, _e1) in zip(ref.char_spans, ref.char_spans[1:]):
            assert s0 < e0 <= s1


class TestMapTokensToWords:
    def test_one_token_per_word(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        spans = map_tokens_to_words([("i", (0, 1)), ("can", (2, 5)), ("hear", (6, 10))], ref)
        assert spans == [[0], [1], [2]]
        assert ref.token_spans == spans

    def test_split_word_tokens(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        spans = map_tokens_to_words(
            [("i", (0, 1)), ("can", (2, 5)), ("he", (6, 8)), ("ar", (8, 10))], ref
        )
        assert spans == [[0], [1], [2, 3]]

    def test_prompt_tokens_excluded(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        spans = map_tokens_to_words(
            [("<|start|>", (0, 0)), ("i", (0, 1)), ("can hear", (1, 10))], ref
        )
        assert spans[0] == [1]
        assert 0 not in {i for span in spans for i in span}

    def test_majority_assignment_tie_to_earlier(self):
        ref = ReferenceTranscript.from_words(["ab", "cd"])  # spans (0,2), (3,5)
        # token covers one char of each word: tie goes to word 0
        spans = map_tokens_to_words([("b c", (1, 4))], ref)
        assert spans == [[0], []]

    def test_non_monotonic_offsets_rejected(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        with pytest.raises(InconsistentOffsets):
            map_tokens_to_words([("can", (2, 5)), ("i", (0, 1))], ref)

    def test_fallback_greedy_matching(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        spans = map_tokens_to_words(
            [("<|s|>", (0, 0)), ("i", None), (" ca", None), ("n", None), (" hear", None)], ref
        )
        assert spans == [[1], [2, 3], [4]]

    def test_empty_span_reported(self):
        ref = ReferenceTranscript.from_raw("i can hear")
        spans = map_tokens_to_words([("ican", (0, 5))], ref)
        assert spans[0] == [] or spans[1] == []
        assert [] in spans

    @given(st.lists(st.sampled_from(["ab", "cde", "f", "ghij"]), min_size=1, max_size=5), st.data())
    def test_partition_property(self, words, data):
        ref = ReferenceTranscript.from_words(words)
        # random contiguous tokenization of the normalized text
        text = ref.text
        cuts = sorted(data.draw(st.sets(st.integers(1, max(1, len(text) - 1)), max_size=6)))
        bounds = [0] + [c for c in cuts if c < len(text)] + [len(text)]
        tokens = [(text[s:e], (s, e)) for s, e in zip(bounds, bounds[1:]) if e > s]
        spans = map_tokens_to_words(tokens, ref)
        flat = [i for span in spans for i in span]
        assert len(flat) == len(set(flat))  # every token in at most one word
        # every token overlapping some word's characters is assigned
        for idx, (_text, (s, e)) in enumerate(tokens):
            overlaps = any(min(e, we) > max(s, ws) for ws, we in ref.char_spans)
            assert (idx in flat) == overlaps
