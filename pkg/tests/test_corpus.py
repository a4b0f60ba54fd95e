import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amb.corpus import (
    PAD_ID,
    UNK_ID,
    ConfigError,
    CorpusError,
    Document,
    Vocabulary,
    batch,
    build_vocabulary,
    load_jsonl,
    tokenize,
    write_jsonl,
)


def docs_from_counts(counts):
    tokens = [tok for tok, n in counts.items() for _ in range(n)]
    return [Document(0, [tokens])]


class TestVocabulary:
    def test_threshold_six(self):
        vocab = build_vocabulary(docs_from_counts({"cat": 6, "dog": 5}), min_count=6)
        assert "cat" in vocab
        assert vocab.id("dog") == UNK_ID

    def test_empty_corpus(self):
        with pytest.raises(CorpusError):
            build_vocabulary([], min_count=1)

    def test_tie_break_lexicographic(self):
        vocab = build_vocabulary(docs_from_counts({"zeta": 7, "alpha": 7, "mid": 9}), min_count=6)
        assert vocab.id_to_token[2:] == ["mid", "alpha", "zeta"]

    def test_reserved_ids(self):
        vocab = build_vocabulary(docs_from_counts({"a": 6}), min_count=6)
        assert vocab.id_to_token[PAD_ID] == "<pad>"
        assert vocab.id_to_token[UNK_ID] == "<unk>"
        assert vocab.id("a") == 2

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocabulary(docs_from_counts({"b": 8, "a": 6, "ünï": 7}), min_count=6)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert path.read_text(encoding="utf-8").splitlines() == ["b", "ünï", "a"]
        assert Vocabulary.load(path).id_to_token == vocab.id_to_token

    @given(st.dictionaries(st.text("abcdefg", min_size=1, max_size=4), st.integers(1, 12), min_size=1))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_and_threshold(self, counts):
        vocab = build_vocabulary(docs_from_counts(counts), min_count=6)
        for tok, n in counts.items():
            if n >= 6:
                assert vocab.id_to_token[vocab.token_to_id[tok]] == tok
            else:
                assert vocab.id(tok) == UNK_ID
        kept = vocab.id_to_token[2:]
        assert kept == sorted(kept, key=lambda t: (-counts[t], t))


class TestTokenize:
    def test_sentences_and_punctuation(self):
        assert tokenize("Hello, World! It's fine... 'quoted' ok? yes") == [
            ["hello", "world"], ["it's", "fine"], ["quoted", "ok"], ["yes"]]

    def test_no_terminator_is_one_sentence(self):
        assert tokenize("just some words") == [["just", "some", "words"]]

    def test_terminator_needs_whitespace(self):
        assert tokenize("v1.2 is out") == [["v1", "2", "is", "out"]]


class TestJsonl:
    def test_both_record_kinds(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            json.dumps({"label": 1, "text": "A b. C d!"}) + "\n"
            + json.dumps({"label": 0, "sentences": ["x y", "z"]}) + "\n", encoding="utf-8")
        docs = load_jsonl(path, num_classes=2)
        assert [d.label for d in docs] == [1, 0]
        assert docs[0].sentences == [["a", "b"], ["c", "d"]]
        assert docs[1].sentences == [["x", "y"], ["z"]]

    def test_malformed_line_named(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"label": 0, "text": "ok"}\n{not json\n', encoding="utf-8")
        with pytest.raises(CorpusError, match="line 2"):
            load_jsonl(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"label": 3, "text": "ok"}\n', encoding="utf-8")
        with pytest.raises(CorpusError, match="line 1"):
            load_jsonl(path, num_classes=3)

    def test_write_then_load(self, tmp_path):
        docs = [Document(2, [["a", "b"], ["c"]]), Document(0, [["d"]])]
        write_jsonl(tmp_path / "o.jsonl", docs)
        assert load_jsonl(tmp_path / "o.jsonl") == docs


def id_docs(rng, n, max_s=6, max_t=9):
    return [Document(int(rng.integers(3)), [list(rng.integers(2, 50, size=rng.integers(1, max_t + 1)))
                                            for _ in range(rng.integers(1, max_s + 1))]) for _ in range(n)]


class TestBatch:
    def test_masks_and_padding(self):
        docs = [Document(0, [[5, 6, 7], [8]]), Document(1, [[9, 10]])]
        (b,) = batch(docs, batch_size=4)
        assert b.token_ids.shape == (2, 2, 3)
        assert b.token_ids[1, 1].tolist() == [PAD_ID] * 3
        assert b.word_mask[0].tolist() == [[1, 1, 1], [1, 0, 0]]
        assert b.sentence_mask.tolist() == [[1, 1], [1, 0]]
        assert b.labels == [0, 1]

    def test_truncation(self):
        docs = [Document(0, [[1] * 10] * 5)]
        (b,) = batch(docs, batch_size=1, max_sentences=3, max_tokens=4)
        assert b.token_ids.shape == (1, 3, 4)
        assert b.word_mask.sum() == 12

    def test_last_partial_batch_kept(self):
        docs = id_docs(np.random.default_rng(0), 10)
        sizes = [len(b) for b in batch(docs, batch_size=4)]
        assert sizes == [4, 4, 2]

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            batch([Document(0, [[1]])], batch_size=0)

    def test_seeded_shuffle_is_reproducible(self):
        docs = id_docs(np.random.default_rng(1), 30)
        one = batch(docs, 8, shuffle_seed=5)
        two = batch(docs, 8, shuffle_seed=5)
        other = batch(docs, 8, shuffle_seed=6)
        assert all(a.token_ids.tobytes() == b.token_ids.tobytes() for a, b in zip(one, two))
        assert [a.labels for a in one] == [b.labels for b in two]
        assert any(a.token_ids.shape != b.token_ids.shape or a.token_ids.tobytes() != b.token_ids.tobytes()
                   for a, b in zip(one, other))

    @given(st.integers(0, 10_000), st.integers(1, 7), st.integers(1, 4), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_word_mask_counts_real_tokens(self, seed, bs, max_s, max_t):
        docs = id_docs(np.random.default_rng(seed), 9)
        expected = sum(min(len(w), max_t) for d in docs for w in d.sentences[:max_s])
        batches = batch(docs, bs, max_s, max_t, shuffle_seed=seed)
        assert sum(b.word_mask.sum() for b in batches) == expected
        for b in batches:
            assert np.all(b.token_ids[b.word_mask == 0] == PAD_ID)
            assert np.all(b.token_ids[b.word_mask == 1] != PAD_ID)
            assert np.array_equal(b.sentence_mask, b.word_mask.max(axis=-1))
