"""Documents, vocabulary, JSONL ingestion and padded batching."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
# keep letters/digits and apostrophes that sit between two word characters
_STRIP = re.compile(r"(?:(?<!\w)'|'(?!\w)|[^\w'])+")


class CorpusError(ValueError):
    """Bad corpus input (empty split, malformed JSONL line, label out of range)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class Document:
    """A labelled document.  ``sentences`` holds token strings or, after
    :meth:`Vocabulary.encode`, token ids."""

    label: int
    sentences: list[list]

    def __post_init__(self):
        if not self.sentences or any(len(s) == 0 for s in self.sentences):
            raise CorpusError("a document needs at least one sentence and no empty sentences")


@dataclass
class Batch:
    token_ids: np.ndarray       # [B, S, T] int64
    word_mask: np.ndarray       # [B, S, T] float32 in {0, 1}
    sentence_mask: np.ndarray   # [B, S] float32 in {0, 1}
    labels: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def tokenize(text: str) -> list[list[str]]:
    """Split raw text into sentences of lower-cased word tokens.

    Sentences end at ``.``, ``!`` or ``?`` followed by whitespace.
    Punctuation is dropped except apostrophes inside a word.
    """
    sentences = [_words(chunk) for chunk in _SENTENCE_END.split(text.strip())]
    return [s for s in sentences if s]


def _words(sentence: str) -> list[str]:
    return _STRIP.sub(" ", sentence.lower()).split()


class Vocabulary:
    """Token/id map.  Ids 0 and 1 are reserved for padding and unknown."""

    def __init__(self, tokens: Sequence[str], min_count: int = 6):
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN, *tokens]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id and self.token_to_id[token] >= 2

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, doc: Document) -> Document:
        return Document(doc.label, [[self.id(t) for t in s] for s in doc.sentences])

    def encode_all(self, docs: Iterable[Document]) -> list[Document]:
        return [self.encode(d) for d in docs]

    def save(self, path: str | Path) -> None:
        """One token per line; line number is ``id - 2``."""
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, min_count: int = 6) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, min_count=min_count)


def build_vocabulary(documents: Sequence[Document], min_count: int = 6) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times.

    Ids follow descending frequency; equal counts are ordered lexicographically.
    """
    counts = Counter(tok for doc in documents for sent in doc.sentences for tok in sent)
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count=min_count)


def _parse_record(obj, lineno: int, num_classes: int | None) -> Document:
    if not isinstance(obj, dict) or "label" not in obj:
        raise CorpusError(f"line {lineno}: expected an object with a 'label' field")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise CorpusError(f"line {lineno}: label must be a non-negative integer, got {label!r}")
    if num_classes is not None and label >= num_classes:
        raise CorpusError(f"line {lineno}: label {label} out of range for {num_classes} classes")
    if "sentences" in obj:
        if not isinstance(obj["sentences"], list):
            raise CorpusError(f"line {lineno}: 'sentences' must be a list of strings")
        sentences = [w for w in (_words(str(s)) for s in obj["sentences"]) if w]
    elif "text" in obj:
        sentences = tokenize(str(obj["text"]))
    else:
        raise CorpusError(f"line {lineno}: expected 'text' or 'sentences'")
    if not sentences:
        raise CorpusError(f"line {lineno}: document has no tokens")
    return Document(label, sentences)


def load_jsonl(path: str | Path, num_classes: int | None = None) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            docs.append(_parse_record(obj, lineno, num_classes))
    return docs


def write_jsonl(path: str | Path, documents: Iterable[Document]) -> None:
    """Write token documents as ``{"label", "sentences"}`` records, one sentence per string."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            rec = {"label": doc.label, "sentences": [" ".join(map(str, s)) for s in doc.sentences]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def pad_documents(documents: Sequence[Document], max_sentences: int = 30, max_tokens: int = 40) -> Batch:
    """Pad id documents into one batch, truncating long documents and sentences."""
    docs = [d.sentences[:max_sentences] for d in documents]
    n_sent = max(len(s) for s in docs)
    n_tok = max(min(len(w), max_tokens) for s in docs for w in s)
    ids = np.zeros((len(docs), n_sent, n_tok), dtype=np.int64)
    for b, sents in enumerate(docs):
        for s, words in enumerate(sents):
            words = words[:max_tokens]
            ids[b, s, :len(words)] = words
    wmask = np.zeros(ids.shape, dtype=np.float32)
    smask = np.zeros(ids.shape[:2], dtype=np.float32)
    for b, sents in enumerate(docs):
        smask[b, :len(sents)] = 1.0
        for s, words in enumerate(sents):
            wmask[b, s, :min(len(words), max_tokens)] = 1.0
    return Batch(ids, wmask, smask, [d.label for d in documents])


def batch(documents: Sequence[Document], batch_size: int = 32, max_sentences: int = 30,
          max_tokens: int = 40, shuffle_seed: int | None = None) -> list[Batch]:
    """Split id documents into padded batches.

    With ``shuffle_seed`` the document order is permuted deterministically
    first.  The final partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(documents))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(documents))
    return [
        pad_documents([documents[i] for i in order[start:start + batch_size]], max_sentences, max_tokens)
        for start in range(0, len(documents), batch_size)
    ]
