"""Planted-signal corpora and the separation measurement.

Each class owns a small set of signal tokens; everything else is drawn from
a shared noise vocabulary.  A token in a class-c document is a class-c
signal token with probability ``signal_rate``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from amb.core import AMBModel, discriminator_accuracy
from amb.corpus import Document, batch
from amb.trainer import Checkpoint


class SpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    num_classes: int = 4
    signal_size: int = 10          # signal tokens per class
    noise_size: int = 500
    sentences: tuple[int, int] = (3, 8)     # inclusive range per document
    tokens: tuple[int, int] = (5, 15)       # inclusive range per sentence
    signal_rate: float = 0.3
    train_size: int = 2000
    valid_size: int = 200
    test_size: int = 200
    seed: int = 0
    signal_sets: list[list[str]] | None = None   # optional explicit token sets
    noise_set: list[str] | None = None

    def __post_init__(self):
        self.sentences = tuple(self.sentences)
        self.tokens = tuple(self.tokens)

    def token_sets(self) -> tuple[list[list[str]], list[str]]:
        signal = self.signal_sets or [
            [f"c{c}s{i}" for i in range(self.signal_size)] for c in range(self.num_classes)
        ]
        noise = self.noise_set if self.noise_set is not None else [f"n{i}" for i in range(self.noise_size)]
        return signal, noise

    def validate(self) -> None:
        signal, noise = self.token_sets()
        if self.num_classes < 2 or len(signal) != self.num_classes:
            raise SpecError("need one signal set per class and at least two classes")
        if not 0.0 <= self.signal_rate <= 1.0:
            raise SpecError(f"signal_rate must lie in [0, 1], got {self.signal_rate}")
        if self.signal_rate < 1.0 and not noise:
            raise SpecError("noise set is empty but signal_rate < 1")
        if any(not s for s in signal):
            raise SpecError("empty signal set")
        seen: set[str] = set(noise)
        if len(seen) != len(noise):
            raise SpecError("noise set has duplicates")
        for c, tokens in enumerate(signal):
            overlap = seen.intersection(tokens)
            if overlap or len(set(tokens)) != len(tokens):
                raise SpecError(f"signal set {c} overlaps other token sets: {sorted(overlap)[:5]}")
            seen.update(tokens)
        for lo, hi in (self.sentences, self.tokens):
            if not 1 <= lo <= hi:
                raise SpecError(f"bad length range ({lo}, {hi})")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**raw)


def _documents(spec: SynthSpec, count: int, rng: np.random.Generator) -> list[Document]:
    signal, noise = spec.token_sets()
    k = spec.num_classes
    labels = np.arange(count) % k
    rng.shuffle(labels)
    docs = []
    for label in labels:
        sentences = []
        for _ in range(rng.integers(spec.sentences[0], spec.sentences[1] + 1)):
            length = rng.integers(spec.tokens[0], spec.tokens[1] + 1)
            from_signal = rng.random(length) < spec.signal_rate
            picks_s = rng.integers(0, len(signal[label]), size=length)
            picks_n = rng.integers(0, max(len(noise), 1), size=length)
            sentences.append([signal[label][ps] if hit else noise[pn]
                              for hit, ps, pn in zip(from_signal, picks_s, picks_n)])
        docs.append(Document(int(label), sentences))
    return docs


def generate(spec: SynthSpec) -> dict[str, list[Document]]:
    """Train/valid/test splits, fully determined by ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return {
        "train": _documents(spec, spec.train_size, rng),
        "valid": _documents(spec, spec.valid_size, rng),
        "test": _documents(spec, spec.test_size, rng),
    }


def counting_baseline(spec: SynthSpec, documents: Sequence[Document]) -> float:
    """Accuracy of predicting the class whose signal set has the most hits.

    Ties (including documents with no signal at all) go to the smallest class index.
    """
    signal, _ = spec.token_sets()
    owner = {tok: c for c, toks in enumerate(signal) for tok in toks}
    correct = 0
    for doc in documents:
        hits = np.zeros(spec.num_classes, dtype=np.int64)
        for sent in doc.sentences:
            for tok in sent:
                if tok in owner:
                    hits[owner[tok]] += 1
        correct += int(np.argmax(hits) == doc.label)
    return correct / len(documents) if documents else 0.0


@dataclass
class SeparationReport:
    shared_cosine: float        # mean pairwise cosine among a_adv(k)
    specific_cosine: float      # mean pairwise cosine among a_k
    discriminator_accuracy: float
    documents: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


def mean_pairwise_cosine(vectors: np.ndarray) -> np.ndarray:
    """``vectors: [K, B, D]`` -> per-document mean cosine over the K(K-1)/2 branch pairs, ``[B]``."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    unit = v / np.maximum(norms, 1e-12)
    k = v.shape[0]
    gram = np.einsum("kbd,jbd->bkj", unit, unit)
    iu = np.triu_indices(k, 1)
    return gram[:, iu[0], iu[1]].mean(axis=-1)


def measure_separation(checkpoint: Checkpoint, documents: Sequence[Document],
                       model: AMBModel | None = None) -> SeparationReport:
    model = model or checkpoint.model()
    vocab = checkpoint.vocabulary()
    shared, specific, disc = [], [], []
    weights = []
    for b in batch(vocab.encode_all(documents), 64, checkpoint.header["max_sentences"],
                   checkpoint.header["max_tokens"]):
        out = model.infer(b)
        shared.append(mean_pairwise_cosine(out.a_adv.data))
        specific.append(mean_pairwise_cosine(out.a.data))
        disc.append(discriminator_accuracy(out.p_d))
        weights.append(len(b))
    w = np.asarray(weights, dtype=np.float64)
    return SeparationReport(
        shared_cosine=float(np.concatenate(shared).mean()),
        specific_cosine=float(np.concatenate(specific).mean()),
        discriminator_accuracy=float(np.dot(disc, w) / w.sum()),
        documents=int(w.sum()),
    )


def write_corpus(splits: dict[str, list[Document]], out_dir: str | Path) -> dict[str, str]:
    from amb.corpus import write_jsonl

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, docs in splits.items():
        path = out / f"{name}.jsonl"
        write_jsonl(path, docs)
        paths[name] = str(path)
    return paths
