"""Hierarchical attention encoders, one per class, over a shared embedding.

All K branches are stored stacked along a leading axis so a single numpy
call runs every branch; slice ``k`` of each parameter belongs to branch ``k``
alone, so branches never mix.
"""

from __future__ import annotations

import numpy as np

from amb import tensor as T
from amb.corpus import Batch
from amb.tensor import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_lstm(rng, k: int, d_in: int, hid: int, dtype=np.float32) -> dict[str, np.ndarray]:
    bias = np.zeros((k, 4 * hid), dtype=dtype)
    bias[:, hid:2 * hid] = 1.0  # forget gate
    return {
        "w_x": glorot(rng, (k, d_in, 4 * hid), d_in, 4 * hid, dtype),
        "w_h": glorot(rng, (k, hid, 4 * hid), hid, 4 * hid, dtype),
        "b": bias,
    }


def init_attention(rng, k: int | None, d_in: int, d_a: int, dtype=np.float32) -> dict[str, np.ndarray]:
    lead = () if k is None else (k,)
    return {
        "proj": glorot(rng, lead + (d_in, d_a), d_in, d_a, dtype),
        "bias": np.zeros(lead + (d_a,), dtype=dtype),
        "ctx": glorot(rng, lead + (d_a,), d_a, 1, dtype),
    }


def init_embedding(rng, vocab_size: int, d_emb: int, dtype=np.float32) -> np.ndarray:
    table = rng.uniform(-0.05, 0.05, size=(vocab_size, d_emb)).astype(dtype)
    table[0] = 0.0
    return table


def bilstm(x: Tensor, mask: np.ndarray, fw: dict[str, Tensor], bw: dict[str, Tensor]) -> Tensor:
    """Concatenate forward and backward hidden states: ``[K, N, T, 2H]``."""
    h_f = T.lstm(x, mask, fw["w_x"], fw["w_h"], fw["b"])
    h_b = T.lstm(x, mask, bw["w_x"], bw["w_h"], bw["b"], reverse=True)
    return T.concat([h_f, h_b], axis=-1)


def masked_attention(h: Tensor, mask: np.ndarray, head: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Attention pooling over the second-to-last axis of ``h: [K, N, S, D]``.

    ``head`` tensors are either per-branch (``proj: [K, D, A]``) or shared
    (``proj: [D, A]``).  Rows with no unmasked positions are allowed here and
    produce a uniform average over padding.
    """
    k, n, s, d = h.shape
    proj, bias, ctx = head["proj"], head["bias"], head["ctx"]
    if proj.ndim == 3:
        flat = T.reshape(h, (k, n * s, d))
        u = T.tanh(T.add(T.matmul(flat, proj), T.reshape(bias, (k, 1, -1))))
        scores = T.matmul(u, T.reshape(ctx, (k, -1, 1)))
    else:
        u = T.tanh(T.add(T.matmul(h, proj), bias))
        scores = T.matmul(u, T.reshape(ctx, (-1, 1)))
    scores = T.reshape(scores, (k, n, s))
    weights = T.softmax(T.mask_fill(scores, mask[None]), axis=-1)
    pooled = T.reduce_sum(T.mul(T.reshape(weights, (k, n, s, 1)), h), axis=2)
    return pooled, weights


def attend(e: Tensor, head: dict[str, Tensor], sentence_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Sentence-level attention: returns the pooled vectors ``[K, B, 2H]`` and weights ``[K, B, S]``."""
    sentence_mask = np.asarray(sentence_mask)
    if sentence_mask.shape != e.shape[1:3]:
        raise T.DimensionError(f"mask shape {sentence_mask.shape} does not match states {e.shape}")
    if (sentence_mask.sum(axis=-1) == 0).any():
        raise ValueError("attention over a document with no real sentences")
    return masked_attention(e, sentence_mask, head)


def encode(batch: Batch, embedding: Tensor, branch: dict[str, dict[str, Tensor]]) -> Tensor:
    """Run every class encoder over ``batch``; returns ``e: [K, B, S, 2H]``.

    Per sentence: embed, word BiLSTM, word attention to a sentence vector;
    then a sentence BiLSTM over those vectors.
    """
    b, s, t = batch.token_ids.shape
    # all-pad sentences would pool to zero vectors; skip them and scatter back
    real = np.flatnonzero(batch.sentence_mask.reshape(-1))
    wmask = batch.word_mask.reshape(b * s, t)[real]
    x = T.embedding(embedding, batch.token_ids.reshape(b * s, t)[real])
    words = bilstm(x, wmask, branch["word_fw"], branch["word_bw"])
    sent_vecs, _ = masked_attention(words, wmask, branch["word_attn"])
    k = sent_vecs.shape[0]
    sent_vecs = T.scatter(sent_vecs, real, b * s, axis=1)
    sent_in = T.reshape(sent_vecs, (k, b, s, sent_vecs.shape[-1]))
    return bilstm(sent_in, batch.sentence_mask, branch["sent_fw"], branch["sent_bw"])
