"""AMB model: class branches, binary heads, multi-class head, adversarial pair, losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from amb import han
from amb import tensor as T
from amb.config import LossWeights, ModelDims
from amb.corpus import Batch, ConfigError
from amb.tensor import Tensor


# ---------------------------------------------------------------------------
# losses


def binary_losses(a: Tensor, w_pos: Tensor, w_neg: Tensor, labels) -> Tensor:
    """Per-class one-vs-rest NLL, batch-averaged: ``[K]``.

    ``a: [K, B, D]``; ``w_pos[k]`` scores "class k", ``w_neg[k]`` scores "not k".
    """
    k, b, _ = a.shape
    labels = np.asarray(labels)
    pos = T.reduce_sum(T.mul(a, T.reshape(w_pos, (k, 1, -1))), axis=-1)
    neg = T.reduce_sum(T.mul(a, T.reshape(w_neg, (k, 1, -1))), axis=-1)
    probs = T.softmax(T.stack([pos, neg], axis=-1), axis=-1)
    y = (labels[None, :] == np.arange(k)[:, None]).astype(a.dtype)
    target = np.stack([y, 1.0 - y], axis=-1)
    nll = T.neg(T.reduce_sum(T.mul(T.log(probs), target), axis=-1))
    return T.reduce_mean(nll, axis=1)


def binary_loss(a_k: Tensor, w_pos_k: Tensor, w_neg_k: Tensor, labels, k: int) -> Tensor:
    """NLL of the k-vs-rest head for one class; ``a_k: [B, D]``."""
    one = binary_losses(T.reshape(a_k, (1,) + a_k.shape), T.reshape(w_pos_k, (1, -1)),
                        T.reshape(w_neg_k, (1, -1)), np.asarray(labels) - k)
    return T.reshape(one, ())


def multiclass_logits(a_stacked: Tensor, u: Tensor) -> Tensor:
    """``a_stacked: [B, K, D]``, ``u: [K, D]`` -> ``[B, K]`` with logit_i = u_i . a_i."""
    return T.reduce_sum(T.mul(a_stacked, u), axis=-1)


def multiclass_probs(a_stacked: Tensor, u: Tensor) -> Tensor:
    if a_stacked.shape[1] < 2:
        raise ValueError("multi-class head needs K >= 2")
    return T.softmax(multiclass_logits(a_stacked, u), axis=-1)


def nll_at(probs: Tensor, labels) -> Tensor:
    """Mean of -log probs[b, labels[b]] for ``probs: [B, K]``."""
    onehot = np.eye(probs.shape[-1], dtype=probs.dtype)[np.asarray(labels)]
    return T.neg(T.reduce_mean(T.reduce_sum(T.mul(T.log(probs), onehot), axis=-1)))


def discriminator_probs(a_adv: Tensor, v: Tensor, lambda_adv: float) -> Tensor:
    """``P_D[k, b, j]``: probability that ``a_adv[k, b]`` came from branch j.

    The input passes through gradient reversal, so minimising a loss built on
    these probabilities trains ``v`` to discriminate and whatever produced
    ``a_adv`` to confuse it.
    """
    r = T.gradient_reversal(a_adv, lambda_adv)
    return T.softmax(T.matmul(r, T.transpose(v, (1, 0))), axis=-1)


def discriminator_loss(p_d: Tensor) -> Tensor:
    """Mean over k and b of -log P_D(k | k)."""
    k = p_d.shape[0]
    target = np.eye(k, dtype=p_d.dtype)[:, None, :]
    return T.neg(T.reduce_mean(T.reduce_sum(T.mul(T.log(p_d), target), axis=-1)))


def adversarial_loss(e: Tensor, adv_head: dict[str, Tensor], v: Tensor, sentence_mask,
                     lambda_adv: float = 1.0, through_encoder: bool = False):
    """Shared attention over every branch's states, scored by the discriminator.

    Returns ``(loss, a_adv, weights, p_d)``.  Unless ``through_encoder`` is
    set the branch states are detached, so the encoders get no gradient from
    this term.
    """
    if e.shape[0] < 2:
        raise ValueError("adversarial loss needs K >= 2")
    source = e if through_encoder else T.stop_gradient(e)
    a_adv, weights = han.attend(source, adv_head, sentence_mask)
    p_d = discriminator_probs(a_adv, v, lambda_adv)
    return discriminator_loss(p_d), a_adv, weights, p_d


def diff_loss(a: Tensor, a_adv: Tensor) -> Tensor:
    """Batch mean of sum_k (a_k . a_adv(k))^2."""
    if a.shape != a_adv.shape:
        raise T.DimensionError(f"diff loss shapes differ: {a.shape} vs {a_adv.shape}")
    dots = T.reduce_sum(T.mul(a, a_adv), axis=-1)
    return T.reduce_mean(T.reduce_sum(T.square(dots), axis=0))


@dataclass
class LossParts:
    binary: Tensor   # [K]
    multi: Tensor
    adv: Tensor
    diff: Tensor

    def values(self) -> dict[str, float]:
        return {
            "bin": float(self.binary.data.sum()),
            "mul": float(self.multi.data),
            "adv": float(self.adv.data),
            "diff": float(self.diff.data),
        }


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """alpha * sum_k L_bin_k + beta * L_mul + gamma * L_adv + delta * L_diff."""
    weights.validate()
    dtype = parts.multi.dtype
    terms = [
        T.mul(T.reduce_sum(parts.binary), np.asarray(weights.alpha, dtype=dtype)),
        T.mul(parts.multi, np.asarray(weights.beta, dtype=dtype)),
        T.mul(parts.adv, np.asarray(weights.gamma, dtype=dtype)),
        T.mul(parts.diff, np.asarray(weights.delta, dtype=dtype)),
    ]
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def predict(p_mul) -> np.ndarray:
    """Row-wise argmax; ties go to the smallest class index."""
    p = p_mul.data if isinstance(p_mul, Tensor) else np.asarray(p_mul)
    return np.argmax(p, axis=-1)


# ---------------------------------------------------------------------------
# model


ENCODER_GROUPS = ("word_fw", "word_bw", "word_attn", "sent_fw", "sent_bw")


@dataclass
class Forward:
    e: Tensor            # [K, B, S, 2H]
    a: Tensor            # [K, B, 2H]
    weights: Tensor      # [K, B, S]
    a_adv: Tensor        # [K, B, 2H]
    adv_weights: Tensor  # [K, B, S]
    p_mul: Tensor        # [B, K]
    p_d: Tensor          # [K, B, K]
    parts: LossParts | None


class AMBModel:
    """All trainable parameters plus the forward pass.

    Parameters are kept in a flat, ordered ``name -> Tensor`` map; the
    names group as ``embedding``, ``word_fw.*`` ... (class encoders, stacked
    over K), ``cls_attn.*`` (class attention heads), ``adv_attn.*`` (shared
    adversarial attention), ``bin.w_pos``, ``bin.w_neg``, ``mul.u``, ``disc.v``.
    """

    def __init__(self, vocab_size: int, num_classes: int, dims: ModelDims | None = None,
                 seed: int = 0, dtype=np.float32):
        dims = dims or ModelDims()
        if num_classes < 2:
            raise ConfigError("AMB needs at least two classes")
        self.vocab_size = vocab_size
        self.num_classes = k = num_classes
        self.dims = dims
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        h2 = 2 * dims.d_h
        arrays: dict[str, np.ndarray] = {"embedding": han.init_embedding(rng, vocab_size, dims.d_emb, dtype)}
        layout = [
            ("word_fw", han.init_lstm(rng, k, dims.d_emb, dims.d_h, dtype)),
            ("word_bw", han.init_lstm(rng, k, dims.d_emb, dims.d_h, dtype)),
            ("word_attn", han.init_attention(rng, k, h2, dims.d_a, dtype)),
            ("sent_fw", han.init_lstm(rng, k, h2, dims.d_h, dtype)),
            ("sent_bw", han.init_lstm(rng, k, h2, dims.d_h, dtype)),
            ("cls_attn", han.init_attention(rng, k, h2, dims.d_a, dtype)),
            ("adv_attn", han.init_attention(rng, None, h2, dims.d_a, dtype)),
        ]
        for group, params in layout:
            for name, value in params.items():
                arrays[f"{group}.{name}"] = value
        arrays["bin.w_pos"] = han.glorot(rng, (k, h2), h2, 1, dtype)
        arrays["bin.w_neg"] = han.glorot(rng, (k, h2), h2, 1, dtype)
        arrays["mul.u"] = han.glorot(rng, (k, h2), h2, 1, dtype)
        arrays["disc.v"] = han.glorot(rng, (k, h2), h2, k, dtype)
        self.params: dict[str, Tensor] = {
            name: Tensor(value, requires_grad=True, dtype=dtype, name=name) for name, value in arrays.items()
        }

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {name.split(".", 1)[1]: p for name, p in self.params.items() if name.startswith(prefix + ".")}

    def names_in(self, *groups: str) -> list[str]:
        return [n for n in self.params if n.split(".", 1)[0] in groups]

    def encode(self, batch: Batch) -> Tensor:
        branch = {g: self.group(g) for g in ENCODER_GROUPS}
        return han.encode(batch, self.params["embedding"], branch)

    def infer(self, batch: Batch, lambda_adv: float = 1.0, through_encoder: bool = False) -> Forward:
        """Every representation and probability, without the losses."""
        e = self.encode(batch)
        a, weights = han.attend(e, self.group("cls_attn"), batch.sentence_mask)
        p_mul = multiclass_probs(T.transpose(a, (1, 0, 2)), self.params["mul.u"])
        source = e if through_encoder else T.stop_gradient(e)
        a_adv, adv_weights = han.attend(source, self.group("adv_attn"), batch.sentence_mask)
        p_d = discriminator_probs(a_adv, self.params["disc.v"], lambda_adv)
        return Forward(e, a, weights, a_adv, adv_weights, p_mul, p_d, None)

    def forward(self, batch: Batch, lambda_adv: float = 1.0, through_encoder: bool = False) -> Forward:
        out = self.infer(batch, lambda_adv, through_encoder)
        p = self.params
        out.parts = LossParts(
            binary=binary_losses(out.a, p["bin.w_pos"], p["bin.w_neg"], batch.labels),
            multi=nll_at(out.p_mul, batch.labels),
            adv=discriminator_loss(out.p_d),
            diff=diff_loss(out.a, out.a_adv),
        )
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            value = state[name]
            if value.shape != p.shape:
                raise T.DimensionError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = np.array(value, dtype=self.dtype)


def discriminator_accuracy(p_d) -> float:
    """Fraction of (k, b) where the discriminator names branch k."""
    p = p_d.data if isinstance(p_d, Tensor) else np.asarray(p_d)
    k = p.shape[0]
    return float((p.argmax(axis=-1) == np.arange(k)[:, None]).mean())


def stack_branches(vectors: Sequence[Tensor]) -> Tensor:
    """List of K ``[B, D]`` tensors -> ``[K, B, D]``."""
    return T.stack(list(vectors), axis=0)
