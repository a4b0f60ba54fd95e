import numpy as np
import pytest

from amb import han
from amb import tensor as T
from amb.config import ModelDims
from amb.core import AMBModel
from amb.corpus import Document, pad_documents
from amb.tensor import Tensor

DIMS = ModelDims(d_emb=6, d_h=3, d_a=4)


def small_model(k=3, vocab=20, seed=0):
    return AMBModel(vocab, k, DIMS, seed=seed, dtype=np.float64)


def random_docs(rng, n, vocab=20, max_s=4, max_t=5):
    return [Document(int(rng.integers(3)),
                     [list(rng.integers(2, vocab, size=rng.integers(1, max_t + 1)))
                      for _ in range(rng.integers(1, max_s + 1))])
            for _ in range(n)]


def attention_head(rng, k, d, a):
    return {name: Tensor(v, dtype=np.float64) for name, v in
            han.init_attention(rng, k, d, a, np.float64).items()}


def reference_attend(e, head, mask):
    """Loop-based float64 attention pooling."""
    k, b, s, _ = e.shape
    proj, bias, ctx = (np.asarray(head[n], dtype=np.float64) for n in ("proj", "bias", "ctx"))
    pooled = np.zeros((k, b, e.shape[-1]))
    weights = np.zeros((k, b, s))
    for i in range(k):
        p, bb, c = (proj[i], bias[i], ctx[i]) if proj.ndim == 3 else (proj, bias, ctx)
        for j in range(b):
            real = [t for t in range(s) if mask[j, t]]
            scores = np.array([np.tanh(e[i, j, t] @ p + bb) @ c for t in real])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for t, wt in zip(real, w):
                weights[i, j, t] = wt
                pooled[i, j] += wt * e[i, j, t]
    return pooled, weights


class TestAttend:
    def test_single_sentence_gets_all_weight(self):
        rng = np.random.default_rng(0)
        e = Tensor(rng.normal(size=(2, 3, 1, 4)), dtype=np.float64)
        pooled, weights = han.attend(e, attention_head(rng, 2, 4, 3), np.ones((3, 1)))
        assert np.array_equal(weights.data, np.ones((2, 3, 1)))
        np.testing.assert_allclose(pooled.data, e.data[:, :, 0])

    def test_identical_sentences_split_evenly(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=4)
        e = Tensor(np.broadcast_to(row, (2, 1, 2, 4)).copy(), dtype=np.float64)
        _, weights = han.attend(e, attention_head(rng, 2, 4, 3), np.ones((1, 2)))
        np.testing.assert_allclose(weights.data, 0.5, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("shared", [False, True])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_reference(self, seed, shared):
        rng = np.random.default_rng(seed)
        k, b, s, d = 3, 4, 5, 6
        e = rng.normal(size=(k, b, s, d))
        mask = np.zeros((b, s))
        for j, n in enumerate(rng.integers(1, s + 1, size=b)):
            mask[j, :n] = 1
        head = attention_head(rng, None if shared else k, d, 4)
        pooled, weights = han.attend(Tensor(e, dtype=np.float64), head, mask)
        ref_pooled, ref_weights = reference_attend(e, {n: t.data for n, t in head.items()}, mask)
        np.testing.assert_allclose(pooled.data, ref_pooled, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(weights.data, ref_weights, rtol=1e-12, atol=1e-14)
        assert np.all(weights.data[:, mask == 0] == 0)

    def test_all_masked_document_rejected(self):
        rng = np.random.default_rng(2)
        e = Tensor(rng.normal(size=(2, 2, 3, 4)), dtype=np.float64)
        mask = np.array([[1, 1, 0], [0, 0, 0]])
        with pytest.raises(ValueError):
            han.attend(e, attention_head(rng, 2, 4, 3), mask)

    def test_mask_shape_checked(self):
        rng = np.random.default_rng(3)
        e = Tensor(rng.normal(size=(2, 2, 3, 4)), dtype=np.float64)
        with pytest.raises(T.DimensionError):
            han.attend(e, attention_head(rng, 2, 4, 3), np.ones((2, 4)))


class TestEncode:
    def test_shapes(self):
        model = small_model(k=3)
        docs = random_docs(np.random.default_rng(0), 5)
        b = pad_documents(docs, 4, 5)
        e = model.encode(b)
        assert e.shape == (3, 5) + b.sentence_mask.shape[1:] + (2 * DIMS.d_h,)
        out = model.infer(b)
        assert out.a.shape == (3, 5, 2 * DIMS.d_h)
        assert out.p_mul.shape == (5, 3)
        assert out.p_d.shape == (3, 5, 3)
        np.testing.assert_allclose(out.weights.data.sum(-1), 1.0)
        np.testing.assert_allclose(out.adv_weights.data.sum(-1), 1.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_padding_invariance(self, seed):
        """Extra padding, in either direction, leaves every real position untouched."""
        model = small_model(seed=seed)
        docs = random_docs(np.random.default_rng(seed), 6)
        tight = pad_documents(docs, 4, 5)
        s = tight.sentence_mask.shape[1]
        # a longer companion document forces a wider padded tensor
        wide = pad_documents(docs + [Document(0, [[3] * 5] * 4)], 4, 5)
        wide_e = model.encode(wide).data[:, :6, :s]
        assert wide.token_ids.shape[1:] == (4, 5)
        tight_e = model.encode(tight).data
        real = tight.sentence_mask.astype(bool)
        np.testing.assert_allclose(wide_e[:, real], tight_e[:, real], rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(model.infer(wide).a.data[:, :6], model.infer(tight).a.data,
                                   rtol=1e-12, atol=1e-13)

    def test_document_alone_matches_document_in_batch(self):
        model = small_model()
        docs = random_docs(np.random.default_rng(9), 5)
        together = model.infer(pad_documents(docs, 4, 5)).a.data
        for i, doc in enumerate(docs):
            alone = model.infer(pad_documents([doc], 4, 5)).a.data
            np.testing.assert_allclose(alone[:, 0], together[:, i], rtol=1e-12, atol=1e-13)

    def test_branch_independence(self):
        """Changing branch 1's encoder or head never moves branch 0 or 2."""
        model = small_model(k=3)
        b = pad_documents(random_docs(np.random.default_rng(4), 4), 4, 5)
        before = model.infer(b)
        for name in model.names_in("word_fw", "word_bw", "word_attn", "sent_fw", "sent_bw", "cls_attn"):
            model.params[name].data[1] += 0.3
        after = model.infer(b)
        for k in (0, 2):
            np.testing.assert_array_equal(after.e.data[k], before.e.data[k])
            np.testing.assert_array_equal(after.a.data[k], before.a.data[k])
        assert not np.allclose(after.a.data[1], before.a.data[1])
