import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import MODULE_FLOOR, factory, projected_loss, randomize
from modpretrain import autograd as ag
from modpretrain.autograd import Tensor, backward
from modpretrain.embeddings import (
    EmbeddingSpec,
    EmbeddingStack,
    combine,
    extract_patches,
    patch_embed,
    pos_embed,
    seg_embed,
    speech_embed,
    subsampled_length,
    word_embed,
)
from modpretrain.errors import IdOutOfRange, IndivisibleImage, SequenceTooLong, SequenceTooShort, ShapeMismatch
from modpretrain.gradcheck import max_relative_error
from modpretrain.nn import RunContext

TOL = 1e-4


def table(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestWord:
    def test_lookup_identity(self):
        t = table(np.random.default_rng(0), 5, 3)
        np.testing.assert_array_equal(word_embed(np.array([[0]]), t).data[0, 0], t.data[0])

    def test_shape(self):
        t = table(np.random.default_rng(0), 100, 32)
        assert word_embed(np.zeros((2, 3), dtype=int), t).shape == (2, 3, 32)

    def test_grad_counts_occurrences(self):
        t = table(np.random.default_rng(0), 6, 4)
        ids = np.array([[1, 1, 2], [5, 1, 0]])
        backward(ag.tsum(word_embed(ids, t)))
        counts = np.bincount(ids.ravel(), minlength=6)
        np.testing.assert_array_equal(t.grad, np.repeat(counts[:, None], 4, axis=1))

    def test_out_of_range(self):
        with pytest.raises(IdOutOfRange):
            word_embed(np.array([[6]]), table(np.random.default_rng(0), 6, 4))


class TestPos:
    def test_one_position_is_row_zero(self):
        t = table(np.random.default_rng(0), 8, 4)
        np.testing.assert_array_equal(pos_embed(1, t).data, t.data[None, :1])

    def test_full_table(self):
        t = table(np.random.default_rng(0), 8, 4)
        np.testing.assert_array_equal(pos_embed(8, t).data[0], t.data)

    def test_too_long(self):
        with pytest.raises(SequenceTooLong):
            pos_embed(9, table(np.random.default_rng(0), 8, 4))

    def test_grad_only_reaches_used_rows(self):
        rng = np.random.default_rng(0)
        t = table(rng, 8, 4)
        words = table(rng, 2, 3, 4)
        backward(ag.tsum(ag.square(ag.add(words, pos_embed(3, t)))))
        assert np.all(t.grad[3:] == 0)
        assert np.all(np.abs(t.grad[:3]).sum(axis=1) > 0)


class TestSeg:
    def test_all_zero_segments(self):
        t = table(np.random.default_rng(0), 2, 4)
        out = seg_embed(np.zeros((1, 3), dtype=int), t).data
        np.testing.assert_array_equal(out[0], np.repeat(t.data[:1], 3, axis=0))

    def test_two_segments(self):
        t = table(np.random.default_rng(0), 2, 4)
        out = seg_embed(np.array([[0, 0, 1, 1]]), t).data[0]
        np.testing.assert_array_equal(out, t.data[[0, 0, 1, 1]])

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**16))
    @settings(max_examples=20, deadline=None)
    def test_shape_preserved(self, b, t, seed):
        rng = np.random.default_rng(seed)
        segs = rng.integers(0, 2, size=(b, t))
        assert seg_embed(segs, table(rng, 2, 5)).shape == (b, t, 5)

    def test_out_of_range(self):
        with pytest.raises(IdOutOfRange):
            seg_embed(np.array([[2]]), table(np.random.default_rng(0), 2, 4))


def naive_patches(image, p):
    b, c, h, w = image.shape
    rows = []
    for bi in range(b):
        seq = []
        for gi in range(h // p):
            for gj in range(w // p):
                vec = []
                for ch in range(c):
                    for di in range(p):
                        for dj in range(p):
                            vec.append(image[bi, ch, gi * p + di, gj * p + dj])
                seq.append(vec)
        rows.append(seq)
    return np.array(rows)


class TestPatch:
    def test_token_count(self):
        rng = np.random.default_rng(0)
        out = patch_embed(rng.standard_normal((1, 3, 32, 32)), table(rng, 192, 8), table(rng, 8), 8)
        assert out.shape == (1, 17, 8)

    def test_zero_image_zero_cls(self):
        rng = np.random.default_rng(0)
        bias = rng.standard_normal(8)
        out = patch_embed(np.zeros((2, 3, 16, 16)), table(rng, 192, 8), Tensor(np.zeros(8)), 8, bias=Tensor(bias))
        np.testing.assert_array_equal(out.data[:, 0], 0.0)
        np.testing.assert_array_equal(out.data[:, 1:], np.broadcast_to(bias, (2, 4, 8)))

    def test_extraction_matches_double_loop(self):
        image = np.random.default_rng(3).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(extract_patches(image, 2).data, naive_patches(image, 2))

    def test_indivisible(self):
        rng = np.random.default_rng(0)
        with pytest.raises(IndivisibleImage):
            patch_embed(np.zeros((1, 3, 30, 32)), table(rng, 192, 8), table(rng, 8), 8)


def naive_conv(x, w, b, stride, pad):
    t, cin = x.shape
    k, _, cout = w.shape
    xp = np.zeros((t + 2 * pad, cin))
    xp[pad:pad + t] = x
    out = []
    for s in range((t + 2 * pad - k) // stride + 1):
        acc = b.copy()
        for j in range(k):
            for ci in range(cin):
                for co in range(cout):
                    acc[co] += xp[s * stride + j, ci] * w[j, ci, co]
        out.append(acc)
    return np.array(out)


def exact_gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


class TestSpeech:
    def weights(self, rng, f, h):
        return [table(rng, 3, f, h), table(rng, h), table(rng, 3, h, h), table(rng, h), table(rng, h, h), table(rng, h)]

    @pytest.mark.parametrize("frames,expected", [(100, 25), (7, 2), (4, 1), (8, 2), (9, 3)])
    def test_subsampled_length(self, frames, expected):
        rng = np.random.default_rng(0)
        out = speech_embed(rng.standard_normal((1, frames, 4)), *self.weights(rng, 4, 6))
        assert out.shape == (1, expected, 6)
        assert subsampled_length(frames) == expected

    def test_too_short(self):
        rng = np.random.default_rng(0)
        with pytest.raises(SequenceTooShort):
            speech_embed(np.zeros((1, 3, 4)), *self.weights(rng, 4, 6))

    def test_matches_naive_convolution(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 8, 5))
        w1, b1, w2, b2, pw, pb = self.weights(rng, 5, 3)
        hid = exact_gelu(naive_conv(x[0], w1.data, b1.data, 2, 1))
        hid = naive_conv(hid, w2.data, b2.data, 2, 1)
        expected = hid @ pw.data + pb.data
        np.testing.assert_allclose(speech_embed(x, w1, b1, w2, b2, pw, pb).data[0], expected, atol=1e-12)


class TestCombine:
    def norm_params(self, h):
        return Tensor(np.ones(h)), Tensor(np.zeros(h))

    def test_single_part_is_layer_norm(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 4)))
        g, b = self.norm_params(4)
        np.testing.assert_array_equal(combine([x], g, b).data, ag.layer_norm(x, g, b).data)

    def test_zero_aux_parts(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
        g, b = self.norm_params(4)
        out = combine([x, Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 3, 4)))], g, b)
        np.testing.assert_allclose(out.data, ag.layer_norm(x, g, b).data, atol=1e-12)

    def test_eval_dropout_deterministic(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
        g, b = self.norm_params(4)
        ctx = RunContext(training=False)
        np.testing.assert_array_equal(combine([x], g, b, 0.5, ctx).data, combine([x], g, b, 0.5, ctx).data)

    def test_shape_mismatch(self):
        g, b = self.norm_params(4)
        with pytest.raises(ShapeMismatch):
            combine([Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 2, 4)))], g, b)


def make_stack(kinds, seed=0, **kw):
    f = factory(seed)
    spec = EmbeddingSpec(tuple(kinds), hidden=kw.pop("hidden", 6), vocab_size=20, max_seq_len=24, patch_size=2,
                         image_channels=2, audio_feat_dim=3, dropout_p=0.0, **kw)
    return EmbeddingStack(spec, f), f.store


def inputs(rng, kind):
    ids = rng.integers(5, 20, size=(2, 4))
    ids[1, 3] = 0
    data = {"word": {"ids": ids}, "patch": {"images": rng.standard_normal((2, 2, 4, 4))},
            "speech": {"audio": rng.standard_normal((2, 8, 3))}}
    data["word_patch"] = {**data["word"], **data["patch"]}
    return data[kind]


ALL_STACKS = [("word", "pos", "seg"), ("patch", "pos"), ("speech", "pos"), ("word_patch", "pos", "seg")]


class TestStack:
    @pytest.mark.parametrize("kinds", ALL_STACKS)
    def test_gradcheck(self, kinds):
        stack, store = make_stack(kinds)
        randomize(store)
        rng = np.random.default_rng(1)
        x = inputs(rng, kinds[0])
        params = list(store.values())
        shape = stack.forward(**x).hidden.shape
        assert max_relative_error(projected_loss(lambda: stack.forward(**x).hidden, shape), params, floor=MODULE_FLOOR) < TOL

    @pytest.mark.parametrize("kinds", ALL_STACKS)
    def test_every_table_gets_gradient(self, kinds):
        stack, store = make_stack(kinds)
        randomize(store)
        x = inputs(np.random.default_rng(1), kinds[0])
        out = stack.forward(**x).hidden
        backward(projected_loss(lambda: out, out.shape)())
        for name, p in store.items():
            assert p.grad is not None and np.abs(p.grad).sum() > 0, name

    def test_permuting_kinds_is_invariant(self):
        x = inputs(np.random.default_rng(1), "word")
        outs = [make_stack(p)[0].forward(**x).hidden.data
                for p in itertools.permutations(("word", "pos", "seg"))]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_text_mask_counts_non_pad(self):
        x = inputs(np.random.default_rng(1), "word")
        out = make_stack(("word",))[0].forward(**x)
        assert out.attention_mask.sum() == (x["ids"] != 0).sum()

    def test_image_mask_counts_patches(self):
        x = inputs(np.random.default_rng(1), "patch")
        out = make_stack(("patch",))[0].forward(**x)
        np.testing.assert_array_equal(out.attention_mask.sum(axis=1), [5, 5])

    def test_audio_mask_with_lengths(self):
        x = inputs(np.random.default_rng(1), "speech")
        out = make_stack(("speech",))[0].forward(**x, audio_lens=np.array([8, 5]))
        np.testing.assert_array_equal(out.attention_mask.sum(axis=1), [2, 2])
        out = make_stack(("speech",))[0].forward(audio=np.zeros((1, 13, 3)))
        assert out.attention_mask.sum() == 4

    def test_word_patch_layout(self):
        f = factory(0)
        spec = EmbeddingSpec(("patch_word", "pos", "seg"), hidden=6, vocab_size=20, max_seq_len=24,
                             patch_size=8, image_channels=3, dropout_p=0.0)
        stack = EmbeddingStack(spec, f)
        ids = np.arange(5, 10)[None]
        out = stack.forward(ids=ids, images=np.zeros((1, 3, 32, 32)))
        assert out.hidden.shape == (1, 22, 6)
        np.testing.assert_array_equal(out.attention_mask, np.ones((1, 22)))

    def test_word_patch_segments_and_positions(self):
        # zero content leaves pos + seg, so each position exposes its channel
        stack, store = make_stack(("word_patch", "pos", "seg"))
        for name, p in store.items():
            if ".word_patch." in name:
                p.data[...] = 0.0
        g, b = stack.norm.gain, stack.norm.bias
        out = stack.forward(ids=np.full((1, 3), 7), images=np.zeros((1, 2, 4, 4))).hidden.data[0]
        pos, seg = stack.pos_table.data, stack.seg_table.data
        expected = [pos[i] + seg[0] for i in range(3)] + [pos[i] + seg[1] for i in range(5)]
        ref = ag.layer_norm(Tensor(np.array(expected)), g, b).data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_two_contents_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingSpec(("word", "patch"), hidden=4)
        with pytest.raises(ValueError):
            EmbeddingSpec(("pos",), hidden=4)
