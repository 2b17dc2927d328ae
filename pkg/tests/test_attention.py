import numpy as np
import pytest

from tryon.attention import (
    AttentionBundle,
    downsample_mask,
    enhance_contrast,
    masked_extended_attention,
    self_attention,
)
from tryon.errors import ArgumentError

from oracles import softmax_rows


def random_bundle(rng, heads=2, n=None, d=4, grid=None):
    if grid is None:
        grid = (2, 3) if n is None else (1, n)
    n = grid[0] * grid[1]
    mk = lambda: rng.standard_normal((heads, n, d))
    return AttentionBundle(mk(), mk(), mk(), grid)


class TestSelfAttention:
    def test_single_token(self):
        b = AttentionBundle(np.ones((1, 1, 3)), np.ones((1, 1, 3)),
                            np.array([[[2.0, 0.0, 1.0]]]), (1, 1))
        out, a = self_attention(b)
        assert np.array_equal(a, [[[1.0]]])
        assert np.array_equal(out, b.v)

    def test_hand_computed_two_keys(self):
        # Q=[1], K=[[1],[-1]], V=[[2],[0]], d=1
        b = AttentionBundle(np.array([[[1.0]]]), np.array([[[1.0], [-1.0]]]),
                            np.array([[[2.0], [0.0]]]), (1, 1))
        out, a = self_attention(b)
        want = softmax_rows([[1.0, -1.0]])[0]
        assert a[0, 0] == pytest.approx(want, abs=1e-4)
        assert a[0, 0] == pytest.approx([0.8808, 0.1192], abs=1e-4)
        assert out[0, 0, 0] == pytest.approx(1.7616, abs=1e-4)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        # fix the last K column to a constant so QK^T shifts uniformly per row
        q = rng.standard_normal((1, 5, 3))
        k = rng.standard_normal((1, 5, 3))
        v = rng.standard_normal((1, 5, 3))
        k1, k2 = k.copy(), k.copy()
        k1[..., -1] = 0.7
        k2[..., -1] = -2.3
        _, a1 = self_attention(AttentionBundle(q, k1, v, (1, 5)))
        _, a2 = self_attention(AttentionBundle(q, k2, v, (1, 5)))
        assert np.allclose(a1, a2, atol=1e-6)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            _, a = self_attention(random_bundle(rng, grid=(3, 3)))
            assert (a >= 0).all()
            assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)


class TestMaskedExtendedAttention:
    def test_empty_person_mask_reduces_to_self_attention(self):
        rng = np.random.default_rng(1)
        tgt = random_bundle(rng, grid=(2, 2))
        ref = random_bundle(rng, grid=(3, 2))
        out_mea, a_mea = masked_extended_attention(
            tgt, ref, np.zeros(4, bool), np.ones(6, bool), beta=1.5)
        out, a = self_attention(tgt)
        assert np.allclose(out_mea, out, atol=1e-6)
        assert np.allclose(a_mea[..., :4], a, atol=1e-6)
        assert np.all(a_mea[..., 4:] == 0)

    def test_empty_garment_mask_reduces_to_self_attention(self):
        rng = np.random.default_rng(2)
        tgt = random_bundle(rng, grid=(2, 2))
        ref = random_bundle(rng, grid=(2, 2))
        out_mea, a_mea = masked_extended_attention(
            tgt, ref, np.ones(4, bool), np.zeros(4, bool), beta=1.5)
        out, _ = self_attention(tgt)
        assert np.allclose(out_mea, out, atol=1e-6)

    def test_equal_logits_split_evenly(self):
        # one target token, one reference token, all logits equal
        q = np.ones((1, 1, 2))
        k = np.ones((1, 1, 2))
        vp = np.full((1, 1, 2), 3.0)
        vg = np.full((1, 1, 2), 1.0)
        tgt = AttentionBundle(q, k, vp, (1, 1))
        ref = AttentionBundle(q, k, vg, (1, 1))
        out, a = masked_extended_attention(tgt, ref, np.ones(1, bool), np.ones(1, bool))
        assert a[0, 0] == pytest.approx([0.5, 0.5])
        assert out[0, 0] == pytest.approx((vp[0, 0] + vg[0, 0]) / 2)

    def test_reference_background_mass_exactly_zero(self):
        rng = np.random.default_rng(3)
        for beta in (1.0, 1.5, 3.0):
            tgt = random_bundle(rng, grid=(2, 3))
            ref = random_bundle(rng, grid=(2, 3))
            m_p = rng.random(6) < 0.5
            m_g = rng.random(6) < 0.5
            _, a = masked_extended_attention(tgt, ref, m_p, m_g, beta=beta)
            ref_cols = a[..., 6:]
            assert np.all(ref_cols[:, :, ~m_g] == 0.0)
            assert np.all(ref_cols[:, ~m_p, :] == 0.0)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(4)
        tgt = random_bundle(rng, grid=(3, 3))
        ref = random_bundle(rng, grid=(2, 2))
        m_p = rng.random(9) < 0.7
        m_g = rng.random(4) < 0.7
        _, a = masked_extended_attention(tgt, ref, m_p, m_g, beta=1.5)
        assert (a >= 0).all()
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_head_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        tgt = random_bundle(rng, heads=3, grid=(2, 2))
        ref = random_bundle(rng, heads=3, grid=(2, 2))
        m_p = np.array([1, 0, 1, 1], bool)
        m_g = np.array([0, 1, 1, 0], bool)
        perm = [2, 0, 1]
        out, _ = masked_extended_attention(tgt, ref, m_p, m_g, beta=1.5)
        tgt_p = AttentionBundle(tgt.q[perm], tgt.k[perm], tgt.v[perm], tgt.grid)
        ref_p = AttentionBundle(ref.q[perm], ref.k[perm], ref.v[perm], ref.grid)
        out_p, _ = masked_extended_attention(tgt_p, ref_p, m_p, m_g, beta=1.5)
        assert np.array_equal(out[perm], out_p)

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        tgt = random_bundle(rng, d=4)
        ref = random_bundle(rng, d=5)
        with pytest.raises(ArgumentError):
            masked_extended_attention(tgt, ref, np.ones(6, bool), np.ones(6, bool))

    def test_mask_length_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        tgt = random_bundle(rng)
        ref = random_bundle(rng)
        with pytest.raises(ArgumentError):
            masked_extended_attention(tgt, ref, np.ones(5, bool), np.ones(6, bool))


class TestEnhanceContrast:
    def test_beta_one_identity(self):
        rng = np.random.default_rng(0)
        a = rng.dirichlet(np.ones(5), size=(2, 4))
        assert enhance_contrast(a, 1.0) is a or np.array_equal(enhance_contrast(a, 1.0), a)

    def test_hand_computed_no_clamp(self):
        out = enhance_contrast(np.array([[0.2, 0.8]]), 1.5)
        assert out[0] == pytest.approx([0.05, 0.95], abs=1e-12)

    def test_hand_computed_with_clamp(self):
        # beta=3: (0.1-0.5)*3+0.5 = -0.7 -> clamp 0; (0.9-0.5)*3+0.5 = 1.7 -> renorm
        out = enhance_contrast(np.array([[0.1, 0.9]]), 3.0)
        assert out[0] == pytest.approx([0.0, 1.0], abs=1e-12)

    def test_mean_preserved_pre_clamp(self):
        rng = np.random.default_rng(1)
        a = rng.dirichlet(np.ones(6), size=3)
        mu = a.mean(axis=-1, keepdims=True)
        pre = (a - mu) * 1.5 + mu
        assert np.allclose(pre.mean(axis=-1, keepdims=True), mu)

    def test_variance_nondecreasing_pre_clamp(self):
        rng = np.random.default_rng(2)
        a = rng.dirichlet(np.ones(8), size=5)
        mu = a.mean(axis=-1, keepdims=True)
        for beta in (1.0, 1.5, 2.0, 4.0):
            pre = (a - mu) * beta + mu
            assert (pre.var(axis=-1) >= a.var(axis=-1) - 1e-12).all()

    def test_rows_stay_stochastic(self):
        rng = np.random.default_rng(3)
        a = rng.dirichlet(np.ones(7), size=(2, 5))
        out = enhance_contrast(a, 2.5)
        assert (out >= 0).all()
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_negative_beta_rejected(self):
        with pytest.raises(ArgumentError):
            enhance_contrast(np.array([[0.5, 0.5]]), -0.1)


class TestDownsampleMask:
    def test_full_and_empty(self):
        assert downsample_mask(np.ones((8, 8), bool), (2, 2)).all()
        assert not downsample_mask(np.zeros((8, 8), bool), (2, 2)).any()

    def test_single_pixel_any_rule(self):
        m = np.zeros((4, 4), bool)
        m[1, 2] = True
        tok = downsample_mask(m, (2, 2), rule="any")
        assert tok.sum() == 1
        assert tok.reshape(2, 2)[0, 1]

    def test_single_pixel_majority_rule(self):
        m = np.zeros((4, 4), bool)
        m[1, 2] = True
        assert not downsample_mask(m, (2, 2), rule="majority").any()

    def test_majority_threshold(self):
        m = np.zeros((4, 4), bool)
        m[0:2, 0:2] = True  # exactly 100% of one 2x2 token
        tok = downsample_mask(m, (2, 2), rule="majority").reshape(2, 2)
        assert tok[0, 0] and not tok[0, 1]

    def test_non_integral_scale_rejected(self):
        with pytest.raises(ArgumentError):
            downsample_mask(np.ones((6, 6), bool), (4, 4))

    def test_non_uniform_scale_rejected(self):
        with pytest.raises(ArgumentError):
            downsample_mask(np.ones((8, 4), bool), (2, 2))
