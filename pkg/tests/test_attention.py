"""Attention fusion contracts: pooling, Q/K/V, gating, and composition."""

import numpy as np
import pytest
import torch

from bimodal_ml.attention import (
    AttentionFusion,
    SelfAttentionBlock,
    TextAttentionBlock,
    VisualAttentionBlock,
    fuse_and_gate,
    global_avg_pool_2d,
    global_max_pool_1d,
    global_max_pool_2d,
    qkv_project,
    scaled_dot_attention,
)
from bimodal_ml.errors import InvalidConfigError, InvalidInputError

import reference as ref


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


class TestPooling:
    def test_avg_constant_and_arithmetic(self):
        const = torch.full((3, 4, 4), 2.5)
        np.testing.assert_allclose(global_avg_pool_2d(const).numpy(), [2.5] * 3)
        chan = t64([[[1.0, 2.0], [3.0, 4.0]]])
        assert float(global_avg_pool_2d(chan)) == pytest.approx(2.5)
        assert float(global_max_pool_2d(chan)) == pytest.approx(4.0)

    def test_max_1d(self):
        seq = t64([[1.0, 5.0], [3.0, 2.0]])
        np.testing.assert_allclose(global_max_pool_1d(seq).numpy(), [3.0, 5.0])
        single = t64([[7.0, -1.0, 0.5]])
        np.testing.assert_allclose(global_max_pool_1d(single).numpy(), [7.0, -1.0, 0.5])

    def test_matches_brute_force_oracles(self):
        rng = np.random.default_rng(41)
        x = rng.normal(size=(3, 4, 4))
        np.testing.assert_allclose(
            global_avg_pool_2d(t64(x)).numpy(), ref.avg_pool_2d_np(x), atol=1e-12
        )
        np.testing.assert_array_equal(
            global_max_pool_2d(t64(x)).numpy(), ref.max_pool_2d_np(x)
        )
        seq = rng.normal(size=(16, 8))
        np.testing.assert_array_equal(
            global_max_pool_1d(t64(seq)).numpy(), ref.max_pool_1d_np(seq)
        )

    def test_permutation_invariance(self):
        rng = np.random.default_rng(43)
        x = rng.normal(size=(2, 5, 3))
        flat = x.reshape(2, -1)
        perm = rng.permutation(15)
        shuffled = flat[:, perm].reshape(2, 5, 3)
        np.testing.assert_allclose(
            global_avg_pool_2d(t64(x)).numpy(),
            global_avg_pool_2d(t64(shuffled)).numpy(),
            atol=1e-12,
        )
        np.testing.assert_array_equal(
            global_max_pool_2d(t64(x)).numpy(), global_max_pool_2d(t64(shuffled)).numpy()
        )
        seq = rng.normal(size=(9, 4))
        np.testing.assert_array_equal(
            global_max_pool_1d(t64(seq)).numpy(),
            global_max_pool_1d(t64(seq[rng.permutation(9)])).numpy(),
        )

    def test_empty_inputs_rejected(self):
        with pytest.raises(InvalidInputError):
            global_avg_pool_2d(torch.zeros(3, 0, 4))
        with pytest.raises(InvalidInputError):
            global_max_pool_2d(torch.zeros(0, 2, 2))
        with pytest.raises(InvalidInputError):
            global_max_pool_1d(torch.zeros(0, 4))

    def test_batched_shapes(self):
        assert global_avg_pool_2d(torch.zeros(7, 3, 5, 5)).shape == (7, 3)
        assert global_max_pool_1d(torch.zeros(7, 11, 6)).shape == (7, 6)


class TestQkvProject:
    def test_identity_weights(self):
        desc = t64([1.0, -2.0, 3.0])
        eye = (torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        q, k, v = qkv_project(desc, (eye, eye, eye))
        for out in (q, k, v):
            np.testing.assert_allclose(out.numpy(), desc.numpy())

    def test_zero_weights(self):
        desc = t64([1.0, 2.0])
        zero = (torch.zeros(4, 2, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        q, k, v = qkv_project(desc, (zero, zero, zero))
        for out in (q, k, v):
            np.testing.assert_array_equal(out.numpy(), np.zeros(4))

    def test_matches_affine_oracle(self):
        rng = np.random.default_rng(47)
        desc = rng.normal(size=6)
        pairs = []
        for _ in range(3):
            pairs.append((rng.normal(size=(4, 6)), rng.normal(size=4)))
        outs = qkv_project(t64(desc), [(t64(w), t64(b)) for w, b in pairs])
        for out, (w, b) in zip(outs, pairs):
            np.testing.assert_allclose(out.numpy(), ref.affine_np(desc, w, b), atol=1e-10)

    def test_width_mismatch(self):
        bad = (torch.zeros(4, 5), torch.zeros(4))
        with pytest.raises(InvalidConfigError):
            qkv_project(torch.zeros(3), (bad, bad, bad))


class TestScaledDotAttention:
    def test_single_token_passthrough(self):
        rng = np.random.default_rng(53)
        q = t64(rng.normal(size=(1, 4)))
        k = t64(rng.normal(size=(1, 4)))
        v = t64(rng.normal(size=(1, 4)))
        out, attn = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(attn.numpy(), [[1.0]])
        np.testing.assert_allclose(out.numpy(), v.numpy())

    def test_equal_scores_give_uniform_rows(self):
        q = torch.zeros(3, 4, dtype=torch.float64)
        k = t64(np.random.default_rng(59).normal(size=(3, 4)))
        v = t64(np.random.default_rng(60).normal(size=(3, 4)))
        out, attn = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(attn.numpy(), np.full((3, 3), 1 / 3), atol=1e-12)
        np.testing.assert_allclose(
            out.numpy(), np.tile(v.numpy().mean(axis=0), (3, 1)), atol=1e-12
        )

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(61)
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        out, attn = scaled_dot_attention(t64(q), t64(k), t64(v))
        ref_out, ref_attn = ref.attention_np(q, k, v)
        np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-10)
        np.testing.assert_allclose(attn.numpy(), ref_attn, atol=1e-10)

    def test_rows_sum_to_one_over_random_shapes(self):
        rng = np.random.default_rng(67)
        for _ in range(100):
            m = int(rng.integers(1, 8))
            d_f = int(rng.integers(1, 12))
            q, k, v = (t64(rng.normal(size=(m, d_f))) for _ in range(3))
            _, attn = scaled_dot_attention(q, k, v)
            np.testing.assert_allclose(attn.sum(dim=-1).numpy(), np.ones(m), atol=1e-6)
            assert attn.min() >= 0.0 and attn.max() <= 1.0

    def test_row_shift_invariance(self):
        """A is unchanged when a constant is added to a full row of q k^T.

        Realized by scaling one query row along a direction orthogonal to
        nothing: adding c to every score of row i equals shifting that row's
        logits, which softmax ignores.
        """
        rng = np.random.default_rng(71)
        q, k, v = (rng.normal(size=(4, 5)) for _ in range(3))
        _, attn = scaled_dot_attention(t64(q), t64(k), t64(v))
        scores = q @ k.T / np.sqrt(5)
        scores[2] += 17.0
        shifted = ref.rowsoftmax_np(scores)
        np.testing.assert_allclose(attn.numpy()[2], shifted[2], atol=1e-12)

    def test_zero_width_rejected(self):
        with pytest.raises(InvalidConfigError):
            scaled_dot_attention(torch.zeros(2, 0), torch.zeros(2, 0), torch.zeros(2, 0))


def _zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestDescriptorBlocks:
    def test_zero_map_zero_params_gives_zero_descriptor(self):
        block = VisualAttentionBlock(3).double()
        _zero_params(block)
        out = block(torch.zeros(3, 4, 4, dtype=torch.float64))
        np.testing.assert_array_equal(out.detach().numpy(), np.zeros(3))
        tblock = TextAttentionBlock(5).double()
        _zero_params(tblock)
        out = tblock(torch.zeros(6, 5, dtype=torch.float64))
        np.testing.assert_array_equal(out.detach().numpy(), np.zeros(5))

    def test_output_lengths(self):
        rng = np.random.default_rng(73)
        for c in (1, 3, 8):
            torch.manual_seed(c)
            block = VisualAttentionBlock(c).double()
            h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            assert block(t64(rng.normal(size=(c, h, w)))).shape == (c,)
        for c in (1, 4, 7):
            torch.manual_seed(c)
            tblock = TextAttentionBlock(c).double()
            length = int(rng.integers(1, 9))
            assert tblock(t64(rng.normal(size=(length, c)))).shape == (c,)

    def _visual_oracle(self, block, x):
        """Re-compose the visual block from the verified constituent oracles."""
        sd = {k: v.detach().numpy() for k, v in block.state_dict().items()}
        tokens = np.stack([ref.avg_pool_2d_np(x), ref.max_pool_2d_np(x)])
        rows = {}
        for name, row in (("avg_attention", 0), ("max_attention", 1)):
            q = ref.affine_np(tokens, sd[f"{name}.query.weight"], sd[f"{name}.query.bias"])
            k = ref.affine_np(tokens, sd[f"{name}.key.weight"], sd[f"{name}.key.bias"])
            v = ref.affine_np(tokens, sd[f"{name}.value.weight"], sd[f"{name}.value.bias"])
            out, _ = ref.attention_np(q, k, v)
            rows[name] = out[row]
        concat = np.concatenate([rows["avg_attention"], rows["max_attention"]])
        return ref.affine_np(concat, sd["project.weight"], sd["project.bias"])

    def test_visual_block_matches_oracle_composition(self):
        rng = np.random.default_rng(79)
        torch.manual_seed(79)
        block = VisualAttentionBlock(6).double()
        x = rng.normal(size=(6, 5, 4))
        got = block(t64(x)).detach().numpy()
        np.testing.assert_allclose(got, self._visual_oracle(block, x), atol=1e-10)

    def test_text_block_matches_oracle_composition(self):
        rng = np.random.default_rng(83)
        torch.manual_seed(83)
        block = TextAttentionBlock(6).double()
        x = rng.normal(size=(9, 6))
        sd = {k: v.detach().numpy() for k, v in block.state_dict().items()}
        token = ref.max_pool_1d_np(x)[None, :]
        q = ref.affine_np(token, sd["max_attention.query.weight"], sd["max_attention.query.bias"])
        k = ref.affine_np(token, sd["max_attention.key.weight"], sd["max_attention.key.bias"])
        v = ref.affine_np(token, sd["max_attention.value.weight"], sd["max_attention.value.bias"])
        out, attn = ref.attention_np(q, k, v)
        np.testing.assert_allclose(attn, [[1.0]])
        expected = ref.affine_np(out[0], sd["project.weight"], sd["project.bias"])
        np.testing.assert_allclose(block(t64(x)).detach().numpy(), expected, atol=1e-10)

    def test_channel_mismatch_rejected(self):
        block = VisualAttentionBlock(3)
        with pytest.raises(InvalidInputError):
            block(torch.zeros(4, 2, 2))


class TestFuseAndGate:
    def test_saturated_gate_passes_inputs(self):
        x_img = t64(np.random.default_rng(89).normal(size=(3, 4, 4)))
        x_txt = t64(np.random.default_rng(90).normal(size=(6, 5)))
        big = torch.full((3,), 50.0, dtype=torch.float64)
        big_t = torch.full((5,), 50.0, dtype=torch.float64)
        out_img, out_txt = fuse_and_gate(big, big_t, x_img, x_txt)
        np.testing.assert_allclose(out_img.numpy(), x_img.numpy(), atol=1e-9)
        np.testing.assert_allclose(out_txt.numpy(), x_txt.numpy(), atol=1e-9)

    def test_zero_descriptors_halve_inputs(self):
        x_img = t64(np.random.default_rng(97).normal(size=(2, 3, 3)))
        x_txt = t64(np.random.default_rng(98).normal(size=(4, 3)))
        out_img, out_txt = fuse_and_gate(
            torch.zeros(2, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), x_img, x_txt
        )
        np.testing.assert_allclose(out_img.numpy(), 0.5 * x_img.numpy(), atol=1e-12)
        np.testing.assert_allclose(out_txt.numpy(), 0.5 * x_txt.numpy(), atol=1e-12)

    def test_matches_broadcast_oracle(self):
        rng = np.random.default_rng(101)
        img_desc = rng.normal(size=3)
        txt_desc = rng.normal(size=4)
        x_img = rng.normal(size=(3, 2, 5))
        x_txt = rng.normal(size=(7, 4))
        out_img, out_txt = fuse_and_gate(t64(img_desc), t64(txt_desc), t64(x_img), t64(x_txt))
        gate = 1.0 / (1.0 + np.exp(-np.concatenate([img_desc, txt_desc])))
        np.testing.assert_allclose(
            out_img.numpy(), x_img * gate[:3, None, None], atol=1e-12
        )
        np.testing.assert_allclose(out_txt.numpy(), x_txt * gate[3:][None, :], atol=1e-12)

    def test_self_gating_variant(self):
        rng = np.random.default_rng(103)
        img_desc = rng.normal(size=2)
        txt_desc = rng.normal(size=2)
        x_img = rng.normal(size=(2, 2, 2))
        x_txt = rng.normal(size=(3, 2))
        out_img, _ = fuse_and_gate(
            t64(img_desc), t64(txt_desc), t64(x_img), t64(x_txt), self_gating=True
        )
        g = np.concatenate([img_desc, txt_desc])
        mult = (1.0 / (1.0 + np.exp(-g))) * g
        np.testing.assert_allclose(out_img.numpy(), x_img * mult[:2, None, None], atol=1e-12)

    def test_shape_and_sign_preservation(self):
        rng = np.random.default_rng(107)
        x_img = t64(rng.normal(size=(4, 3, 3)))
        x_txt = t64(rng.normal(size=(5, 6)))
        out_img, out_txt = fuse_and_gate(
            t64(rng.normal(size=4)), t64(rng.normal(size=6)), x_img, x_txt
        )
        assert out_img.shape == x_img.shape and out_txt.shape == x_txt.shape
        assert np.all(np.sign(out_img.numpy()) == np.sign(x_img.numpy()))
        assert np.all(np.sign(out_txt.numpy()) == np.sign(x_txt.numpy()))

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidConfigError):
            fuse_and_gate(torch.zeros(2), torch.zeros(3), torch.zeros(4, 2, 2), torch.zeros(5, 3))


class TestAttentionFusionModule:
    def test_bypass_returns_inputs_unchanged(self):
        torch.manual_seed(109)
        fusion = AttentionFusion(3, 4)
        x_img = torch.randn(2, 3, 4, 4)
        x_txt = torch.randn(2, 6, 4)
        out_img, out_txt = fusion(x_img, x_txt, gate_mode="bypass")
        assert out_img is x_img and out_txt is x_txt

    def test_unknown_gate_mode(self):
        fusion = AttentionFusion(2, 2)
        with pytest.raises(InvalidConfigError):
            fusion(torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 2), gate_mode="open")

    def test_gradient_matches_finite_differences(self):
        """d(block output probe)/d(inputs) vs FD at non-tied points."""
        torch.manual_seed(113)
        fusion = AttentionFusion(3, 4).double()
        rng = np.random.default_rng(127)
        x_img = rng.normal(size=(1, 3, 3, 3))
        x_txt = rng.normal(size=(1, 5, 4))
        probe_img = rng.normal(size=(1, 3, 3, 3))
        probe_txt = rng.normal(size=(1, 5, 4))

        def scalar(img_flat):
            with torch.no_grad():
                xi = torch.tensor(img_flat.reshape(1, 3, 3, 3), dtype=torch.float64)
                oi, ot = fusion(xi, t64(x_txt))
                return float((oi * t64(probe_img)).sum() + (ot * t64(probe_txt)).sum())

        leaf = t64(x_img).requires_grad_(True)
        out_img, out_txt = fusion(leaf, t64(x_txt))
        ((out_img * t64(probe_img)).sum() + (out_txt * t64(probe_txt)).sum()).backward()
        analytic = leaf.grad.numpy().ravel()
        fd = ref.central_fd(scalar, x_img.ravel(), h=1e-6)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-3
