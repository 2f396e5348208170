"""Network: embeddings, encoder, shared bidirectional decoder, gated head."""

import numpy as np
import pytest

from gct import tensor as T
from gct.data import BOS_ID, BOS_REV_ID, encode_labels
from gct.model import (
    ModelConfig,
    decoder_forward,
    embed_input,
    encoder_forward,
    gcmlp_forward,
    gct_forward,
    head_forward,
    init_params,
    param_count,
    param_shapes,
)
from gct.optim import finite_diff_check
from gct.tensor import Tensor
from gct.training import compute_loss


def tiny_config(**overrides) -> ModelConfig:
    fields = dict(
        vocab_size=6, input_mode="clip", n_encoder_blocks=1, n_decoder_blocks=1,
        d_model=8, n_heads=2, d_ff=16, dropout=0.0, max_len=4, dtype="float64",
    )
    fields.update(overrides)
    return ModelConfig(**fields)


class TestEmbedInput:
    def test_zero_patches_zero_weights_give_positional_table(self):
        cfg = tiny_config(input_mode="patches", patch_time=4, patch_freq=4, max_enc_len=8)
        params = init_params(cfg, np.random.default_rng(0))
        params["input.w"].data[:] = 0.0
        params["input.b"].data[:] = 0.0
        emb = embed_input(np.zeros((5, 16)), cfg, params)
        np.testing.assert_array_equal(emb.data, params["enc.pos"].data[:5])

    def test_zero_clip_features_zero_weights_give_zeros(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(1))
        params["input.w"].data[:] = 0.0
        params["input.b"].data[:] = 0.0
        emb = embed_input(np.zeros((7, 128)), cfg, params)
        np.testing.assert_array_equal(emb.data, np.zeros((7, 8)))

    def test_496_patches_project_to_d_model(self):
        cfg = tiny_config(input_mode="patches", patch_time=16, patch_freq=16,
                          max_enc_len=500)
        params = init_params(cfg, np.random.default_rng(2))
        emb = embed_input(np.random.default_rng(3).normal(size=(496, 256)), cfg, params)
        assert emb.data.shape == (496, 8)

    def test_clip_mode_has_no_encoder_positional_table(self):
        cfg = tiny_config()
        assert "enc.pos" not in param_shapes(cfg)
        params = init_params(cfg, np.random.default_rng(4))
        emb = embed_input(np.random.default_rng(5).normal(size=(998, 128)), cfg, params)
        assert emb.data.shape == (998, 8)

    def test_sequence_longer_than_positional_table_rejected(self):
        cfg = tiny_config(input_mode="patches", patch_time=4, patch_freq=4, max_enc_len=3)
        params = init_params(cfg, np.random.default_rng(6))
        with pytest.raises(ValueError, match="positional table"):
            embed_input(np.zeros((4, 16)), cfg, params)


class TestEncoder:
    def test_zero_blocks_is_identity(self):
        cfg = tiny_config(n_encoder_blocks=0)
        params = init_params(cfg, np.random.default_rng(7))
        emb = Tensor(np.random.default_rng(8).normal(size=(5, 8)))
        out = encoder_forward(emb, params, cfg)
        np.testing.assert_array_equal(out.data, emb.data)

    def test_shape_preserved(self):
        cfg = tiny_config(n_encoder_blocks=2)
        params = init_params(cfg, np.random.default_rng(9))
        emb = Tensor(np.random.default_rng(10).normal(size=(11, 8)))
        assert encoder_forward(emb, params, cfg).data.shape == (11, 8)

    def test_permutation_equivariance_with_zeroed_weights(self):
        # With attention logits and values zeroed, each block acts per row,
        # so permuting input rows permutes output rows bit-exactly.
        cfg = tiny_config(n_encoder_blocks=1)
        params = init_params(cfg, np.random.default_rng(11))
        for name in params:
            if name.startswith("enc.0.attn") or name.startswith("enc.0.ff"):
                params[name].data[:] = 0.0
        rng = np.random.default_rng(12)
        emb = rng.normal(size=(9, 8))
        perm = rng.permutation(9)
        out = encoder_forward(Tensor(emb), params, cfg).data
        out_perm = encoder_forward(Tensor(emb[perm]), params, cfg).data
        np.testing.assert_array_equal(out_perm, out[perm])


class TestDecoder:
    def _setup(self, seed=13, n_blocks=1):
        cfg = tiny_config(n_decoder_blocks=n_blocks, max_len=6, vocab_size=9)
        rng = np.random.default_rng(seed)
        params = init_params(cfg, rng)
        enc_out = Tensor(rng.normal(size=(10, 8)))
        return cfg, params, enc_out

    def test_output_shape(self):
        cfg, params, enc_out = self._setup()
        for n in range(1, 6):
            ids = [BOS_ID] + [4] * (n - 1)
            out, _ = decoder_forward(enc_out, ids, params, cfg, "normal")
            assert out.data.shape == (n, 8)

    def test_causal_mask_blocks_future_exactly(self):
        cfg, params, enc_out = self._setup()
        rng = np.random.default_rng(14)
        ids = [BOS_ID, 4, 5, 6, 7]
        base, _ = decoder_forward(enc_out, ids, params, cfg, "normal")
        for t in range(4):
            perturbed = list(ids)
            for j in range(t + 1, 5):
                perturbed[j] = int(rng.integers(4, 9))
            out, _ = decoder_forward(enc_out, perturbed, params, cfg, "normal")
            np.testing.assert_array_equal(out.data[: t + 1], base.data[: t + 1])

    def test_attention_rows_sum_to_one(self):
        cfg, params, enc_out = self._setup(n_blocks=2)
        _, records = decoder_forward(enc_out, [BOS_ID, 4, 5], params, cfg, "normal",
                                     collect_attention=True)
        assert len(records) == 2
        for rec in records:
            for mat in rec.self_attn + rec.cross_attn:
                np.testing.assert_allclose(mat.sum(axis=-1), 1.0, atol=1e-6)

    def test_branch_start_token_enforced(self):
        cfg, params, enc_out = self._setup()
        with pytest.raises(ValueError, match="must start"):
            decoder_forward(enc_out, [BOS_REV_ID, 4], params, cfg, "normal")
        with pytest.raises(ValueError, match="must start"):
            decoder_forward(enc_out, [BOS_ID, 4], params, cfg, "reverse")

    def test_unknown_token_id_rejected(self):
        cfg, params, enc_out = self._setup()
        with pytest.raises(ValueError, match="unknown token id 99"):
            decoder_forward(enc_out, [BOS_ID, 99], params, cfg, "normal")

    def test_weight_sharing_between_branches(self):
        cfg, params, enc_out = self._setup()
        fwd0, _ = decoder_forward(enc_out, [BOS_ID, 4], params, cfg, "normal")
        rev0, _ = decoder_forward(enc_out, [BOS_REV_ID, 4], params, cfg, "reverse")
        params["dec.0.ff.w1"].data += 0.25
        fwd1, _ = decoder_forward(enc_out, [BOS_ID, 4], params, cfg, "normal")
        rev1, _ = decoder_forward(enc_out, [BOS_REV_ID, 4], params, cfg, "reverse")
        assert not np.array_equal(fwd0.data, fwd1.data)
        assert not np.array_equal(rev0.data, rev1.data)


class TestGatedHead:
    def _params(self, v=2):
        return {
            "head.w1": Tensor(np.eye(v), requires_grad=True),
            "head.w2": Tensor(np.eye(v), requires_grad=True),
            "head.w3": Tensor(np.zeros((v, v)), requires_grad=True),
        }

    def test_hand_computed_two_dim_case(self):
        out = gcmlp_forward(Tensor([[1.0, 0.0]]), self._params())
        e = np.exp([1.0, 0.0])
        np.testing.assert_allclose(out.data[0], e / e.sum(), atol=1e-9)
        np.testing.assert_allclose(out.data[0], [0.7311, 0.2689], atol=1e-4)

    def test_zero_gate_input_gives_half(self):
        params = self._params()
        x = np.array([[0.3, -0.8]])
        f1 = x  # w1 = I
        f2 = np.maximum(f1, 0.0)
        expected = 0.5 * f2 + 0.5 * f1
        expected = np.exp(expected - expected.max())
        expected /= expected.sum()
        out = gcmlp_forward(Tensor(x), params)
        np.testing.assert_allclose(out.data[0], expected[0], atol=1e-12)

    def test_gate_saturated_low_selects_relu_path(self):
        params = self._params()
        params["head.w3"] = Tensor(-1e4 * np.eye(2))
        x = np.array([[0.5, 1.5]])
        f2 = np.maximum(x, 0.0)
        expected = np.exp(f2 - f2.max())
        expected /= expected.sum()
        out = gcmlp_forward(Tensor(x), params)
        np.testing.assert_allclose(out.data[0], expected[0], atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(15)
        v = 6
        w = {
            "head.w1": Tensor(rng.uniform(-0.5, 0.5, size=(v, v))),
            "head.w3": Tensor(rng.uniform(-0.5, 0.5, size=(v, v))),
        }
        x = Tensor(rng.normal(size=(500, v)))
        gate = T.sigmoid(T.matmul(T.matmul(x, w["head.w1"]), w["head.w3"]))
        assert (gate.data > 0.0).all() and (gate.data < 1.0).all()

    def test_rows_are_probability_vectors(self):
        rng = np.random.default_rng(16)
        v = 5
        params = {
            "head.w1": Tensor(rng.normal(size=(v, v))),
            "head.w2": Tensor(rng.normal(size=(v, v))),
            "head.w3": Tensor(rng.normal(size=(v, v))),
        }
        out = gcmlp_forward(Tensor(rng.normal(size=(7, v))), params)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()


class TestFullForward:
    def test_probability_rows_sum_to_one(self):
        cfg = tiny_config(vocab_size=7, max_len=5)
        params = init_params(cfg, np.random.default_rng(17))
        feats = np.random.default_rng(18).normal(size=(9, 128))
        n_in, _, r_in, _ = encode_labels([4, 5, 6], cfg.max_len)
        p, p_rev, _ = gct_forward(feats, n_in, r_in, cfg, params)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(p_rev.data.sum(axis=1), 1.0, atol=1e-9)

    def test_single_step_reverse_shape(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(19))
        feats = np.random.default_rng(20).normal(size=(6, 128))
        p, p_rev, _ = gct_forward(feats, [BOS_ID], [BOS_REV_ID], cfg, params)
        assert p_rev.data.shape == (1, 6)

    def test_full_loss_gradient_check_small(self):
        # Scaled-down variant of the acceptance gradcheck: every parameter
        # of a one-block model against central differences.
        cfg = tiny_config(d_model=4, n_heads=2, d_ff=6, vocab_size=6, max_len=3)
        rng = np.random.default_rng(21)
        params = init_params(cfg, rng)
        feats = rng.normal(size=(4, 128))
        n_in, n_tgt, r_in, r_tgt = encode_labels([4, 5], cfg.max_len)

        def loss():
            p, p_rev, _ = gct_forward(feats, n_in, r_in, cfg, params)
            total, _ = compute_loss(p, p_rev, n_tgt, r_tgt)
            return total

        assert finite_diff_check(loss, params, eps=1e-5) < 1e-4

    def test_no_gcmlp_ablation_uses_plain_softmax_head(self):
        cfg = tiny_config(use_gcmlp=False)
        assert "head.w1" not in param_shapes(cfg)
        params = init_params(cfg, np.random.default_rng(22))
        out = head_forward(Tensor(np.random.default_rng(23).normal(size=(3, 8))),
                           params, cfg)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


class TestParamCount:
    def test_pure_function_of_config(self):
        assert param_count(tiny_config()) == param_count(tiny_config())

    def test_ablations_shrink_the_count(self):
        patches = tiny_config(input_mode="patches", patch_time=4, patch_freq=4,
                              max_enc_len=10)
        no_pos = tiny_config(input_mode="patches", patch_time=4, patch_freq=4,
                             max_enc_len=10, use_pos_emb=False)
        assert param_count(no_pos) == param_count(patches) - 10 * patches.d_model
        no_head = tiny_config(use_gcmlp=False)
        assert param_count(no_head) == param_count(tiny_config()) - 3 * 6 * 6

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=6, d_model=10, n_heads=3)
        with pytest.raises(ValueError, match="input_mode"):
            ModelConfig(vocab_size=6, input_mode="frames")
