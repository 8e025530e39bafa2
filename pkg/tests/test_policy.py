"""Policy head: pooling semantics, mode wiring, causality, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from tavla import tensor as T
from tavla.encoder import DualEncoder, EncoderConfig, sim_word_tokenizer
from tavla.errors import ConfigError, ShapeError, UsageError, ValidationError
from tavla.policy import (
    AttentionPool,
    PolicyConfig,
    PoolConfig,
    TokenBundle,
    VLAPolicy,
)
from tavla.testing import gradcheck

INSTRUCTION = "put the red cube in the blue bowl"


def tiny_encoder(seed=1):
    tok = sim_word_tokenizer()
    cfg = EncoderConfig(
        image_size=16, patch_size=8, vision_dim=16, vision_layers=1,
        vision_heads=2, vocab_size=tok.vocab_size, text_dim=16, text_layers=1,
        text_heads=2, max_text_tokens=16, embed_dim=16,
    )
    return DualEncoder.init_random(cfg, np.random.default_rng(seed), tokenizer=tok)


def tiny_policy(mode="full", cameras=1, seed=2):
    pool = PoolConfig(readouts=4, heads=2, blocks=1, text_dim=8, image_dim=16, proprio_dim=8)
    pcfg = PolicyConfig(layers=1, heads=2, latent=16, context=4, horizon=2, cameras=cameras)
    return VLAPolicy(tiny_encoder(), pool, pcfg, mode=mode, seed=seed)


def feature_window(policy, b=2, t=3, seed=0, dtype=np.float32):
    """Build window_tokens inputs through the encoder (inside any active graph)."""
    r = np.random.default_rng(seed)
    enc = policy.encoder
    s = enc.cfg.image_size
    imgs = r.integers(0, 256, size=(b * t, s, s, 3), dtype=np.uint8)
    vf = enc.vision_forward(imgs)
    fv = []
    if policy.mode == "cls_only":
        emb = enc.image_embedding(vf)
        fv.append(T.reshape(emb, (b, t, emb.shape[-1])))
    else:
        feats = enc.patch_features(vf)
        fv.append(T.reshape(feats, (b, t) + feats.shape[1:]))
    for j in range(1, policy.cfg.cameras):
        fv.append(fv[0])
    tf = enc.text_forward(INSTRUCTION)
    m = len(tf.ids)
    raw = tf.tokens
    hat = enc.text_token_features(tf)
    fl_raw = T.reshape(T.concat([raw] * b, axis=0), (b, m, raw.shape[-1]))
    fl_hat = T.reshape(T.concat([hat] * b, axis=0), (b, m, hat.shape[-1]))
    mask = np.ones((b, m), dtype=bool)
    proprio = r.standard_normal((b, t, 10)).astype(dtype)
    return fv, fl_hat, fl_raw, mask, proprio


class TestAttentionPool:
    def build(self, blocks=1, in_dim=8, out_dim=32, readouts=4, heads=2, seed=0):
        params = {}
        cfg = PoolConfig(readouts=readouts, heads=heads, blocks=blocks,
                         text_dim=out_dim, image_dim=out_dim, proprio_dim=8)
        pool = AttentionPool.build(params, "pool/x", cfg, in_dim, out_dim,
                                   np.random.default_rng(seed))
        return pool, params

    def test_single_key_identity_value_projection(self):
        # One key, one block, identity value/output path: every readout is
        # exactly the lone token, so the concat equals the token tiled.
        pool, params = self.build()
        eye = np.eye(8, dtype=np.float32)
        params["pool/x/block0/v_weight"].data = eye.copy()
        params["pool/x/block0/o_weight"].data = eye.copy()
        for r in range(4):
            params["pool/x/out_weight"].data[r] = eye
        params["pool/x/out_bias"].data[:] = 0.0
        token = np.random.default_rng(1).standard_normal((1, 8)).astype(np.float32)
        out = pool(T.Tensor(token)).data
        np.testing.assert_allclose(out, np.tile(token[0], 4), atol=1e-6)

    @pytest.mark.parametrize("k", [1, 3, 9])
    def test_output_dim_independent_of_k(self, k):
        pool, _ = self.build(blocks=2)
        out = pool(T.Tensor(np.random.default_rng(k).standard_normal((5, k, 8))))
        assert out.shape == (5, 32)

    def test_empty_tokens_raise(self):
        pool, _ = self.build()
        with pytest.raises(UsageError):
            pool(T.Tensor(np.zeros((1, 0, 8))))

    def test_key_mask_equals_dropping_keys(self):
        pool, _ = self.build(blocks=2)
        r = np.random.default_rng(3)
        tokens = r.standard_normal((2, 5, 8)).astype(np.float32)
        mask = np.zeros((2, 5), dtype=bool)
        mask[:, :3] = True
        masked = pool(T.Tensor(tokens), key_mask=mask).data
        dropped = pool(T.Tensor(tokens[:, :3])).data
        np.testing.assert_allclose(masked, dropped, atol=1e-6)

    def test_fully_masked_row_raises(self):
        pool, _ = self.build()
        with pytest.raises(UsageError):
            pool(T.Tensor(np.zeros((1, 4, 8))), key_mask=np.zeros((1, 4), dtype=bool))

    def test_gradcheck(self):
        params = {}
        cfg = PoolConfig(readouts=2, heads=2, blocks=2, text_dim=4, image_dim=4, proprio_dim=8)
        pool = AttentionPool.build(params, "p", cfg, 6, 4, np.random.default_rng(5))
        for t in params.values():
            t.data = t.data.astype(np.float64)
        tokens = T.parameter(
            np.random.default_rng(6).standard_normal((2, 3, 6)), dtype=np.float64)

        def loss():
            return T.sum_(T.square(pool(tokens)))

        gradcheck(loss, [tokens] + list(params.values()))


class TestModes:
    def test_paper_concat_dims(self):
        # published widths: 128 text + 512 image + 64 proprio
        enc = tiny_encoder()
        pool = PoolConfig()
        pcfg = PolicyConfig(cameras=1)
        assert VLAPolicy(enc, pool, pcfg, mode="full").concat_dim == 704
        assert VLAPolicy(tiny_encoder(), pool, pcfg, mode="no_fe").concat_dim == 640

    def test_desk_concat_dims(self):
        assert tiny_policy("full").concat_dim == 8 + 16 + 8
        assert tiny_policy("no_fl").concat_dim == 16 + 8
        assert tiny_policy("no_fe").concat_dim == 8 + 16
        assert tiny_policy("dfp").concat_dim == 8 + 16 + 8

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            tiny_policy(mode="nonsense")

    def test_assemble_missing_component(self):
        policy = tiny_policy("full")
        img = [T.Tensor(np.zeros((2, 16), dtype=np.float32))]
        with pytest.raises(ConfigError):
            policy.assemble_token(TokenBundle(None, img, None))

    def test_no_fe_rejects_proprio(self):
        policy = tiny_policy("no_fe")
        txt = T.Tensor(np.zeros((2, 8), dtype=np.float32))
        img = [T.Tensor(np.zeros((2, 16), dtype=np.float32))]
        pro = T.Tensor(np.zeros((2, 8), dtype=np.float32))
        with pytest.raises(ConfigError):
            policy.assemble_token(TokenBundle(txt, img, pro))
        with pytest.raises(ConfigError):
            policy.proprio_encode(np.zeros((2, 10)))

    def test_dfp_ignores_temperature(self):
        policy = tiny_policy("dfp")
        args = feature_window(policy)
        a = policy.window_tokens(*args).data.copy()
        policy.fusion.tau.data[...] = 37.0
        b = policy.window_tokens(*args).data
        np.testing.assert_array_equal(a, b)
        assert "fusion/tau" not in policy.trainable_params()

    def test_full_depends_on_temperature(self):
        policy = tiny_policy("full")
        args = feature_window(policy)
        a = policy.window_tokens(*args).data.copy()
        policy.fusion.tau.data[...] = 37.0
        b = policy.window_tokens(*args).data
        assert np.abs(a - b).max() > 1e-6
        assert "fusion/tau" in policy.trainable_params()

    @pytest.mark.parametrize("mode", ["full", "dfp", "no_fe", "no_fl", "cls_only",
                                      "xattn_pool", "scratch_vision"])
    def test_window_tokens_shape_all_modes(self, mode):
        policy = tiny_policy(mode)
        tokens = policy.window_tokens(*feature_window(policy))
        assert tokens.shape == (2, 3, 16)
        assert np.isfinite(tokens.data).all()

    def test_two_cameras(self):
        policy = tiny_policy("full", cameras=2)
        tokens = policy.window_tokens(*feature_window(policy))
        assert tokens.shape == (2, 3, 16)
        assert policy.concat_dim == 8 + 16 * 2 + 8

    def test_full_vs_dfp_param_count_differs_by_tau(self):
        full = tiny_policy("full").count_parameters()
        dfp = tiny_policy("dfp").count_parameters()
        assert full["total"] - dfp["total"] == 1
        assert full["fusion"] == 1 and "fusion" not in dfp

    def test_count_deterministic(self):
        a = tiny_policy("full").count_parameters()
        b = tiny_policy("full").count_parameters()
        assert a == b


class TestPolicyForward:
    def test_shapes_and_gripper_range(self):
        policy = tiny_policy()
        seq = T.Tensor(np.random.default_rng(0).standard_normal((2, 4, 16)).astype(np.float32))
        out = policy.policy_forward(seq)
        assert out.shape == (2, 4, 2, 10)
        grip = out.data[..., 9]
        assert ((grip >= 0) & (grip <= 1)).all()
        assert np.isfinite(out.data).all()

    def test_causal_prefix_bit_identical(self):
        policy = tiny_policy()
        r = np.random.default_rng(1)
        seq = r.standard_normal((1, 4, 16)).astype(np.float32)
        poked = seq.copy()
        poked[0, 2] += 1.0
        a = policy.policy_forward(T.Tensor(seq)).data
        b = policy.policy_forward(T.Tensor(poked)).data
        np.testing.assert_array_equal(a[0, :2], b[0, :2])
        assert not np.array_equal(a[0, 2], b[0, 2])

    def test_context_overflow(self):
        policy = tiny_policy()
        with pytest.raises(UsageError):
            policy.policy_forward(T.Tensor(np.zeros((1, 5, 16), dtype=np.float32)))

    def test_latent_mismatch(self):
        policy = tiny_policy()
        with pytest.raises(ShapeError):
            policy.policy_forward(T.Tensor(np.zeros((1, 4, 8), dtype=np.float32)))


class TestGradientRouting:
    def test_frozen_encoder_gets_no_gradient(self):
        policy = tiny_policy("full")
        with T.Graph():
            tokens = policy.window_tokens(*feature_window(policy))
            out = policy.policy_forward(tokens)
            T.backward(T.sum_(T.square(out)))
        for name, t in policy.encoder.p.items():
            assert t.grad is None, name
        trained = policy.trainable_params()
        for key in ("pool/text/queries", "proprio/w1", "assemble/weight",
                    "policy/block0/ffn/w1", "head/w2", "fusion/tau"):
            assert trained[key].grad is not None, key
            assert np.isfinite(trained[key].grad).all(), key

    def test_scratch_vision_trains_tower(self):
        policy = tiny_policy("scratch_vision")
        with T.Graph():
            tokens = policy.window_tokens(*feature_window(policy))
            T.backward(T.sum_(T.square(tokens)))
        assert policy.encoder.p["vision/patch_embed/weight"].grad is not None
        assert policy.encoder.p["text/token_embed"].grad is None
        assert "encoder/vision/proj" in policy.trainable_params()


class TestInference:
    def test_observe_and_predict(self):
        policy = tiny_policy()
        ctx = policy.text_context(INSTRUCTION)
        r = np.random.default_rng(2)
        img = r.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        token = policy.observe([img], np.zeros(10), ctx)
        assert token.shape == (16,)
        window = np.stack([token] * 3)
        chunk = policy.predict_chunk(window)
        assert chunk.shape == (2, 10)
        assert 0.0 <= chunk[0, 9] <= 1.0

    def test_observe_camera_count_checked(self):
        policy = tiny_policy()
        ctx = policy.text_context(INSTRUCTION)
        with pytest.raises(ShapeError):
            policy.observe([], np.zeros(10), ctx)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        policy = tiny_policy("full")
        args = feature_window(policy, seed=7)
        want = policy.policy_forward(policy.window_tokens(*args)).data
        path = tmp_path / "ckpt.ottr"
        policy.save_checkpoint(path)

        clone = VLAPolicy.load_checkpoint(path, tiny_encoder())
        got = clone.policy_forward(clone.window_tokens(*args)).data
        np.testing.assert_array_equal(got, want)
        assert clone.mode == "full"

    def test_missing_tensor_rejected(self, tmp_path):
        from tavla.archive import read_archive, write_archive

        policy = tiny_policy("full")
        path = tmp_path / "ckpt.ottr"
        policy.save_checkpoint(path)
        tensors = read_archive(path)
        del tensors["head/w2"]
        write_archive(path, tensors)
        with pytest.raises(ValidationError, match="head/w2"):
            VLAPolicy.load_checkpoint(path, tiny_encoder())

    def test_extra_tensor_rejected(self, tmp_path):
        from tavla.archive import read_archive, write_archive

        policy = tiny_policy("dfp")
        path = tmp_path / "ckpt.ottr"
        policy.save_checkpoint(path)
        tensors = read_archive(path)
        tensors["bogus"] = np.zeros(3, dtype=np.float32)
        write_archive(path, tensors)
        with pytest.raises(ValidationError, match="bogus"):
            VLAPolicy.load_checkpoint(path, tiny_encoder())

    def test_scratch_vision_checkpoint_carries_tower(self, tmp_path):
        policy = tiny_policy("scratch_vision")
        path = tmp_path / "ckpt.ottr"
        policy.save_checkpoint(path)
        clone = VLAPolicy.load_checkpoint(path, tiny_encoder(seed=99))
        np.testing.assert_array_equal(
            clone.encoder.p["vision/proj"].data,
            policy.encoder.p["vision/proj"].data,
        )


def test_full_policy_graph_gradcheck():
    """Finite-difference check through fusion, pooling and the transformer."""
    policy = tiny_policy("full").astype(np.float64)
    args = feature_window(policy, b=1, t=2, seed=11)
    checked = {
        name: t
        for name, t in policy.trainable_params().items()
        if name in ("fusion/tau", "pool/text/queries", "proprio/w1",
                    "assemble/weight", "policy/block0/attn/qkv_weight", "head/w2")
    }

    def loss():
        out = policy.policy_forward(policy.window_tokens(*args))
        return T.mean(T.square(out))

    gradcheck(loss, list(checked.values()))
