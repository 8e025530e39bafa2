"""Dual encoder: tokenizers, tower semantics, serialization."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import erf

from tavla import tensor as T
from tavla.encoder import (
    BpeTokenizer,
    DualEncoder,
    EncoderConfig,
    WordTokenizer,
    sim_word_tokenizer,
)
from tavla.errors import ConfigError, FormatError, ShapeError, UsageError


@pytest.fixture(scope="module")
def enc():
    tok = sim_word_tokenizer()
    cfg = EncoderConfig(vocab_size=tok.vocab_size)
    return DualEncoder.init_random(cfg, np.random.default_rng(0), tokenizer=tok)


def rand_images(n, size=48, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ConfigError):
            EncoderConfig(image_size=50, patch_size=8)
        with pytest.raises(ConfigError):
            EncoderConfig(vision_dim=65, vision_heads=4)
        with pytest.raises(ConfigError):
            EncoderConfig(activation="relu")

    def test_text_round_trip(self):
        cfg = EncoderConfig(vision_layers=5, activation="quick_gelu")
        assert EncoderConfig.from_text(cfg.to_text()) == cfg

    def test_grid(self):
        assert EncoderConfig().grid == (6, 6)
        assert EncoderConfig().n_patches == 36


class TestWordTokenizer:
    def test_specials_and_order(self):
        tok = WordTokenizer(["red", "cube"], max_tokens=8)
        ids = tok.encode("put the red cube")
        assert ids[0] == tok.START and ids[-1] == tok.END
        # unknown words map to UNK, known words to stable sorted ids
        assert list(ids[1:-1]) == [tok.UNK, tok.UNK, 4 + 1, 4 + 0]

    def test_empty_string(self):
        tok = sim_word_tokenizer()
        ids = tok.encode("")
        assert list(ids) == [tok.START, tok.END]

    def test_truncation_warns_and_keeps_end(self, caplog):
        tok = WordTokenizer(["a"], max_tokens=4)
        with caplog.at_level("WARNING"):
            ids = tok.encode("a a a a a a")
        assert len(ids) == 4 and ids[-1] == tok.END
        assert tok.truncations == 1
        assert "truncating" in caplog.text

    def test_word_positions(self):
        tok = sim_word_tokenizer()
        (pos,) = tok.word_positions("put the red cube in the blue bowl", "cube")
        ids = tok.encode("put the red cube in the blue bowl")
        assert tok.decode_tokens(ids)[pos] == "cube"

    def test_state_round_trip(self):
        tok = sim_word_tokenizer()
        clone = WordTokenizer.from_state(tok.state())
        text = "poke the yellow star"
        np.testing.assert_array_equal(clone.encode(text), tok.encode(text))


def make_test_bpe():
    chars = "abcdefghijklmnopqrstuvwxyz "
    vocab = {}
    for c in chars.strip():
        vocab[c] = len(vocab)
        vocab[c + "</w>"] = len(vocab)
    for tok in ["ca", "cat</w>", "<|startoftext|>", "<|endoftext|>"]:
        vocab[tok] = len(vocab)
    merges = [("c", "a"), ("ca", "t</w>")]
    return BpeTokenizer(vocab, merges, max_tokens=16)


class TestBpeTokenizer:
    def test_merges_apply_in_rank_order(self):
        tok = make_test_bpe()
        ids = tok.encode("a cat")
        toks = {v: k for k, v in tok.vocab.items()}
        assert [toks[i] for i in ids] == ["<|startoftext|>", "a</w>", "cat</w>", "<|endoftext|>"]

    def test_unmergeable_word_falls_back_to_chars(self):
        tok = make_test_bpe()
        ids = tok.encode("act")
        toks = {v: k for k, v in tok.vocab.items()}
        assert [toks[i] for i in ids] == ["<|startoftext|>", "a", "c", "t</w>", "<|endoftext|>"]

    def test_case_and_whitespace_folding(self):
        tok = make_test_bpe()
        np.testing.assert_array_equal(tok.encode("A   Cat"), tok.encode("a cat"))

    def test_state_round_trip(self):
        tok = make_test_bpe()
        clone = BpeTokenizer.from_state(tok.state())
        np.testing.assert_array_equal(clone.encode("a cat act"), tok.encode("a cat act"))


class TestVisionTower:
    def test_shapes(self, enc):
        vf = enc.vision_forward(rand_images(2))
        assert vf.x_out.shape == (2, 37, 64)
        assert vf.x_attn.shape == (2, 37, 64)
        assert vf.grid == (6, 6)

    def test_uint8_and_float_agree(self, enc):
        imgs = rand_images(1)
        a = enc.vision_forward(imgs).x_out.data
        b = enc.vision_forward(imgs.astype(np.float32) / 255.0).x_out.data
        np.testing.assert_array_equal(a, b)

    def test_batch_rows_independent(self, enc):
        imgs = rand_images(3, seed=5)
        batch = enc.vision_forward(imgs).x_out.data
        single = enc.vision_forward(imgs[1:2]).x_out.data
        np.testing.assert_array_equal(batch[1:2], single)

    def test_bad_size_raises(self, enc):
        with pytest.raises(ShapeError):
            enc.vision_forward(np.zeros((1, 32, 32, 3), dtype=np.uint8))

    def test_patchify_row_major(self, enc):
        # Mark one pixel inside patch (row 1, col 2); only that patch changes.
        base = np.zeros((1, 48, 48, 3), dtype=np.float32)
        poked = base.copy()
        poked[0, 8 * 1 + 3, 8 * 2 + 4, 1] = 1.0
        pa, pb = enc.patchify(base), enc.patchify(poked)
        changed = np.flatnonzero(np.abs(pa - pb).sum(axis=-1))
        assert list(changed) == [1 * 6 + 2]

    def test_block_decomposition(self, enc):
        """x_out must equal (x + x_attn) + FFN(LN2(x + x_attn)) exactly.

        The FFN/LN arithmetic is recomputed here with plain numpy as an
        independent oracle.
        """
        r = np.random.default_rng(7)
        x = T.Tensor(r.standard_normal((2, 9, 64)).astype(np.float32))
        x_out, x_attn = enc._block(x, "vision/block1", enc.cfg.vision_heads, mask=None)
        x_sum = x.data + x_attn.data

        p = {k: t.data for k, t in enc.p.items()}
        mu = x_sum.mean(-1, keepdims=True)
        var = x_sum.var(-1, keepdims=True)
        h2 = (x_sum - mu) / np.sqrt(var + 1e-5)
        h2 = h2 * p["vision/block1/ln2/gain"] + p["vision/block1/ln2/bias"]
        a = h2 @ p["vision/block1/ffn/w1"] + p["vision/block1/ffn/b1"]
        a = a * 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
        ffn = a @ p["vision/block1/ffn/w2"] + p["vision/block1/ffn/b2"]
        np.testing.assert_allclose(x_out.data, x_sum + ffn, atol=1e-6)


class TestTextTower:
    def test_causal_prefix_invariance(self, enc):
        a = enc.text_forward("put the red cube in the blue bowl")
        b = enc.text_forward("put the red ball on the table")
        # shared prefix: <start> put the red
        np.testing.assert_array_equal(a.tokens.data[:4], b.tokens.data[:4])
        assert not np.array_equal(a.tokens.data[4], b.tokens.data[4])

    def test_eot_is_last_token_for_word_tokenizer(self, enc):
        tf = enc.text_forward("poke the green triangle")
        assert tf.eot_index == len(tf.ids) - 1

    def test_token_feature_shapes(self, enc):
        tf = enc.text_forward("put the red cube in the blue bowl")
        feats = enc.text_token_features(tf)
        assert feats.shape == (len(tf.ids), 64)
        np.testing.assert_allclose(
            np.linalg.norm(feats.data, axis=-1), 1.0, atol=1e-5
        )


class TestProjections:
    def test_patch_features_exclude_class_token(self, enc):
        vf = enc.vision_forward(rand_images(2, seed=3))
        feats = enc.patch_features(vf)
        assert feats.shape == (2, 36, 64)
        np.testing.assert_allclose(
            np.linalg.norm(feats.data, axis=-1), 1.0, atol=1e-5
        )

    def test_attn_and_out_sources_differ(self, enc):
        vf = enc.vision_forward(rand_images(1, seed=4))
        a = enc.patch_features(vf, source="attn").data
        b = enc.patch_features(vf, source="out").data
        assert np.abs(a - b).max() > 1e-3

    def test_unknown_source(self, enc):
        vf = enc.vision_forward(rand_images(1))
        with pytest.raises(UsageError):
            enc.patch_features(vf, source="cls")

    def test_embeddings_normalized(self, enc):
        vf = enc.vision_forward(rand_images(2, seed=6))
        tf = enc.text_forward("put the red cube in the blue bowl")
        img = enc.image_embedding(vf)
        txt = enc.text_embedding(tf)
        assert img.shape == (2, 64) and txt.shape == (64,)
        np.testing.assert_allclose(np.linalg.norm(img.data, axis=-1), 1.0, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(txt.data), 1.0, atol=1e-5)


class TestSerialization:
    def test_archive_round_trip_exact(self, enc, tmp_path):
        path = tmp_path / "enc.ottr"
        enc.save(path)
        clone = DualEncoder.load(path)
        imgs = rand_images(2, seed=9)
        np.testing.assert_array_equal(
            clone.vision_forward(imgs).x_attn.data,
            enc.vision_forward(imgs).x_attn.data,
        )
        text = "put the yellow ball in the green bowl"
        np.testing.assert_array_equal(
            clone.text_forward(text).tokens.data, enc.text_forward(text).tokens.data
        )
        assert all(not t.requires_grad for t in clone.p.values())

    def test_missing_tensor_raises(self, enc, tmp_path):
        tensors = enc.to_tensors()
        del tensors["vision/proj"]
        with pytest.raises(FormatError, match="vision/proj"):
            DualEncoder.from_tensors(tensors)

    def test_wrong_shape_raises(self, enc):
        tensors = enc.to_tensors()
        tensors["text/proj"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(ShapeError, match="text/proj"):
            DualEncoder.from_tensors(tensors)

    def test_set_trainable_groups(self, enc, tmp_path):
        path = tmp_path / "enc.ottr"
        enc.save(path)
        clone = DualEncoder.load(path)
        clone.set_trainable(vision=True)
        assert clone.p["vision/proj"].requires_grad
        assert not clone.p["text/proj"].requires_grad
        clone.set_trainable()
        assert not any(t.requires_grad for t in clone.p.values())
