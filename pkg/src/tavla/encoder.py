"""Frozen dual image/text encoder with attention-branch feature extraction.

Both towers are pre-LN transformers. Each residual block computes

    h      = LN1(x)
    q,k,v  = split(h @ W_qkv + b_qkv)
    x_attn = attention(q, k, v) @ W_out + b_out
    x_sum  = x + x_attn
    x_out  = x_sum + FFN(LN2(x_sum))

and the final vision block additionally hands back ``x_attn``, the attention
branch before it is folded into the residual stream. Downstream fusion reads
per-patch features from that branch (projected and L2-normalized) instead of
from the pooled class token; the block output ``x_out`` stays available as a
baseline feature source.

Weights live in a flat name -> tensor dict and serialize to the tensor
archive together with the config, preprocessing constants and tokenizer, so
a single file reconstructs the encoder exactly.

Weight orientation is ``(in, out)`` everywhere: forward passes compute
``x @ W + b``. Converters from column-major checkpoints must transpose.
"""

from __future__ import annotations

import html
import json
import logging
import re
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .archive import read_archive, tensor_text, text_tensor, write_archive
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .tensor import Tensor

log = logging.getLogger(__name__)

ACTIVATIONS = {"gelu": T.gelu, "quick_gelu": T.quick_gelu}


@dataclass
class EncoderConfig:
    image_size: int = 48
    patch_size: int = 8
    vision_dim: int = 64
    vision_layers: int = 3
    vision_heads: int = 4
    vocab_size: int = 32
    text_dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_text_tokens: int = 16
    embed_dim: int = 64
    activation: str = "gelu"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.vision_dim % self.vision_heads:
            raise ConfigError(
                f"vision dim {self.vision_dim} not divisible by {self.vision_heads} heads"
            )
        if self.text_dim % self.text_heads:
            raise ConfigError(
                f"text dim {self.text_dim} not divisible by {self.text_heads} heads"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        g = self.grid
        return g[0] * g[1]

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kwargs[key] = value
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in kwargs.items():
            if key not in types:
                raise FormatError(f"unknown encoder config key {key!r}")
            out[key] = value if key == "activation" else int(value)
        return cls(**out)


# ---------------------------------------------------------------------------
# tokenizers


class WordTokenizer:
    """Whitespace tokenizer over a closed vocabulary.

    Ids: 0 pad, 1 start, 2 end, 3 unk, then the sorted vocabulary. Sequences
    longer than ``max_tokens`` are truncated (keeping the end token) with a
    logged warning.
    """

    KIND = "word"
    PAD, START, END, UNK = 0, 1, 2, 3

    def __init__(self, words: list[str], max_tokens: int = 16):
        self.words = sorted(set(w.lower() for w in words))
        self.max_tokens = max_tokens
        self._ids = {w: i + 4 for i, w in enumerate(self.words)}
        self._tokens = ["<pad>", "<start>", "<end>", "<unk>"] + self.words
        self.truncations = 0

    @property
    def vocab_size(self) -> int:
        return len(self._tokens)

    def encode(self, text: str) -> np.ndarray:
        parts = re.findall(r"[a-z0-9]+", text.lower())
        ids = [self.START] + [self._ids.get(p, self.UNK) for p in parts] + [self.END]
        if len(ids) > self.max_tokens:
            self.truncations += 1
            log.warning(
                "truncating %d-token instruction to %d tokens", len(ids), self.max_tokens
            )
            ids = ids[: self.max_tokens - 1] + [self.END]
        return np.asarray(ids, dtype=np.int64)

    def decode_tokens(self, ids) -> list[str]:
        return [self._tokens[int(i)] for i in ids]

    def word_positions(self, text: str, word: str) -> list[int]:
        """Token positions of ``word`` in the encoding of ``text``."""
        ids = self.encode(text)
        wid = self._ids.get(word.lower())
        return [i for i, t in enumerate(ids) if wid is not None and t == wid]

    def state(self) -> dict:
        return {"words": self.words, "max_tokens": self.max_tokens}

    @classmethod
    def from_state(cls, state: dict) -> "WordTokenizer":
        return cls(state["words"], max_tokens=state["max_tokens"])


def _bytes_to_unicode() -> dict[int, str]:
    """GPT-2 byte/unicode table: maps every byte to a printable character."""
    bs = list(range(ord("!"), ord("~") + 1))
    bs += list(range(ord("\xa1"), ord("\xac") + 1))
    bs += list(range(ord("\xae"), ord("\xff") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


_BPE_PATTERN = re.compile(
    r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[a-z]+|[0-9]|[^\sa-z0-9]+",
    re.IGNORECASE,
)


class BpeTokenizer:
    """Lowercasing byte-pair tokenizer with end-of-word markers.

    The pipeline is html-unescape, whitespace collapse, lowercase, a regex
    split, byte-to-unicode mapping, then greedy lowest-rank pair merging with
    ``</w>`` appended to each word's last symbol. Text handling is exact for
    ASCII input; exotic-unicode normalization (ftfy) is deliberately out of
    scope.
    """

    KIND = "bpe"

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]], max_tokens: int = 77):
        self.vocab = vocab
        self.merges = {tuple(m): i for i, m in enumerate(merges)}
        self.max_tokens = max_tokens
        self.byte_encoder = _bytes_to_unicode()
        self.cache: dict[str, list[str]] = {}
        self.sot = vocab["<|startoftext|>"]
        self.eot = vocab["<|endoftext|>"]
        self.truncations = 0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _bpe(self, token: str) -> list[str]:
        cached = self.cache.get(token)
        if cached is not None:
            return cached
        word = [*token[:-1], token[-1] + "</w>"]
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.merges.get(p, 1 << 30))
            if best not in self.merges:
                break
            first, second = best
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        self.cache[token] = word
        return word

    def encode(self, text: str) -> np.ndarray:
        text = html.unescape(html.unescape(text)).strip()
        text = re.sub(r"\s+", " ", text).strip().lower()
        ids = [self.sot]
        for piece in _BPE_PATTERN.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            for sub in self._bpe(mapped):
                wid = self.vocab.get(sub)
                if wid is None:
                    raise UsageError(f"token {sub!r} missing from BPE vocabulary")
                ids.append(wid)
        ids.append(self.eot)
        if len(ids) > self.max_tokens:
            self.truncations += 1
            log.warning("truncating %d-token text to %d tokens", len(ids), self.max_tokens)
            ids = ids[: self.max_tokens - 1] + [self.eot]
        return np.asarray(ids, dtype=np.int64)

    def state(self) -> dict:
        return {
            "vocab": self.vocab,
            "merges": [list(m) for m, _ in sorted(self.merges.items(), key=lambda kv: kv[1])],
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_state(cls, state: dict) -> "BpeTokenizer":
        return cls(
            state["vocab"],
            [tuple(m) for m in state["merges"]],
            max_tokens=state["max_tokens"],
        )


_TOKENIZER_KINDS = {WordTokenizer.KIND: WordTokenizer, BpeTokenizer.KIND: BpeTokenizer}


# ---------------------------------------------------------------------------
# towers


@dataclass
class VisionFeatures:
    """Per-image token features from the vision tower.

    ``x_out``/``x_attn`` have shape (B, 1 + n_patches, D); row 0 is the class
    token. ``x_attn`` is the final block's attention branch.
    """

    x_out: Tensor
    x_attn: Tensor
    grid: tuple[int, int]


@dataclass
class TextFeatures:
    """Token features from the text tower: ``tokens`` is (m, D_text)."""

    tokens: Tensor
    ids: np.ndarray
    eot_index: int


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


def init_transformer_block(par, prefix: str, d: int, ffn_mult: int, rng) -> None:
    """Register one pre-LN residual block's parameters under ``prefix``.

    ``par(name, array)`` is the registration callback. Weight matrices use
    fan-in scaling so activations keep unit-order magnitude at any width.
    """
    h = d * ffn_mult
    par(f"{prefix}/ln1/gain", np.ones(d))
    par(f"{prefix}/ln1/bias", np.zeros(d))
    par(f"{prefix}/attn/qkv_weight", _normal(rng, (d, 3 * d), d**-0.5))
    par(f"{prefix}/attn/qkv_bias", np.zeros(3 * d))
    par(f"{prefix}/attn/out_weight", _normal(rng, (d, d), d**-0.5))
    par(f"{prefix}/attn/out_bias", np.zeros(d))
    par(f"{prefix}/ln2/gain", np.ones(d))
    par(f"{prefix}/ln2/bias", np.zeros(d))
    par(f"{prefix}/ffn/w1", _normal(rng, (d, h), d**-0.5))
    par(f"{prefix}/ffn/b1", np.zeros(h))
    par(f"{prefix}/ffn/w2", _normal(rng, (h, d), h**-0.5))
    par(f"{prefix}/ffn/b2", np.zeros(d))


def transformer_block_forward(
    p: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    heads: int,
    act,
    mask: np.ndarray | None,
) -> tuple[Tensor, Tensor]:
    """Run one pre-LN residual block; returns (x_out, attention branch)."""
    h = T.layer_norm(x, p[f"{prefix}/ln1/gain"], p[f"{prefix}/ln1/bias"])
    qkv = T.add(T.matmul(h, p[f"{prefix}/attn/qkv_weight"]), p[f"{prefix}/attn/qkv_bias"])
    d = x.shape[-1]
    q = T.narrow(qkv, -1, 0, d)
    k = T.narrow(qkv, -1, d, d)
    v = T.narrow(qkv, -1, 2 * d, d)
    ctx, _ = T.multi_head_attention(q, k, v, heads, mask=mask)
    x_attn = T.add(T.matmul(ctx, p[f"{prefix}/attn/out_weight"]), p[f"{prefix}/attn/out_bias"])
    x_sum = T.add(x, x_attn)
    h2 = T.layer_norm(x_sum, p[f"{prefix}/ln2/gain"], p[f"{prefix}/ln2/bias"])
    f = T.add(T.matmul(h2, p[f"{prefix}/ffn/w1"]), p[f"{prefix}/ffn/b1"])
    f = act(f)
    f = T.add(T.matmul(f, p[f"{prefix}/ffn/w2"]), p[f"{prefix}/ffn/b2"])
    x_out = T.add(x_sum, f)
    return x_out, x_attn


class DualEncoder:
    """Image and text towers plus shared-space projections."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor], tokenizer,
                 mean: np.ndarray, std: np.ndarray):
        self.cfg = cfg
        self.p = params
        self.tokenizer = tokenizer
        self.mean = np.asarray(mean, dtype=np.float32).reshape(3)
        self.std = np.asarray(std, dtype=np.float32).reshape(3)
        self._act = ACTIVATIONS[cfg.activation]

    # -- construction -------------------------------------------------------

    @classmethod
    def init_random(cls, cfg: EncoderConfig, rng: np.random.Generator,
                    tokenizer=None) -> "DualEncoder":
        if tokenizer is None:
            raise UsageError("init_random needs a tokenizer")
        if tokenizer.vocab_size != cfg.vocab_size:
            raise ConfigError(
                f"tokenizer vocab {tokenizer.vocab_size} != config vocab {cfg.vocab_size}"
            )
        p: dict[str, Tensor] = {}

        def par(name, arr):
            p[name] = T.parameter(arr.astype(np.float32))

        d, dt, e = cfg.vision_dim, cfg.text_dim, cfg.embed_dim
        patch_in = cfg.patch_size * cfg.patch_size * 3
        par("vision/patch_embed/weight", _normal(rng, (patch_in, d), patch_in**-0.5))
        par("vision/cls_token", _normal(rng, (d,), 0.02))
        par("vision/pos_embed", _normal(rng, (1 + cfg.n_patches, d), 0.01))
        par("vision/pre_ln/gain", np.ones(d))
        par("vision/pre_ln/bias", np.zeros(d))
        for i in range(cfg.vision_layers):
            cls._init_block(par, f"vision/block{i}", d, cfg.ffn_mult, rng)
        par("vision/ln_post/gain", np.ones(d))
        par("vision/ln_post/bias", np.zeros(d))
        par("vision/proj", _normal(rng, (d, e), d**-0.5))

        par("text/token_embed", _normal(rng, (cfg.vocab_size, dt), 0.02))
        par("text/pos_embed", _normal(rng, (cfg.max_text_tokens, dt), 0.01))
        for i in range(cfg.text_layers):
            cls._init_block(par, f"text/block{i}", dt, cfg.ffn_mult, rng)
        par("text/ln_final/gain", np.ones(dt))
        par("text/ln_final/bias", np.zeros(dt))
        par("text/proj", _normal(rng, (dt, e), dt**-0.5))
        # contrastive-pretraining temperature; unused by downstream policies
        par("logit_scale", np.array(np.log(1.0 / 0.07)))

        mean = np.array([0.5, 0.5, 0.5], dtype=np.float32)
        std = np.array([0.3, 0.3, 0.3], dtype=np.float32)
        return cls(cfg, p, tokenizer, mean, std)

    _init_block = staticmethod(init_transformer_block)

    # -- serialization -------------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"config": text_tensor(self.cfg.to_text())}
        out["preprocess/mean"] = self.mean
        out["preprocess/std"] = self.std
        out["tokenizer/kind"] = text_tensor(self.tokenizer.KIND)
        out["tokenizer/state"] = text_tensor(json.dumps(self.tokenizer.state()))
        for name, t in self.p.items():
            out[name] = t.data
        return out

    def save(self, path) -> None:
        write_archive(path, self.to_tensors())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "DualEncoder":
        try:
            cfg = EncoderConfig.from_text(tensor_text(tensors["config"]))
            kind = tensor_text(tensors["tokenizer/kind"])
            state = json.loads(tensor_text(tensors["tokenizer/state"]))
            mean = tensors["preprocess/mean"]
            std = tensors["preprocess/std"]
        except KeyError as e:
            raise FormatError(f"encoder archive missing tensor {e.args[0]!r}") from e
        tok_cls = _TOKENIZER_KINDS.get(kind)
        if tok_cls is None:
            raise FormatError(f"unknown tokenizer kind {kind!r}")
        tokenizer = tok_cls.from_state(state)
        skip = {"config", "preprocess/mean", "preprocess/std", "tokenizer/kind", "tokenizer/state"}
        params = {
            name: Tensor(arr, requires_grad=False)
            for name, arr in tensors.items()
            if name not in skip and not name.startswith("golden/")
        }
        enc = cls(cfg, params, tokenizer, mean, std)
        enc._check_shapes()
        return enc

    @classmethod
    def load(cls, path) -> "DualEncoder":
        return cls.from_tensors(read_archive(path))

    def _check_shapes(self) -> None:
        cfg = self.cfg
        want = {
            "vision/patch_embed/weight": (cfg.patch_size**2 * 3, cfg.vision_dim),
            "vision/pos_embed": (1 + cfg.n_patches, cfg.vision_dim),
            "vision/proj": (cfg.vision_dim, cfg.embed_dim),
            "text/token_embed": (cfg.vocab_size, cfg.text_dim),
            "text/proj": (cfg.text_dim, cfg.embed_dim),
        }
        for name, shape in want.items():
            t = self.p.get(name)
            if t is None:
                raise FormatError(f"encoder archive missing tensor {name!r}")
            if t.shape != shape:
                raise ShapeError(f"{name} has shape {t.shape}; config implies {shape}")

    # -- training switches ---------------------------------------------------

    def set_trainable(self, vision: bool = False, text: bool = False, proj: bool = False) -> None:
        for name, t in self.p.items():
            if name.startswith("vision/"):
                t.requires_grad = vision or (proj and name == "vision/proj")
            elif name.startswith("text/"):
                t.requires_grad = text or (proj and name == "text/proj")

    def named_parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        if trainable_only:
            return {n: t for n, t in self.p.items() if t.requires_grad}
        return dict(self.p)

    def astype(self, dtype) -> "DualEncoder":
        for t in self.p.values():
            t.data = t.data.astype(dtype)
        self.mean = self.mean.astype(dtype)
        self.std = self.std.astype(dtype)
        return self

    # -- forward passes ------------------------------------------------------

    def _block(self, x: Tensor, prefix: str, heads: int,
               mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        return transformer_block_forward(self.p, prefix, x, heads, self._act, mask)

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        """uint8 or float images (B, S, S, 3) -> normalized float batch."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ShapeError(
                f"expected images (B, {s}, {s}, 3); got {images.shape}"
            )
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        dtype = self.p["vision/proj"].dtype
        images = images.astype(dtype, copy=False)
        return (images - self.mean.astype(dtype)) / self.std.astype(dtype)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, S, S, 3) -> (B, n_patches, patch*patch*3), row-major patches."""
        b = images.shape[0]
        g = self.cfg.grid[0]
        ps = self.cfg.patch_size
        x = images.reshape(b, g, ps, g, ps, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, ps * ps * 3)

    def vision_forward(self, images: np.ndarray) -> VisionFeatures:
        cfg = self.cfg
        patches = self.patchify(self.preprocess(images))
        tokens = T.matmul(Tensor(patches), self.p["vision/patch_embed/weight"])
        b = tokens.shape[0]
        cls_tok = T.reshape(self.p["vision/cls_token"], (1, 1, cfg.vision_dim))
        cls_tok = T.add(cls_tok, np.zeros((b, 1, cfg.vision_dim), dtype=tokens.dtype))
        x = T.concat([cls_tok, tokens], axis=1)
        x = T.add(x, self.p["vision/pos_embed"])  # broadcasts over the batch
        x = T.layer_norm(x, self.p["vision/pre_ln/gain"], self.p["vision/pre_ln/bias"])
        x_attn = None
        for i in range(cfg.vision_layers):
            x, x_attn = self._block(x, f"vision/block{i}", cfg.vision_heads, mask=None)
        return VisionFeatures(x_out=x, x_attn=x_attn, grid=cfg.grid)

    def text_forward(self, text: str) -> TextFeatures:
        ids = self.tokenizer.encode(text)
        m = len(ids)
        if m > self.cfg.max_text_tokens:
            raise UsageError(f"{m} tokens exceed the {self.cfg.max_text_tokens}-token context")
        x = T.embedding_lookup(self.p["text/token_embed"], ids)
        x = T.add(x, T.narrow(self.p["text/pos_embed"], 0, 0, m))
        mask = T.causal_mask(m, dtype=x.dtype)
        for i in range(self.cfg.text_layers):
            x, _ = self._block(x, f"text/block{i}", self.cfg.text_heads, mask=mask)
        eot = int(np.argmax(ids)) if self.tokenizer.KIND == "bpe" else m - 1
        return TextFeatures(tokens=x, ids=ids, eot_index=eot)

    # -- shared-space projections ---------------------------------------------

    def patch_features(self, vf: VisionFeatures, source: str = "attn") -> Tensor:
        """L2-normalized per-patch embeddings (B, n, embed_dim).

        ``source`` picks the token stream: "attn" for the final block's
        attention branch, "out" for the block output. The class token row is
        excluded.
        """
        if source == "attn":
            x = vf.x_attn
        elif source == "out":
            x = vf.x_out
        else:
            raise UsageError(f"unknown patch feature source {source!r}")
        x = T.narrow(x, 1, 1, x.shape[1] - 1)
        x = T.layer_norm(x, self.p["vision/ln_post/gain"], self.p["vision/ln_post/bias"])
        x = T.matmul(x, self.p["vision/proj"])
        return T.l2_normalize(x)

    def text_token_features(self, tf: TextFeatures) -> Tensor:
        """L2-normalized per-token embeddings (m, embed_dim)."""
        x = T.layer_norm(tf.tokens, self.p["text/ln_final/gain"], self.p["text/ln_final/bias"])
        x = T.matmul(x, self.p["text/proj"])
        return T.l2_normalize(x)

    def image_embedding(self, vf: VisionFeatures) -> Tensor:
        """Class-token image embedding (B, embed_dim), L2-normalized."""
        x = T.narrow(vf.x_out, 1, 0, 1)
        x = T.layer_norm(x, self.p["vision/ln_post/gain"], self.p["vision/ln_post/bias"])
        x = T.matmul(x, self.p["vision/proj"])
        return T.l2_normalize(T.reshape(x, (x.shape[0], x.shape[-1])))

    def text_embedding(self, tf: TextFeatures) -> Tensor:
        """End-of-text token embedding (embed_dim,), L2-normalized."""
        x = T.layer_norm(tf.tokens, self.p["text/ln_final/gain"], self.p["text/ln_final/bias"])
        x = T.narrow(x, 0, tf.eot_index, 1)
        x = T.matmul(x, self.p["text/proj"])
        return T.l2_normalize(T.reshape(x, (x.shape[-1],)))


def sim_word_tokenizer(max_tokens: int = 16) -> WordTokenizer:
    """Tokenizer over the tabletop task vocabulary."""
    words = [
        "a", "ball", "blue", "bowl", "cube", "green", "in", "on", "poke",
        "put", "red", "star", "table", "the", "triangle", "yellow",
    ]
    return WordTokenizer(words, max_tokens=max_tokens)
