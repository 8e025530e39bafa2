"""Policy head: attention pooling, token assembly, causal transformer.

Per control step the policy consumes
  * pooled language token  f'_l  (cross-attention pool over raw text tokens),
  * pooled visual token(s) f'_vl (one per camera, pooled over fused features),
  * proprioception embedding f_e (2-layer FFN over the 10-d pose vector),
concatenates them, projects to the transformer latent, adds a learned
temporal position, and runs a causal transformer whose per-step output an FFN
head decodes into a chunk of ``horizon`` 10-d actions (gripper channel
squashed into [0,1] by a logistic).

Ablation modes rewire the token assembly:
  full            fused features pooled per camera (the default architecture)
  dfp             vision and text pooled separately; fusion bypassed entirely
  no_fe           drops the proprio token
  no_fl           drops the pooled language token (text still drives fusion)
  scratch_vision  full wiring, but the vision tower is re-initialized and
                  trained end to end
  cls_only        the class-token embedding replaces patch pooling
  xattn_pool      a learned cross-attention block replaces the fixed fusion
  finetune_clip   full wiring with both encoder towers unfrozen

A pooling block is pure chained cross-attention (no residual or FFN):
``Q <- MHA(Q Wq, K Wk, V Wv) Wo``; with one key and identity value/output
projections each readout equals that key's token exactly. After the blocks,
each of the N_q readouts gets its own linear projection to out_dim / N_q and
the pieces are concatenated.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .archive import read_archive, tensor_text, text_tensor, write_archive
from .encoder import (
    ACTIVATIONS,
    DualEncoder,
    init_transformer_block,
    transformer_block_forward,
)
from .errors import ConfigError, FormatError, ShapeError, UsageError, ValidationError
from .fusion import FusionState, fuse
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = (
    "full",
    "dfp",
    "no_fe",
    "no_fl",
    "scratch_vision",
    "cls_only",
    "xattn_pool",
    "finetune_clip",
)

# Modes whose token assembly runs the temperature-weighted fusion.
FUSING_MODES = ("full", "no_fe", "no_fl", "scratch_vision", "finetune_clip")


@dataclass
class PoolConfig:
    readouts: int = 4
    heads: int = 8
    blocks: int = 2
    text_dim: int = 128
    image_dim: int = 512
    proprio_dim: int = 64

    def __post_init__(self):
        for name in ("text_dim", "image_dim"):
            dim = getattr(self, name)
            if dim % self.readouts:
                raise ConfigError(
                    f"pool {name} {dim} not divisible by {self.readouts} readouts"
                )


@dataclass
class PolicyConfig:
    layers: int = 4
    heads: int = 8
    latent: int = 512
    context: int = 12
    horizon: int = 12
    cameras: int = 1
    action_dim: int = 10
    activation: str = "gelu"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.latent % self.heads:
            raise ConfigError(f"latent {self.latent} not divisible by {self.heads} heads")
        if self.horizon < 1:
            raise ConfigError(f"prediction horizon must be >= 1; got {self.horizon}")
        if self.context < 1:
            raise ConfigError(f"context must be >= 1; got {self.context}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class TokenBundle:
    """Pooled pieces that assemble into one policy token f_t."""

    text_pooled: Tensor | None = None
    image_pooled: list[Tensor] | None = None
    proprio_emb: Tensor | None = None


class AttentionPool:
    """N_q learnable queries cross-attend to a token set, then project."""

    def __init__(self, params: dict[str, Tensor], prefix: str, cfg: PoolConfig,
                 in_dim: int, out_dim: int):
        self.p = params
        self.prefix = prefix
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = out_dim

    @classmethod
    def build(cls, params, prefix: str, cfg: PoolConfig, in_dim: int, out_dim: int,
              rng: np.random.Generator) -> "AttentionPool":
        if out_dim % cfg.readouts:
            raise ConfigError(
                f"pool output dim {out_dim} not divisible by {cfg.readouts} readouts"
            )
        if in_dim % cfg.heads:
            raise ConfigError(f"pool input dim {in_dim} not divisible by {cfg.heads} heads")

        def par(name, arr):
            params[name] = T.parameter(arr.astype(np.float32))

        std = in_dim**-0.5
        par(f"{prefix}/queries", rng.standard_normal((cfg.readouts, in_dim)) * std)
        for b in range(cfg.blocks):
            for side in ("q", "k", "v", "o"):
                par(f"{prefix}/block{b}/{side}_weight",
                    rng.standard_normal((in_dim, in_dim)) * std)
                if side != "k":
                    # a key bias shifts every logit of a query by the same
                    # constant, which softmax cancels; it would be dead weight
                    par(f"{prefix}/block{b}/{side}_bias", np.zeros(in_dim))
        par(f"{prefix}/out_weight",
            rng.standard_normal((cfg.readouts, in_dim, out_dim // cfg.readouts)) * std)
        par(f"{prefix}/out_bias", np.zeros(out_dim))
        return cls(params, prefix, cfg, in_dim, out_dim)

    def __call__(self, tokens: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Pool (..., k, D) tokens into (..., out_dim).

        ``key_mask`` is boolean (..., k); False keys are masked out.
        """
        if tokens.ndim < 2 or tokens.shape[-1] != self.in_dim:
            raise ShapeError(
                f"pool {self.prefix} expects (..., k, {self.in_dim}); got {tokens.shape}"
            )
        k = tokens.shape[-2]
        if k < 1:
            raise UsageError(f"pool {self.prefix} got an empty token list")
        add_mask = None
        if key_mask is not None:
            if key_mask.shape != tokens.shape[:-1]:
                raise ShapeError(
                    f"key mask {key_mask.shape} does not match tokens {tokens.shape}"
                )
            if not key_mask.any(axis=-1).all():
                raise UsageError(f"pool {self.prefix}: a row has every key masked")
            neg = np.where(key_mask, 0.0, -np.inf).astype(tokens.dtype)
            # broadcast over heads and queries: (..., 1, 1, k)
            add_mask = neg[..., None, None, :]
        p = self.p
        q: Tensor = p[f"{self.prefix}/queries"]
        for b in range(self.cfg.blocks):
            pre = f"{self.prefix}/block{b}"
            qp = T.add(T.matmul(q, p[f"{pre}/q_weight"]), p[f"{pre}/q_bias"])
            kp = T.matmul(tokens, p[f"{pre}/k_weight"])
            vp = T.add(T.matmul(tokens, p[f"{pre}/v_weight"]), p[f"{pre}/v_bias"])
            ctx, _ = T.multi_head_attention(qp, kp, vp, self.cfg.heads, mask=add_mask)
            q = T.add(T.matmul(ctx, p[f"{pre}/o_weight"]), p[f"{pre}/o_bias"])
        # per-readout projection, concatenated
        w = p[f"{self.prefix}/out_weight"]
        pieces = []
        for r in range(self.cfg.readouts):
            row = T.narrow(q, -2, r, 1)  # (..., 1, D)
            wr = T.reshape(T.narrow(w, 0, r, 1), (self.in_dim, self.out_dim // self.cfg.readouts))
            pieces.append(T.matmul(row, wr))
        out = T.concat(pieces, axis=-1)  # (..., 1, out)
        out = T.reshape(out, out.shape[:-2] + (self.out_dim,))
        return T.add(out, p[f"{self.prefix}/out_bias"])


class VLAPolicy:
    """Encoder + fusion + pooling + causal transformer, wired per mode."""

    def __init__(self, encoder: DualEncoder, pool_cfg: PoolConfig, cfg: PolicyConfig,
                 mode: str = "full", seed: int = 0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; pick one of {MODES}")
        self.encoder = encoder
        self.pool_cfg = pool_cfg
        self.cfg = cfg
        self.mode = mode
        self.p: dict[str, Tensor] = {}
        self._act = ACTIVATIONS[cfg.activation]
        rng = np.random.default_rng(seed)

        e = encoder.cfg.embed_dim
        td = encoder.cfg.text_dim
        self.fusion = FusionState.create(encoder.cfg.grid, e)
        self.p["fusion/tau"] = self.fusion.tau

        def par(name, arr):
            self.p[name] = T.parameter(arr.astype(np.float32))

        concat_dim = 0
        if mode != "no_fl":
            self.text_pool = AttentionPool.build(
                self.p, "pool/text", pool_cfg, td, pool_cfg.text_dim, rng)
            concat_dim += pool_cfg.text_dim
        else:
            self.text_pool = None

        self.image_pools: list[AttentionPool] = []
        if mode == "cls_only":
            for j in range(cfg.cameras):
                par(f"cls_proj/img{j}/weight", rng.standard_normal((e, pool_cfg.image_dim)) * e**-0.5)
                par(f"cls_proj/img{j}/bias", np.zeros(pool_cfg.image_dim))
            concat_dim += pool_cfg.image_dim * cfg.cameras
        else:
            for j in range(cfg.cameras):
                self.image_pools.append(AttentionPool.build(
                    self.p, f"pool/img{j}", pool_cfg, e, pool_cfg.image_dim, rng))
            concat_dim += pool_cfg.image_dim * cfg.cameras
        if mode == "xattn_pool":
            for j in range(cfg.cameras):
                for side in ("q", "k", "v", "o"):
                    par(f"xattn/img{j}/{side}_weight", rng.standard_normal((e, e)) * e**-0.5)
                    if side != "k":
                        par(f"xattn/img{j}/{side}_bias", np.zeros(e))

        if mode != "no_fe":
            par("proprio/w1", rng.standard_normal((10, pool_cfg.proprio_dim)) * 10**-0.5)
            par("proprio/b1", np.zeros(pool_cfg.proprio_dim))
            par("proprio/w2",
                rng.standard_normal((pool_cfg.proprio_dim, pool_cfg.proprio_dim))
                * pool_cfg.proprio_dim**-0.5)
            par("proprio/b2", np.zeros(pool_cfg.proprio_dim))
            concat_dim += pool_cfg.proprio_dim
        self.concat_dim = concat_dim

        par("assemble/weight", rng.standard_normal((concat_dim, cfg.latent)) * concat_dim**-0.5)
        par("assemble/bias", np.zeros(cfg.latent))
        par("policy/pos_embed", rng.standard_normal((cfg.context, cfg.latent)) * 0.01)
        for i in range(cfg.layers):
            init_transformer_block(par, f"policy/block{i}", cfg.latent, cfg.ffn_mult, rng)
        par("policy/ln_f/gain", np.ones(cfg.latent))
        par("policy/ln_f/bias", np.zeros(cfg.latent))
        par("head/w1", rng.standard_normal((cfg.latent, cfg.latent)) * cfg.latent**-0.5)
        par("head/b1", np.zeros(cfg.latent))
        par("head/w2",
            rng.standard_normal((cfg.latent, cfg.horizon * cfg.action_dim))
            * cfg.latent**-0.5)
        par("head/b2", np.zeros(cfg.horizon * cfg.action_dim))

        if mode == "scratch_vision":
            # replace the pretrained vision tower with a fresh one
            fresh = DualEncoder.init_random(encoder.cfg, rng, tokenizer=encoder.tokenizer)
            for name, t in fresh.p.items():
                if name.startswith("vision/"):
                    encoder.p[name].data = t.data.copy()
            encoder.set_trainable(vision=True)
        elif mode == "finetune_clip":
            encoder.set_trainable(vision=True, text=True)
        else:
            encoder.set_trainable()

    # -- parameter bookkeeping ----------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        """Everything the optimizer updates, including tau and any unfrozen
        encoder groups. tau is omitted in modes that never evaluate fusion."""
        out = {}
        for name, t in self.p.items():
            # dfp/cls_only never evaluate fusion and xattn_pool replaces it,
            # so tau would only drift under weight decay there; leave it out.
            if name == "fusion/tau" and self.mode not in FUSING_MODES:
                continue
            out[name] = t
        for name, t in self.encoder.named_parameters(trainable_only=True).items():
            # the contrastive temperature never feeds the policy graph, so it
            # would get no gradient; keep it out of the optimizer set
            if name == "logit_scale":
                continue
            out[f"encoder/{name}"] = t
        return out

    def count_parameters(self) -> dict[str, int]:
        """Deterministic per-group trainable parameter counts plus 'total'."""
        groups: dict[str, int] = {}
        for name, t in self.trainable_params().items():
            group = name.split("/")[0]
            groups[group] = groups.get(group, 0) + t.size
        groups["total"] = sum(groups.values())
        return groups

    # -- pooled pieces --------------------------------------------------------

    def proprio_encode(self, proprio) -> Tensor:
        """(..., 10) pose vectors -> (..., proprio_dim) embeddings."""
        if self.mode == "no_fe":
            raise ConfigError("no_fe mode has no proprio encoder")
        x = T.as_tensor(proprio)
        if x.shape[-1] != 10:
            raise ShapeError(f"proprio must be (..., 10); got {x.shape}")
        h = T.gelu(T.add(T.matmul(x, self.p["proprio/w1"]), self.p["proprio/b1"]))
        return T.add(T.matmul(h, self.p["proprio/w2"]), self.p["proprio/b2"])

    def assemble_token(self, bundle: TokenBundle) -> Tensor:
        """Concatenate the mode's pooled pieces and project to the latent."""
        parts: list[Tensor] = []
        if self.mode != "no_fl":
            if bundle.text_pooled is None:
                raise ConfigError(f"mode {self.mode} needs a pooled text token")
            parts.append(bundle.text_pooled)
        if bundle.image_pooled is None or len(bundle.image_pooled) != self.cfg.cameras:
            got = 0 if bundle.image_pooled is None else len(bundle.image_pooled)
            raise ConfigError(
                f"mode {self.mode} needs {self.cfg.cameras} pooled image tokens; got {got}"
            )
        parts.extend(bundle.image_pooled)
        if self.mode != "no_fe":
            if bundle.proprio_emb is None:
                raise ConfigError(f"mode {self.mode} needs a proprio embedding")
            parts.append(bundle.proprio_emb)
        elif bundle.proprio_emb is not None:
            raise ConfigError("no_fe mode must not receive a proprio embedding")
        cat = T.concat(parts, axis=-1)
        if cat.shape[-1] != self.concat_dim:
            raise ShapeError(
                f"assembled dim {cat.shape[-1]} != configured {self.concat_dim}"
            )
        return T.add(T.matmul(cat, self.p["assemble/weight"]), self.p["assemble/bias"])

    def pooled_image_token(self, cam: int, fv_hat: Tensor, fl_hat: Tensor | None,
                           text_mask: np.ndarray | None = None) -> Tensor:
        """Per-camera visual token for the current mode.

        ``fv_hat``: (..., n, e) normalized patch embeddings (or the class
        embedding (..., e) in cls_only mode). ``fl_hat``: normalized token
        embeddings, needed by the fusing modes and xattn_pool.
        """
        mode = self.mode
        if mode == "cls_only":
            w = self.p[f"cls_proj/img{cam}/weight"]
            b = self.p[f"cls_proj/img{cam}/bias"]
            lead = fv_hat.shape[:-1]
            flat = T.reshape(fv_hat, (-1, fv_hat.shape[-1]))
            out = T.add(T.matmul(flat, w), b)
            return T.reshape(out, lead + (self.pool_cfg.image_dim,))
        if mode == "dfp":
            return self.image_pools[cam](fv_hat)
        if mode == "xattn_pool":
            p = self.p
            pre = f"xattn/img{cam}"
            if fl_hat is None:
                raise ConfigError("xattn_pool mode needs text token embeddings")
            qp = T.add(T.matmul(fl_hat, p[f"{pre}/q_weight"]), p[f"{pre}/q_bias"])
            kp = T.matmul(fv_hat, p[f"{pre}/k_weight"])
            values = T.add(fv_hat, self.fusion.pe.astype(fv_hat.dtype))
            vp = T.add(T.matmul(values, p[f"{pre}/v_weight"]), p[f"{pre}/v_bias"])
            ctx, _ = T.multi_head_attention(qp, kp, vp, self.pool_cfg.heads)
            fused = T.add(T.matmul(ctx, p[f"{pre}/o_weight"]), p[f"{pre}/o_bias"])
            return self.image_pools[cam](fused, key_mask=text_mask)
        if mode in FUSING_MODES:
            if fl_hat is None:
                raise ConfigError(f"mode {mode} needs text token embeddings for fusion")
            fused, _ = fuse(fl_hat, fv_hat, self.fusion)
            return self.image_pools[cam](fused, key_mask=text_mask)
        raise ConfigError(f"unknown mode {mode!r}")

    # -- transformer ----------------------------------------------------------

    def policy_forward(self, f_seq: Tensor) -> Tensor:
        """Causal transformer over (B, T, latent) -> (B, T, horizon, 10).

        Position t's chunk depends only on tokens 0..t. The gripper channel
        is squashed into [0, 1]; other channels are unbounded.
        """
        if f_seq.ndim == 2:
            f_seq = T.reshape(f_seq, (1,) + f_seq.shape)
        b, t, d = f_seq.shape
        cfg = self.cfg
        if d != cfg.latent:
            raise ShapeError(f"policy tokens must be (..., {cfg.latent}); got {f_seq.shape}")
        if t > cfg.context:
            raise UsageError(f"sequence length {t} exceeds context {cfg.context}")
        x = T.add(f_seq, T.narrow(self.p["policy/pos_embed"], 0, 0, t))
        mask = T.causal_mask(t, dtype=x.dtype)
        for i in range(cfg.layers):
            x, _ = transformer_block_forward(
                self.p, f"policy/block{i}", x, cfg.heads, self._act, mask)
        x = T.layer_norm(x, self.p["policy/ln_f/gain"], self.p["policy/ln_f/bias"])
        h = T.gelu(T.add(T.matmul(x, self.p["head/w1"]), self.p["head/b1"]))
        out = T.add(T.matmul(h, self.p["head/w2"]), self.p["head/b2"])
        out = T.reshape(out, (b, t, cfg.horizon, cfg.action_dim))
        motion = T.narrow(out, -1, 0, cfg.action_dim - 1)
        grip = T.sigmoid(T.narrow(out, -1, cfg.action_dim - 1, 1))
        return T.concat([motion, grip], axis=-1)

    # -- end-to-end windows ----------------------------------------------------

    def window_tokens(
        self,
        fv_hat: list[Tensor],
        fl_hat: Tensor | None,
        fl_raw: Tensor | None,
        text_mask: np.ndarray | None,
        proprio,
    ) -> Tensor:
        """Assemble (B, T, latent) policy tokens from per-frame features.

        fv_hat: per camera, (B, T, n, e) patch embeddings ((B, T, e) class
        embeddings in cls_only mode). fl_hat/fl_raw: (B, m, e) / (B, m, Dt)
        padded token features with boolean ``text_mask`` (B, m). proprio:
        (B, T, 10) array.
        """
        b, t = fv_hat[0].shape[0], fv_hat[0].shape[1]
        text_pooled = None
        if self.text_pool is not None:
            if fl_raw is None:
                raise ConfigError(f"mode {self.mode} needs raw text tokens to pool")
            pooled = self.text_pool(fl_raw, key_mask=text_mask)  # (B, text_dim)
            pooled = T.reshape(pooled, (b, 1, self.pool_cfg.text_dim))
            zeros = np.zeros((b, t, self.pool_cfg.text_dim), dtype=pooled.dtype)
            text_pooled = T.add(pooled, zeros)

        fl_hat_bt = None
        mask_bt = None
        if fl_hat is not None:
            fl_hat_bt = T.reshape(fl_hat, (b, 1) + fl_hat.shape[1:])
            if text_mask is not None:
                mask_bt = np.broadcast_to(
                    text_mask[:, None, :], (b, t, text_mask.shape[-1])
                )
        image_pooled = [
            self.pooled_image_token(j, fv_hat[j], fl_hat_bt, text_mask=mask_bt)
            for j in range(self.cfg.cameras)
        ]
        proprio_emb = None if self.mode == "no_fe" else self.proprio_encode(proprio)
        bundle = TokenBundle(text_pooled, image_pooled, proprio_emb)
        return self.assemble_token(bundle)

    # -- inference -------------------------------------------------------------

    def text_context(self, instruction: str) -> dict:
        """Precompute per-instruction features reused across steps."""
        tf = self.encoder.text_forward(instruction)
        ctx = {"raw": tf.tokens, "ids": tf.ids}
        ctx["hat"] = self.encoder.text_token_features(tf)
        return ctx

    def observe(self, images: list[np.ndarray], proprio: np.ndarray, text_ctx: dict) -> np.ndarray:
        """One frame -> one policy token (latent,), as a plain array."""
        if len(images) != self.cfg.cameras:
            raise ShapeError(f"expected {self.cfg.cameras} camera images; got {len(images)}")
        fv = []
        for j in range(self.cfg.cameras):
            vf = self.encoder.vision_forward(images[j])
            if self.mode == "cls_only":
                feats = self.encoder.image_embedding(vf)  # (1, e)
                fv.append(T.reshape(feats, (1, 1, feats.shape[-1])))
            else:
                feats = self.encoder.patch_features(vf)  # (1, n, e)
                fv.append(T.reshape(feats, (1, 1) + feats.shape[1:]))
        proprio = np.asarray(proprio, dtype=np.float32).reshape(1, 1, 10)
        hat = ctx_get(text_ctx, "hat")  # (m, e)
        raw = ctx_get(text_ctx, "raw")  # (m, Dt)
        tokens = self.window_tokens(
            fv,
            T.reshape(hat, (1,) + hat.shape),
            T.reshape(raw, (1,) + raw.shape),
            None,
            proprio,
        )
        return tokens.data.reshape(self.cfg.latent).astype(np.float32)

    def predict_chunk(self, token_window: np.ndarray) -> np.ndarray:
        """(t, latent) recent policy tokens -> (horizon, 10) chunk for now."""
        token_window = np.asarray(token_window, dtype=np.float32)
        if token_window.ndim != 2:
            raise ShapeError(f"token window must be (t, latent); got {token_window.shape}")
        out = self.policy_forward(Tensor(token_window[None]))
        return out.data[0, -1].astype(np.float64)

    # -- checkpointing -----------------------------------------------------------

    def config_text(self) -> str:
        lines = [f"mode={self.mode}"]
        for f in fields(self.pool_cfg):
            lines.append(f"pool.{f.name}={getattr(self.pool_cfg, f.name)}")
        for f in fields(self.cfg):
            lines.append(f"policy.{f.name}={getattr(self.cfg, f.name)}")
        return "\n".join(lines) + "\n"

    def save_checkpoint(self, path, extra_config: str = "") -> None:
        """Archive every trainable tensor plus the config text block."""
        tensors: dict[str, np.ndarray] = {
            "config": text_tensor(self.config_text() + extra_config)
        }
        for name, t in self.trainable_params().items():
            tensors[name] = t.data
        write_archive(path, tensors)

    @classmethod
    def load_checkpoint(cls, path, encoder: DualEncoder) -> "VLAPolicy":
        tensors = read_archive(path)
        if "config" not in tensors:
            raise FormatError("checkpoint has no config block")
        conf: dict[str, str] = {}
        for line in tensor_text(tensors["config"]).splitlines():
            line = line.strip()
            if line and "=" in line:
                key, _, value = line.partition("=")
                conf[key] = value

        def section(prefix, cls_):
            kwargs = {}
            for f in fields(cls_):
                raw = conf.get(f"{prefix}.{f.name}")
                if raw is not None:
                    kwargs[f.name] = raw if f.name == "activation" else int(raw)
            return cls_(**kwargs)

        policy = cls(
            encoder,
            section("pool", PoolConfig),
            section("policy", PolicyConfig),
            mode=conf.get("mode", "full"),
        )
        params = policy.trainable_params()
        saved = {k: v for k, v in tensors.items() if k != "config"}
        missing = sorted(set(params) - set(saved))
        extra = sorted(set(saved) - set(params))
        if missing or extra:
            raise ValidationError(
                f"checkpoint does not match mode {policy.mode!r}: "
                f"missing {missing[:4]}, extra {extra[:4]}"
            )
        for name, arr in saved.items():
            t = params[name]
            if t.shape != arr.shape:
                raise ValidationError(
                    f"checkpoint tensor {name} has shape {arr.shape}; expected {t.shape}"
                )
            t.data = arr.astype(t.data.dtype)
        return policy

    def astype(self, dtype) -> "VLAPolicy":
        for t in self.p.values():
            t.data = t.data.astype(dtype)
        self.encoder.astype(dtype)
        self.fusion.pe = self.fusion.pe.astype(dtype)
        return self


def ctx_get(ctx: dict, key: str):
    value = ctx.get(key)
    if value is None:
        raise UsageError(f"text context missing {key!r}")
    return value
