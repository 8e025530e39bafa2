"""Behavior-cloning optimization plus contrastive encoder pre-training.

The optimizer is AdamW with decoupled weight decay, global-norm gradient
clipping, linear warmup, and cosine decay to zero. The imitation loss is a
masked mean over valid (step, chunk) entries; padded context slots and
padded chunk steps carry zero weight. Image augmentation follows the usual
crop/brightness/contrast/saturation/hue pipeline and is exactly the identity
when every parameter sits at its neutral value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset import Episode, TrainingWindow, sample_batch
from .encoder import DualEncoder
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .fusion import clamp_tau
from .tensor import Graph, Tensor, backward

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOGIT_SCALE_MAX = math.log(100.0)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup: int = 2000
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch: int = 64
    total_steps: int = 40_000
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.warmup >= self.total_steps:
            raise ConfigError(
                f"warmup {self.warmup} must be below total steps {self.total_steps}")
        for name in ("lr", "grad_clip", "batch", "total_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup < 0 or self.weight_decay < 0:
            raise ConfigError("warmup and weight decay must be non-negative")
        if self.loss not in ("mse", "l1"):
            raise ConfigError(f"loss must be mse or l1; got {self.loss!r}")


@dataclass
class AugmentConfig:
    crop_ratio: tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)
    hue: float = 0.1


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise UsageError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = cfg.total_steps - cfg.warmup
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup) / span))


# -- optimizer -------------------------------------------------------------------


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            raise NumericError(f"parameter {name!r} received no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"parameter {name!r} has a non-finite gradient")
        total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


class AdamW:
    """Decoupled weight decay, bias-corrected moments, global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        if not params:
            raise UsageError("optimizer needs at least one parameter")
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float) -> float:
        """Apply one update from the stored gradients; returns the pre-clip
        global gradient norm."""
        norm = global_grad_norm(self.params)
        scale = 1.0
        if math.isfinite(self.cfg.grad_clip) and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
        self.t += 1
        b1, b2 = ADAM_BETAS
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad * np.asarray(scale, dtype=p.data.dtype)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            # np.asarray keeps 0-d parameters as arrays, not numpy scalars
            p.data = np.asarray(
                p.data - lr * (update + self.cfg.weight_decay * p.data),
                dtype=p.data.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- imitation loss --------------------------------------------------------------


def bc_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray,
            kind: str = "mse") -> Tensor:
    """Masked mean error over (..., horizon, channels) action chunks.

    ``weights`` has pred's shape minus the channel axis; zero entries drop
    out of both the numerator and the denominator.
    """
    target = np.asarray(target, dtype=pred.dtype)
    weights = np.asarray(weights, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"target {target.shape} != pred {pred.shape}")
    if weights.shape != pred.shape[:-1]:
        raise ShapeError(
            f"weights {weights.shape} must match pred {pred.shape} minus channels")
    if kind not in ("mse", "l1"):
        raise ConfigError(f"loss must be mse or l1; got {kind!r}")
    denom = float(weights.sum()) * pred.shape[-1]
    if denom == 0.0:
        raise UsageError("every chunk entry is masked; nothing to train on")
    err = T.sub(pred, target)
    err = T.square(err) if kind == "mse" else T.abs_(err)
    weighted = T.mul(err, weights[..., None].astype(pred.dtype))
    return T.mul(T.sum_(weighted), 1.0 / denom)


# -- augmentation ----------------------------------------------------------------


def _bilinear_resample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at float coords; edges clamp."""
    h, w = img.shape[:2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = img[y0c, x0c] * (1 - fx) + img[y0c, x1c] * fx
    bot = img[y1c, x0c] * (1 - fx) + img[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc,
                 np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0.0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
            ) -> np.ndarray:
    """Crop/brightness/contrast/saturation/hue jitter; input and output in [0, 1].

    Every stage is skipped when its drawn parameter equals the identity, so a
    degenerate config (ratio (1, 1), zero ranges) reproduces the input bit for
    bit.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"augment expects (H, W, 3); got {img.shape}")
    size = img.shape[0]

    ratio = float(rng.uniform(*cfg.crop_ratio))
    if ratio != 1.0:
        side = math.sqrt(ratio) * size
        if side <= size:
            ox = float(rng.uniform(0.0, size - side))
            oy = float(rng.uniform(0.0, size - side))
        else:
            ox = oy = (size - side) / 2.0  # zoom out, centered, edge-clamped
        centers = (np.arange(size) + 0.5) * (side / size) - 0.5
        xs = ox + centers
        xx, yy = np.meshgrid(xs, oy + centers)
        img = _bilinear_resample(img, xx, yy)

    shift = float(rng.uniform(-cfg.brightness, cfg.brightness))
    if shift != 0.0:
        img = img + shift

    contrast = float(rng.uniform(*cfg.contrast))
    if contrast != 1.0:
        mean = img.mean()
        img = (img - mean) * contrast + mean

    saturation = float(rng.uniform(*cfg.saturation))
    if saturation != 1.0:
        gray = (0.299 * img[..., 0] + 0.587 * img[..., 1]
                + 0.114 * img[..., 2])[..., None]
        img = gray + (img - gray) * saturation

    hue = float(rng.uniform(-cfg.hue, cfg.hue))
    if hue != 0.0:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        img = _hsv_to_rgb(hsv)

    return np.clip(img, 0.0, 1.0)


IDENTITY_AUGMENT = AugmentConfig(crop_ratio=(1.0, 1.0), brightness=0.0,
                                 contrast=(1.0, 1.0), saturation=(1.0, 1.0),
                                 hue=0.0)


# -- contrastive pre-training ------------------------------------------------------

# Finite stand-in for -inf: a 0 * -inf product inside the diagonal extraction
# would poison the loss with NaN.
NEG_MASK = -1e9


def _diag_mean(log_probs: Tensor, n: int) -> Tensor:
    eye = np.eye(n, dtype=log_probs.dtype)
    return T.mul(T.sum_(T.mul(log_probs, eye)), 1.0 / n)


def clip_loss(image_emb: Tensor, text_emb: Tensor, logit_scale: Tensor,
              captions: list[str]) -> Tensor:
    """Symmetric contrastive loss over matched (image, caption) rows.

    Pairs whose captions collide are removed from each other's negatives, so
    duplicate captions in a batch do not fight the true match.
    """
    n = image_emb.shape[0]
    if text_emb.shape != image_emb.shape or len(captions) != n:
        raise ShapeError("image embeddings, text embeddings, and captions must align")
    logits = T.mul(T.matmul(image_emb, T.swap_last(text_emb)), T.exp(logit_scale))
    same = np.array([[ci == cj for cj in captions] for ci in captions])
    mask = np.where(same & ~np.eye(n, dtype=bool), NEG_MASK, 0.0)
    logits = T.add(logits, mask.astype(logits.dtype))
    image_to_text = _diag_mean(T.log_softmax(logits, axis=1), n)
    text_to_image = _diag_mean(T.log_softmax(logits, axis=0), n)
    return T.mul(T.add(image_to_text, text_to_image), -0.5)


def _text_embedding_matrix(encoder: DualEncoder, captions: list[str]) -> Tensor:
    """(len(captions), embed) matrix; duplicate captions encoded once."""
    unique = list(dict.fromkeys(captions))
    rows = []
    for cap in unique:
        emb = encoder.text_embedding(encoder.text_forward(cap))
        rows.append(T.reshape(emb, (1, emb.shape[-1])))
    table = T.concat(rows, axis=0)
    ids = np.array([unique.index(c) for c in captions], dtype=np.int64)
    return T.embedding_lookup(table, ids)


def pretrain_clip(encoder: DualEncoder, pairs: list[tuple[np.ndarray, str]],
                  steps: int, batch: int = 16, lr: float = 1e-3, seed: int = 0,
                  log_fn: Callable[[str], None] | None = None,
                  ) -> tuple[dict[str, np.ndarray], list[float]]:
    """Contrastively align the dual encoder on (image, caption) pairs.

    Trains both towers plus the logit scale, freezes everything afterwards,
    and returns the archive-ready tensor dict together with the per-step
    loss history.
    """
    if steps < 1:
        raise UsageError(f"pretraining needs at least one step; got {steps}")
    if not pairs:
        raise UsageError("pretraining needs a nonempty pair corpus")
    emit = log_fn or log.info
    rng = np.random.default_rng(seed)
    batch = min(batch, len(pairs))
    images = np.stack([img for img, _ in pairs])
    captions = [cap for _, cap in pairs]

    encoder.set_trainable(vision=True, text=True)
    params = encoder.named_parameters(trainable_only=True)
    sched = TrainConfig(lr=lr, warmup=min(max(1, steps // 20), steps - 1),
                        weight_decay=0.0, grad_clip=1.0, batch=batch,
                        total_steps=steps, seed=seed)
    opt = AdamW(params, sched)
    scale = encoder.p["logit_scale"]
    history: list[float] = []
    for step in range(steps):
        idx = rng.choice(len(pairs), size=batch, replace=False)
        caps = [captions[i] for i in idx]
        with Graph() as graph:
            img_emb = encoder.image_embedding(encoder.vision_forward(images[idx]))
            txt_emb = _text_embedding_matrix(encoder, caps)
            loss = clip_loss(img_emb, txt_emb, scale, caps)
            opt.zero_grad()
            backward(loss)
        graph.clear()
        opt.step(lr_schedule(step, sched))
        scale.data = np.asarray(np.minimum(scale.data, LOGIT_SCALE_MAX),
                                dtype=scale.data.dtype)
        history.append(loss.item())
        if step % 50 == 0 or step == steps - 1:
            emit(f"pretrain step={step} loss={history[-1]:.4f} "
                 f"scale={math.exp(float(scale.data)):.2f}")

    encoder.set_trainable()
    scale.requires_grad = False
    return encoder.to_tensors(), history


def retrieval_eval(encoder: DualEncoder, pairs: list[tuple[np.ndarray, str]]) -> float:
    """Top-1 caption retrieval accuracy over the unique captions in pairs."""
    if not pairs:
        raise UsageError("retrieval needs a nonempty pair corpus")
    unique = list(dict.fromkeys(cap for _, cap in pairs))
    text = np.stack([
        encoder.text_embedding(encoder.text_forward(c)).data for c in unique])
    images = np.stack([img for img, _ in pairs])
    img = encoder.image_embedding(encoder.vision_forward(images)).data
    ranks = (img @ text.T).argmax(axis=1)
    hits = sum(unique[int(r)] == cap for r, (_, cap) in zip(ranks, pairs))
    return hits / len(pairs)


# -- frozen-feature cache ----------------------------------------------------------


class FeatureCache:
    """Per-frame vision features and per-instruction text features.

    Valid only while the towers stay frozen and images are not augmented;
    entries are plain arrays, so anything read from here enters the graph as
    a constant.
    """

    def __init__(self, policy):
        self.policy = policy
        self.vision: dict[tuple[int, int, int], np.ndarray] = {}
        self.text: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def vision_features(self, keys: list[tuple[int, int, int]],
                        fetch_image) -> np.ndarray:
        missing = [k for k in dict.fromkeys(keys) if k not in self.vision]
        if missing:
            stack = np.stack([fetch_image(k) for k in missing])
            feats = _vision_feature_tensor(self.policy, stack).data
            for k, row in zip(missing, feats):
                self.vision[k] = row
        return np.stack([self.vision[k] for k in keys])

    def text_features(self, instruction: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self.text.get(instruction)
        if hit is None:
            tf = self.policy.encoder.text_forward(instruction)
            hat = self.policy.encoder.text_token_features(tf)
            hit = (tf.tokens.data.copy(), hat.data.copy())
            self.text[instruction] = hit
        return hit


def _vision_feature_tensor(policy, images: np.ndarray) -> Tensor:
    """(N, H, W, 3) images -> (N, n, e) patch features ((N, e) in cls_only)."""
    vf = policy.encoder.vision_forward(images)
    if policy.mode == "cls_only":
        return policy.encoder.image_embedding(vf)
    return policy.encoder.patch_features(vf)


# -- behavior-cloning loop ---------------------------------------------------------


def _pad_rows(arr: np.ndarray, rows: int) -> np.ndarray:
    if arr.shape[0] == rows:
        return arr
    pad = np.zeros((rows - arr.shape[0],) + arr.shape[1:], dtype=arr.dtype)
    return np.concatenate([arr, pad], axis=0)


def _pad_rows_t(t: Tensor, rows: int) -> Tensor:
    if t.shape[0] == rows:
        return t
    zeros = np.zeros((rows - t.shape[0],) + t.shape[1:], dtype=t.dtype)
    return T.concat([t, T.as_tensor(zeros)], axis=0)


def _batch_text(policy, windows: list[TrainingWindow], cache: FeatureCache | None
                ) -> tuple[Tensor | None, Tensor | None, np.ndarray | None]:
    """Padded (B, m, e) / (B, m, Dt) text features plus the validity mask."""
    if policy.mode == "no_fl":
        return None, None, None
    instructions = [w.instruction for w in windows]
    unique = list(dict.fromkeys(instructions))
    if cache is not None:
        feats = {i: cache.text_features(i) for i in unique}
        lengths = {i: feats[i][0].shape[0] for i in unique}
        m = max(lengths.values())
        raw = np.stack([_pad_rows(feats[i][0], m) for i in instructions])
        hat = np.stack([_pad_rows(feats[i][1], m) for i in instructions])
        raw_t, hat_t = T.as_tensor(raw), T.as_tensor(hat)
    else:
        tfs = {i: policy.encoder.text_forward(i) for i in unique}
        hats = {i: policy.encoder.text_token_features(tfs[i]) for i in unique}
        lengths = {i: tfs[i].tokens.shape[0] for i in unique}
        m = max(lengths.values())
        raw_t = T.concat([
            T.reshape(_pad_rows_t(tfs[i].tokens, m), (1, m, -1))
            for i in instructions], axis=0)
        hat_t = T.concat([
            T.reshape(_pad_rows_t(hats[i], m), (1, m, -1))
            for i in instructions], axis=0)
    mask = np.stack([
        np.arange(m) < lengths[i] for i in instructions])
    return hat_t, raw_t, mask


def _batch_vision(policy, episodes: list[Episode], windows: list[TrainingWindow],
                  cache: FeatureCache | None, augment_cfg: AugmentConfig | None,
                  rng: np.random.Generator) -> list[Tensor]:
    """Per-camera (B, T, n, e) feature tensors ((B, T, e) in cls_only mode)."""
    b, t = len(windows), windows[0].steps.shape[0]
    cams = policy.cfg.cameras

    def frame_image(ep_index: int, step: int, cam: int) -> np.ndarray:
        img = episodes[ep_index].frames[step].images[cam]
        if augment_cfg is None:
            return img
        return augment(img.astype(np.float64) / 255.0, augment_cfg, rng
                       ).astype(np.float32)

    out = []
    for cam in range(cams):
        keys = [(w.episode, int(s), cam) for w in windows for s in w.steps]
        if cache is not None and augment_cfg is None:
            feats = T.as_tensor(cache.vision_features(
                keys, lambda k: episodes[k[0]].frames[k[1]].images[k[2]]))
        else:
            stack = np.stack([frame_image(*k) for k in keys])
            feats = _vision_feature_tensor(policy, stack)
        out.append(T.reshape(feats, (b, t) + feats.shape[1:]))
    return out


def prepare_batch(policy, episodes: list[Episode], windows: list[TrainingWindow],
                  cache: FeatureCache | None = None,
                  augment_cfg: AugmentConfig | None = None,
                  rng: np.random.Generator | None = None):
    """Everything window_tokens and bc_loss need, batched over windows.

    Returns (fv, fl_hat, fl_raw, text_mask, proprio, targets, weights). Call
    inside a graph context when the encoder towers are trainable.
    """
    rng = rng or np.random.default_rng()
    fv = _batch_vision(policy, episodes, windows, cache, augment_cfg, rng)
    fl_hat, fl_raw, text_mask = _batch_text(policy, windows, cache)
    proprio = np.stack([
        np.stack([episodes[w.episode].frames[int(s)].proprio for s in w.steps])
        for w in windows])
    targets = np.stack([w.targets for w in windows]).astype(np.float32)
    weights = np.stack([w.loss_weights() for w in windows])
    return fv, fl_hat, fl_raw, text_mask, proprio, targets, weights


def train(policy, episodes: list[Episode], cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None, out=None,
          checkpoint_every: int = 1000,
          log_fn: Callable[[str], None] | None = None) -> list[float]:
    """Behavior-clone the policy on recorded episodes; returns the loss curve.

    Frozen-tower features are cached across steps whenever augmentation is
    off, which is the main thing that makes desk-scale training fit its time
    budget. Checkpoints go to ``out`` every ``checkpoint_every`` steps and at
    the end.
    """
    if not episodes:
        raise UsageError("training needs a nonempty episode corpus")
    emit = log_fn or log.info
    rng = np.random.default_rng(cfg.seed)
    params = policy.trainable_params()
    opt = AdamW(params, cfg)
    towers_trainable = policy.mode in ("scratch_vision", "finetune_clip")
    cache = None if towers_trainable else FeatureCache(policy)
    history: list[float] = []

    for step in range(cfg.total_steps):
        windows = sample_batch(episodes, cfg.batch, rng,
                               context=policy.cfg.context,
                               horizon=policy.cfg.horizon)
        if not towers_trainable:
            # constants: safe to build outside the tape
            batch = prepare_batch(policy, episodes, windows, cache,
                                  augment_cfg, rng)
        with Graph() as graph:
            if towers_trainable:
                batch = prepare_batch(policy, episodes, windows, None,
                                      augment_cfg, rng)
            fv, fl_hat, fl_raw, text_mask, proprio, targets, weights = batch
            tokens = policy.window_tokens(fv, fl_hat, fl_raw, text_mask, proprio)
            pred = policy.policy_forward(tokens)
            loss = bc_loss(pred, targets, weights, cfg.loss)
            opt.zero_grad()
            backward(loss)
        graph.clear()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"loss diverged to {value} at step {step}")
        lr = lr_schedule(step, cfg)
        opt.step(lr)
        clamp_tau(policy.fusion)
        history.append(value)
        emit(f"step={step} loss={value:.6f} lr={lr:.6g} "
             f"tau={float(policy.fusion.tau.data):.4f}")
        if out is not None and checkpoint_every > 0 and (step + 1) % checkpoint_every == 0:
            policy.save_checkpoint(out)
    if out is not None:
        policy.save_checkpoint(out)
    return history
