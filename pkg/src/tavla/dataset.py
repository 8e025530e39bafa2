"""Episode storage, delta-action targets, and context-window sampling.

Episodes reuse the weight-archive container: one binary format, one codec,
one fuzz surface. Targets at step t are poses t+1..t+H re-expressed in the
frame of pose t, with absolute gripper values; steps past the end repeat the
final real target under a zero mask. Windows shorter than the context are
left-padded by repeating the first frame, matching how the rolling context
starts at inference time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .archive import read_archive, tensor_text, text_tensor, write_archive
from .errors import FormatError, ShapeError, UsageError, ValidationError
from .geometry import Pose, VEC_DIM, encode_action_chunk

EPISODE_EXT = ".otep"
MANIFEST_NAME = "manifest.txt"
CONTEXT = 12
HORIZON = 12


@dataclass
class Frame:
    images: list[np.ndarray]  # uint8 (H, W, 3) per camera
    proprio: np.ndarray  # (10,) float32
    pose: Pose  # absolute end-effector pose, float64
    gripper: float  # absolute command in [0, 1]


@dataclass
class Episode:
    instruction: str
    frames: list[Frame]

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if len(self.frames) < 2:
            raise ValidationError(
                f"episodes need at least 2 frames; got {len(self.frames)}")
        cams = len(self.frames[0].images)
        shape = self.frames[0].images[0].shape
        for i, fr in enumerate(self.frames):
            if len(fr.images) != cams:
                raise ValidationError(
                    f"frame {i} has {len(fr.images)} cameras; frame 0 has {cams}")
            for img in fr.images:
                if img.shape != shape or img.dtype != np.uint8:
                    raise ValidationError(
                        f"frame {i}: image {img.shape} {img.dtype} does not "
                        f"match frame 0 {shape} uint8")
            if fr.proprio.shape != (VEC_DIM,):
                raise ValidationError(
                    f"frame {i}: proprio must be ({VEC_DIM},); got {fr.proprio.shape}")
            if not 0.0 <= fr.gripper <= 1.0:
                raise ValidationError(
                    f"frame {i}: gripper {fr.gripper} outside [0, 1]")


# -- serialization -------------------------------------------------------------


def write_episode(ep: Episode, path: str | os.PathLike) -> None:
    ep.validate()
    tensors: dict[str, np.ndarray] = {
        "instruction": text_tensor(ep.instruction),
        "meta/length": np.array([len(ep.frames)], dtype=np.int64),
        "meta/cameras": np.array([len(ep.frames[0].images)], dtype=np.int64),
    }
    for i, fr in enumerate(ep.frames):
        for j, img in enumerate(fr.images):
            tensors[f"frame/{i}/cam{j}"] = img
        tensors[f"frame/{i}/proprio"] = fr.proprio.astype(np.float32)
        tensors[f"frame/{i}/pose"] = fr.pose.matrix().astype(np.float64)
        tensors[f"frame/{i}/gripper"] = np.array([fr.gripper], dtype=np.float64)
    write_archive(path, tensors)


def read_episode(path: str | os.PathLike) -> Episode:
    tensors = read_archive(path)

    def need(name: str) -> np.ndarray:
        if name not in tensors:
            raise FormatError(f"{path}: episode archive is missing {name!r}")
        return tensors[name]

    instruction = tensor_text(need("instruction"))
    length = int(need("meta/length")[0])
    cameras = int(need("meta/cameras")[0])
    frames = []
    for i in range(length):
        images = [need(f"frame/{i}/cam{j}") for j in range(cameras)]
        frames.append(Frame(
            images=images,
            proprio=need(f"frame/{i}/proprio"),
            pose=Pose.from_matrix(need(f"frame/{i}/pose")),
            gripper=float(need(f"frame/{i}/gripper")[0]),
        ))
    ep = Episode(instruction=instruction, frames=frames)
    try:
        ep.validate()
    except ValidationError as e:
        raise FormatError(f"{path}: {e}") from e
    return ep


def save_corpus(dirpath: str | os.PathLike, episodes: list[Episode],
                prefix: str = "episode") -> list[str]:
    """Write episodes plus a manifest of relative paths; returns the paths."""
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        name = f"{prefix}_{i:05d}{EPISODE_EXT}"
        write_episode(ep, os.path.join(dirpath, name))
        names.append(name)
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        fh.write("".join(n + "\n" for n in names))
    return names


def load_corpus(dirpath: str | os.PathLike) -> list[Episode]:
    manifest = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise FormatError(f"no {MANIFEST_NAME} in {dirpath}")
    episodes = []
    with open(manifest) as fh:
        for line in fh:
            name = line.strip()
            if not name:
                continue
            full = os.path.join(dirpath, name)
            if not os.path.exists(full):
                raise FormatError(f"manifest names missing file {name!r}")
            episodes.append(read_episode(full))
    if not episodes:
        raise FormatError(f"manifest in {dirpath} lists no episodes")
    return episodes


# -- targets and windows ---------------------------------------------------------


def make_targets(ep: Episode, t: int, horizon: int = HORIZON
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Delta-pose targets for step t: (horizon, 10) plus a validity mask.

    target[i-1] re-expresses pose(t+i) in the frame of pose(t); indices past
    the episode end repeat the final real target with mask 0.
    """
    if not 0 <= t < len(ep):
        raise UsageError(f"step {t} outside episode of length {len(ep)}")
    last = len(ep) - 1
    idx = [min(t + i, last) for i in range(1, horizon + 1)]
    ref = ep.frames[t].pose
    targets = encode_action_chunk(
        ref,
        [ep.frames[j].pose for j in idx],
        [ep.frames[j].gripper for j in idx],
    )
    mask = np.array([1.0 if t + i <= last else 0.0
                     for i in range(1, horizon + 1)], dtype=np.float64)
    return targets, mask


@dataclass
class TrainingWindow:
    episode: int  # index into the corpus
    steps: np.ndarray  # (T,) int64 frame index per slot (clamped at 0)
    pad: np.ndarray  # (T,) bool, True where the slot is left-padding
    targets: np.ndarray  # (T, horizon, 10) float64
    target_mask: np.ndarray  # (T, horizon) float64, 1 where the target is real
    instruction: str

    def loss_weights(self) -> np.ndarray:
        """(T, horizon) weights: padded slots and padded chunk steps get 0."""
        return self.target_mask * (~self.pad).astype(np.float64)[:, None]


def window_for(episodes: list[Episode], ep_index: int, t: int,
               context: int = CONTEXT, horizon: int = HORIZON) -> TrainingWindow:
    ep = episodes[ep_index]
    if not 0 <= t < len(ep):
        raise UsageError(f"end step {t} outside episode of length {len(ep)}")
    raw = np.arange(t - context + 1, t + 1)
    steps = np.maximum(raw, 0)
    pad = raw < 0
    targets = np.empty((context, horizon, VEC_DIM), dtype=np.float64)
    mask = np.empty((context, horizon), dtype=np.float64)
    for k, s in enumerate(steps):
        targets[k], mask[k] = make_targets(ep, int(s), horizon)
    return TrainingWindow(episode=ep_index, steps=steps.astype(np.int64),
                          pad=pad, targets=targets, target_mask=mask,
                          instruction=ep.instruction)


def sample_pairs(episodes: list[Episode], n: int, rng: np.random.Generator
                 ) -> list[tuple[int, int]]:
    """n (episode index, end step) pairs, uniform over all pairs."""
    if not episodes:
        raise UsageError("cannot sample from an empty corpus")
    bounds = np.cumsum([len(ep) for ep in episodes])
    total = int(bounds[-1])
    pairs = []
    for _ in range(n):
        r = int(rng.integers(total))
        ep_index = int(np.searchsorted(bounds, r, side="right"))
        pairs.append((ep_index, r - (int(bounds[ep_index - 1]) if ep_index else 0)))
    return pairs


def sample_batch(episodes: list[Episode], batch: int, rng: np.random.Generator,
                 context: int = CONTEXT, horizon: int = HORIZON
                 ) -> list[TrainingWindow]:
    """Uniform over (episode, end-step) pairs; deterministic under the rng."""
    return [window_for(episodes, ep_index, t, context, horizon)
            for ep_index, t in sample_pairs(episodes, batch, rng)]


# -- rollout recording -----------------------------------------------------------


def record_rollout(env, act_fn, max_steps: int = 100) -> tuple[Episode, dict]:
    """Drive ``env`` with ``act_fn(env)`` and record every frame.

    The environment must be reset already and expose ``observation()``,
    ``gripper_pose()``, and ``step``; the instruction is read from the first
    observation. Returns the episode (initial frame plus one per step) and
    the final step info.
    """
    def grab() -> Frame:
        obs = env.observation()
        return Frame(images=[img.copy() for img in obs.images],
                     proprio=np.asarray(obs.proprio, dtype=np.float32).copy(),
                     pose=env.gripper_pose(),
                     gripper=float(obs.proprio[9]))

    obs = env.observation()
    instruction = obs.instruction
    frames = [grab()]
    info: dict = {}
    for _ in range(max_steps):
        _, done, info = env.step(act_fn(env))
        frames.append(grab())
        if done:
            break
    return Episode(instruction=instruction, frames=frames), info
