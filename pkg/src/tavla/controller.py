"""Closed-loop execution: temporal ensembling with receding-horizon replanning.

The policy predicts overlapping chunks of future actions. At every control
step the buffer averages all live predictions for the current step, so the
executed action blends several forecasts instead of trusting the newest one.
Averaged rotation channels are generally not orthonormal; the pose decoder
re-projects them, so the buffer leaves them as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError, ShapeError, UsageError
from .geometry import Pose, VEC_DIM, decode_action, pose_to_vec

CHUNK_LEN = 12
ACTION_HORIZON = 8


@dataclass
class EpisodeResult:
    success: bool
    score: float
    steps: int


class EnsembleBuffer:
    """Holds recent action chunks keyed by their issue step.

    An entry issued at t0 covers absolute steps t0 .. t0+chunk_len-1 but only
    contributes while its age t - t0 is below the action horizon; pushing a
    new chunk evicts anything that old. Contributor weights are
    exp(-m * age), normalized; m = 0 gives the uniform mean.
    """

    def __init__(self, horizon: int = ACTION_HORIZON, m: float = 0.0,
                 chunk_len: int = CHUNK_LEN):
        if horizon < 1:
            raise ConfigError(f"action horizon must be >= 1; got {horizon}")
        if m < 0:
            raise ConfigError(f"weighting exponent must be >= 0; got {m}")
        if chunk_len < 1:
            raise ConfigError(f"chunk length must be >= 1; got {chunk_len}")
        self.horizon = horizon
        self.m = float(m)
        self.chunk_len = chunk_len
        self._entries: list[tuple[int, np.ndarray]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def push_prediction(self, t0: int, chunk: np.ndarray) -> None:
        """Store a chunk issued at step t0 and evict stale entries."""
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (self.chunk_len, VEC_DIM):
            raise ShapeError(
                f"chunk must be ({self.chunk_len}, {VEC_DIM}); got {chunk.shape}"
            )
        if self._entries and t0 < self._entries[-1][0]:
            raise UsageError(
                f"push at step {t0} is older than the latest push "
                f"({self._entries[-1][0]})"
            )
        self._entries.append((int(t0), chunk.copy()))
        self._entries = [
            (s, c) for s, c in self._entries if t0 - s < self.horizon
        ]

    def pop_action(self, t: int) -> np.ndarray:
        """Ensembled action for absolute step t.

        Raises:
            CoverageError: if no live entry covers step t.
        """
        picks = []
        ages = []
        for t0, chunk in self._entries:
            age = t - t0
            if 0 <= age < self.chunk_len and age < self.horizon:
                picks.append(chunk[age])
                ages.append(age)
        if not picks:
            raise CoverageError(
                f"no live prediction covers step {t}; push one first"
            )
        w = np.exp(-self.m * np.asarray(ages, dtype=np.float64))
        w /= w.sum()
        return w @ np.stack(picks)


def normalize_action_vec(vec: np.ndarray) -> np.ndarray:
    """Re-orthonormalize an ensembled action through the pose codec.

    Component-wise averaging leaves the rotation block off SO(3); decoding
    against the identity and re-encoding applies the Gram-Schmidt projection
    and clips the gripper channel.
    """
    pose, gripper = decode_action(Pose.identity(), np.asarray(vec, dtype=np.float64))
    return pose_to_vec(pose, gripper)


def run_episode(policy, env, max_steps: int = 100, horizon: int = ACTION_HORIZON,
                m: float = 0.0, replan_every: int = 1) -> EpisodeResult:
    """Roll the policy in the environment until success or the step budget.

    Per step: encode the observation into a policy token, replan on schedule
    (every ``replan_every`` steps) over the rolling token window, ensemble,
    re-orthonormalize, and step the environment. The environment must already
    be reset; it exposes ``observation()`` and ``step(vec) -> (obs, done,
    info)`` with ``info["score"]``.
    """
    if max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1; got {max_steps}")
    if replan_every < 1:
        raise ConfigError(f"replan_every must be >= 1; got {replan_every}")
    obs = env.observation()
    ctx = policy.text_context(obs.instruction)
    context = int(policy.cfg.context)
    buffer = EnsembleBuffer(horizon=horizon, m=m,
                            chunk_len=int(policy.cfg.horizon))
    tokens: list[np.ndarray] = []
    score = 0.0
    steps = 0
    for t in range(max_steps):
        tokens.append(policy.observe(obs.images, obs.proprio, ctx))
        if len(tokens) > context:
            tokens = tokens[-context:]
        if t % replan_every == 0:
            buffer.push_prediction(t, policy.predict_chunk(np.stack(tokens)))
        action = normalize_action_vec(buffer.pop_action(t))
        obs, done, info = env.step(action)
        score = float(info.get("score", 0.0))
        steps = t + 1
        if done:
            break
    return EpisodeResult(success=score >= 1.0, score=score, steps=steps)
