"""Rigid-body poses and the 10-d pose/action vector codec.

A pose/action vector packs ``[translation (3), rotation-6d (6), gripper (1)]``.
The 6d rotation code is the first two rows of the rotation matrix, flattened
row-major; decoding runs Gram-Schmidt with the first row as the primary
direction and completes the third row by cross product. Gripper is an
absolute openness in [0, 1] and never goes through the relative transform.

Action chunks are relative: each chunk entry encodes the target pose in the
frame of the reference (current end-effector) pose, ``inv(T_ref) @ T_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, ShapeError

VEC_DIM = 10
GS_TOL = 1e-8


@dataclass
class Pose:
    """Rotation (3, 3) and translation (3,) of a rigid body."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.rot.shape != (3, 3):
            raise ShapeError(f"rotation must be (3, 3); got {self.rot.shape}")
        if self.trans.shape != (3,):
            raise ShapeError(f"translation must be (3,); got {self.trans.shape}")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError(f"homogeneous matrix must be (4, 4); got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot
        m[:3, 3] = self.trans
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: returns self @ other."""
        return Pose(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    def inverse(self) -> "Pose":
        rt = self.rot.T
        return Pose(rt, -rt @ self.trans)

    def copy(self) -> "Pose":
        return Pose(self.rot.copy(), self.trans.copy())


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via a normalized quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_6d(rot: np.ndarray) -> np.ndarray:
    """First two rows of the rotation matrix, flattened row-major."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ShapeError(f"rotation must be (3, 3); got {rot.shape}")
    return rot[:2].reshape(6).copy()


def six_d_to_rot(code: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the 6d code back into a rotation matrix.

    Row 1 is the normalized first triple; row 2 is the second triple with its
    row-1 component removed, normalized; row 3 completes the right-handed
    frame by cross product.

    Raises:
        DegeneracyError: if either direction collapses below ``GS_TOL``.
    """
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (6,):
        raise ShapeError(f"rotation code must be (6,); got {code.shape}")
    a1, a2 = code[:3], code[3:]
    n1 = np.linalg.norm(a1)
    if n1 < GS_TOL:
        raise DegeneracyError(f"first rotation row has norm {n1:.3e} < {GS_TOL:.0e}")
    b1 = a1 / n1
    r2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(r2)
    if n2 < GS_TOL:
        raise DegeneracyError(
            f"second rotation row is parallel to the first (residual {n2:.3e})"
        )
    b2 = r2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3])


def pose_to_vec(pose: Pose, gripper: float) -> np.ndarray:
    """Pack a pose and gripper openness into the 10-d vector."""
    g = float(np.clip(gripper, 0.0, 1.0))
    return np.concatenate([pose.trans, rot_to_6d(pose.rot), [g]])


def vec_to_pose(vec: np.ndarray) -> tuple[Pose, float]:
    """Unpack the 10-d vector into (pose, gripper)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (VEC_DIM,):
        raise ShapeError(f"pose vector must be ({VEC_DIM},); got {vec.shape}")
    pose = Pose(six_d_to_rot(vec[3:9]), vec[:3])
    return pose, float(np.clip(vec[9], 0.0, 1.0))


def encode_action_chunk(
    ref: Pose,
    poses: list[Pose],
    grippers: list[float],
) -> np.ndarray:
    """Encode target poses relative to ``ref`` as a (k, 10) chunk.

    Translation/rotation entries are ``inv(ref) @ pose_i``; gripper entries
    stay absolute.
    """
    if len(poses) != len(grippers):
        raise ShapeError(
            f"{len(poses)} poses but {len(grippers)} gripper targets"
        )
    inv = ref.inverse()
    rows = [pose_to_vec(inv.compose(p), g) for p, g in zip(poses, grippers)]
    return np.stack(rows) if rows else np.zeros((0, VEC_DIM))


def decode_action(ref: Pose, vec: np.ndarray) -> tuple[Pose, float]:
    """Decode one 10-d action against the reference pose.

    Returns the absolute target pose ``ref @ rel`` and the absolute gripper
    command (clipped to [0, 1]).
    """
    rel, gripper = vec_to_pose(vec)
    return ref.compose(rel), gripper
