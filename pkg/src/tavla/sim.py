"""Deterministic toy tabletop: pick-and-place and poke on a unit table.

The world is planar (rotation about z only) but actions and proprioception
use the full 10-d parametrization, so every channel of the action path is
exercised; z and out-of-plane rotation are simply driven toward zero.
Rendering is a flat-shaded top-down rasterization with pixel-center coverage
tests, so each shape's pixel set has a closed-form description.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ExpertError, GenerationError, ShapeError, UsageError
from .geometry import Pose, decode_action, pose_to_vec, rot_z

SHAPES = ("cube", "ball", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
COLOR_RGB = {
    "red": (220, 40, 40),
    "blue": (40, 80, 220),
    "green": (40, 180, 60),
    "yellow": (230, 210, 40),
}
BACKGROUND_RGB = (70, 70, 70)
GRIPPER_OPEN_RGB = (250, 250, 250)
GRIPPER_CLOSED_RGB = (150, 150, 150)
BOWL_RING = 0.75  # inner radius as a fraction of the outer

IMAGE_SIZE = 48
OBJECT_RADIUS = 0.07
# per-shape scale relative to OBJECT_RADIUS; at 48 px the four silhouettes
# must stay separable, so the round/pointy shapes outgrow the cube
BALL_FACTOR = 1.25
TRI_FACTOR = 1.8
BOWL_RADIUS = 0.13
GRASP_RADIUS = 1.5 * OBJECT_RADIUS
TOUCH_RADIUS = 1.2 * OBJECT_RADIUS
PLACE_RADIUS = 0.8 * BOWL_RADIUS
MAX_STEP = 0.05
MAX_YAW_STEP = 0.3
STEP_LIMIT = 100
TABLE_MARGIN = 0.12
GRIPPER_HOME = (0.5, 0.12)

SPLIT_SEED = 7  # fixes which (shape, color) pairs are held out


@dataclass
class SimObject:
    shape: str
    color: str
    position: np.ndarray  # (2,) float64, table coordinates in [0, 1]


@dataclass
class Bowl:
    color: str
    position: np.ndarray


@dataclass
class Scene:
    objects: list[SimObject]
    bowls: list[Bowl]
    gripper_xy: np.ndarray
    gripper_yaw: float = 0.0
    gripper_open: bool = True
    held: int | None = None


@dataclass(frozen=True)
class TaskSpec:
    primitive: str  # "put" | "poke"
    shape: str
    color: str
    bowl_color: str | None
    split: str  # "seen" | "unseen"

    def __post_init__(self):
        if self.primitive not in ("put", "poke"):
            raise UsageError(f"unknown primitive {self.primitive!r}")
        if self.shape not in SHAPES or self.color not in COLORS:
            raise UsageError(f"unknown combination ({self.shape}, {self.color})")
        if self.primitive == "put" and self.bowl_color not in COLORS:
            raise UsageError("put tasks need a bowl color")

    @property
    def instruction(self) -> str:
        if self.primitive == "put":
            return f"put the {self.color} {self.shape} in the {self.bowl_color} bowl"
        return f"poke the {self.color} {self.shape}"

    @property
    def task_id(self) -> str:
        if self.primitive == "put":
            return f"put-{self.color}-{self.shape}-in-{self.bowl_color}-bowl"
        return f"poke-{self.color}-{self.shape}"


@dataclass
class Observation:
    images: list[np.ndarray]
    proprio: np.ndarray
    instruction: str


# -- task splits -------------------------------------------------------------


def all_combos() -> list[tuple[str, str]]:
    return [(s, c) for s in SHAPES for c in COLORS]


def unseen_combos(seed: int = SPLIT_SEED) -> list[tuple[str, str]]:
    """Four held-out (shape, color) pairs: one per shape, one per color."""
    perm = np.random.default_rng(seed).permutation(len(COLORS))
    return [(SHAPES[i], COLORS[perm[i]]) for i in range(len(SHAPES))]


def seen_combos(seed: int = SPLIT_SEED) -> list[tuple[str, str]]:
    held = set(unseen_combos(seed))
    return [c for c in all_combos() if c not in held]


def sample_task(rng: np.random.Generator, split: str = "seen",
                primitive: str | None = None) -> TaskSpec:
    combos = seen_combos() if split == "seen" else unseen_combos()
    if split not in ("seen", "unseen"):
        raise UsageError(f"unknown split {split!r}")
    shape, color = combos[int(rng.integers(len(combos)))]
    if primitive is None:
        primitive = ("put", "poke")[int(rng.integers(2))]
    bowl_color = COLORS[int(rng.integers(len(COLORS)))] if primitive == "put" else None
    return TaskSpec(primitive, shape, color, bowl_color, split)


# -- rendering ---------------------------------------------------------------


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel (row, col) center sits at ((col+.5)/size, (row+.5)/size)
    centers = (np.arange(size) + 0.5) / size
    return np.meshgrid(centers, centers)  # xx varies along columns


def _triangle_mask(xx, yy, cx, cy, radius, flip=False):
    """Equilateral triangle, circumradius ``radius``, apex up (image -y)."""
    angles = np.array([90.0, 210.0, 330.0]) * np.pi / 180.0
    sign = -1.0 if not flip else 1.0  # image rows grow downward
    vx = cx + radius * np.cos(angles)
    vy = cy + sign * radius * np.sin(angles)
    mask = np.ones_like(xx, dtype=bool)
    for i in range(3):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % 3], vy[(i + 1) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        ref = (x1 - x0) * (vy[(i + 2) % 3] - y0) - (y1 - y0) * (vx[(i + 2) % 3] - x0)
        mask &= cross * ref >= 0
    return mask


def shape_mask(shape: str, cx: float, cy: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean coverage of a shape's pixels: center-in-shape test."""
    xx, yy = _pixel_grid(size)
    r = OBJECT_RADIUS
    if shape == "cube":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "ball":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (BALL_FACTOR * r) ** 2
    if shape == "triangle":
        return _triangle_mask(xx, yy, cx, cy, TRI_FACTOR * r)
    if shape == "star":
        # hexagram: union of an up and a down triangle
        return _triangle_mask(xx, yy, cx, cy, TRI_FACTOR * r) | _triangle_mask(
            xx, yy, cx, cy, TRI_FACTOR * r, flip=True)
    raise UsageError(f"unknown shape {shape!r}")


def render(scene: Scene, size: int = IMAGE_SIZE) -> np.ndarray:
    """Top-down flat-shaded view, (size, size, 3) uint8."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    xx, yy = _pixel_grid(size)
    for bowl in scene.bowls:
        d2 = (xx - bowl.position[0]) ** 2 + (yy - bowl.position[1]) ** 2
        ring = (d2 <= BOWL_RADIUS**2) & (d2 >= (BOWL_RING * BOWL_RADIUS) ** 2)
        img[ring] = COLOR_RGB[bowl.color]
    # reverse order: the first-listed object (the task target) paints on top
    for obj in reversed(scene.objects):
        mask = shape_mask(obj.shape, obj.position[0], obj.position[1], size)
        img[mask] = COLOR_RGB[obj.color]
    gx, gy = scene.gripper_xy
    arm, thick = 1.2 * OBJECT_RADIUS, 0.35 * OBJECT_RADIUS
    plus = ((np.abs(xx - gx) <= arm) & (np.abs(yy - gy) <= thick)) | (
        (np.abs(xx - gx) <= thick) & (np.abs(yy - gy) <= arm))
    img[plus] = GRIPPER_OPEN_RGB if scene.gripper_open else GRIPPER_CLOSED_RGB
    return img


def render_cameras(scene: Scene, cameras: int, size: int = IMAGE_SIZE) -> list[np.ndarray]:
    """Camera 0 is the canonical view; camera 1 views from the opposite side."""
    if cameras not in (1, 2):
        raise UsageError(f"supported camera counts are 1 and 2; got {cameras}")
    base = render(scene, size)
    if cameras == 1:
        return [base]
    return [base, base[:, ::-1].copy()]


# -- environment -------------------------------------------------------------


class TabletopEnv:
    """Seeded episode of one task; single-threaded.

    Step order: integrate clipped motion, move any held object, apply the
    gripper command (grasp on close, release on open), then grade.
    """

    def __init__(self, cameras: int = 1, step_limit: int = STEP_LIMIT,
                 size: int = IMAGE_SIZE):
        if cameras not in (1, 2):
            raise UsageError(f"supported camera counts are 1 and 2; got {cameras}")
        self.cameras = cameras
        self.step_limit = step_limit
        self.size = size
        self.scene: Scene | None = None
        self.task: TaskSpec | None = None
        self.steps = 0
        self._picked_target = False
        self._picked_distractor = False
        self._placed = False

    # -- setup ---------------------------------------------------------------

    def reset(self, seed: int, task: TaskSpec) -> Observation:
        rng = np.random.default_rng(seed)
        bowls: list[Bowl] = []
        if task.primitive == "put":
            decoy = COLORS[int(rng.integers(len(COLORS)))]
            while decoy == task.bowl_color:
                decoy = COLORS[int(rng.integers(len(COLORS)))]
            for color in (task.bowl_color, decoy):
                bowls.append(Bowl(color, self._place(rng, bowls, [], kind="bowl")))
        n_distract = 2 + int(rng.integers(2))  # 2 or 3
        pool = [c for c in seen_combos() if c != (task.shape, task.color)]
        picks = rng.choice(len(pool), size=n_distract, replace=False)
        objects = [SimObject(task.shape, task.color,
                             self._place(rng, bowls, [], kind="object"))]
        for i in picks:
            shape, color = pool[int(i)]
            objects.append(SimObject(
                shape, color, self._place(rng, bowls, objects, kind="object")))
        self.scene = Scene(objects=objects, bowls=bowls,
                           gripper_xy=np.array(GRIPPER_HOME, dtype=np.float64))
        self.task = task
        self.steps = 0
        self._picked_target = False
        self._picked_distractor = False
        self._placed = False
        return self.observation()

    def _place(self, rng, bowls, objects, kind: str,
               attempts: int = 100) -> np.ndarray:
        lo, hi = TABLE_MARGIN, 1.0 - TABLE_MARGIN
        home = np.asarray(GRIPPER_HOME)
        for _ in range(attempts):
            pos = rng.uniform(lo, hi, size=2)
            if kind == "bowl":
                if all(np.linalg.norm(pos - b.position) >= 2.2 * BOWL_RADIUS
                       for b in bowls):
                    return pos
                continue
            # clearances keep silhouette cores apart; the thin triangle/star
            # points may rarely touch, which the renderer's draw order tolerates
            if any(np.linalg.norm(pos - b.position) < BOWL_RADIUS + OBJECT_RADIUS
                   for b in bowls):
                continue
            if any(np.linalg.norm(pos - o.position)
                   < 1.7 * TRI_FACTOR * OBJECT_RADIUS for o in objects):
                continue
            if np.linalg.norm(pos - home) < 2 * OBJECT_RADIUS:
                continue
            return pos
        raise GenerationError(f"no valid placement after {attempts} attempts")

    def clone(self) -> "TabletopEnv":
        """Deep copy for lookahead (expert chunk generation)."""
        return copy.deepcopy(self)

    # -- state access ----------------------------------------------------------

    def _require_scene(self) -> Scene:
        if self.scene is None:
            raise UsageError("environment not reset")
        return self.scene

    def gripper_pose(self) -> Pose:
        scene = self._require_scene()
        return Pose(rot=rot_z(scene.gripper_yaw),
                    trans=np.array([*scene.gripper_xy, 0.0]))

    def proprio(self) -> np.ndarray:
        scene = self._require_scene()
        return pose_to_vec(self.gripper_pose(),
                           1.0 if scene.gripper_open else 0.0).astype(np.float32)

    def observation(self) -> Observation:
        scene = self._require_scene()
        assert self.task is not None
        return Observation(images=render_cameras(scene, self.cameras, self.size),
                           proprio=self.proprio(),
                           instruction=self.task.instruction)

    def _target_index(self) -> int | None:
        scene = self._require_scene()
        assert self.task is not None
        for i, obj in enumerate(scene.objects):
            if (obj.shape, obj.color) == (self.task.shape, self.task.color):
                return i
        return None

    def score(self) -> float:
        assert self.task is not None
        if self.task.primitive == "poke":
            return 1.0 if self._placed else 0.0
        if self._placed:
            return 1.0
        if self._picked_target and not self._picked_distractor:
            return 0.5
        return 0.0

    def done(self) -> bool:
        return self._placed or self.steps >= self.step_limit

    # -- dynamics ----------------------------------------------------------------

    def step(self, action: np.ndarray) -> tuple[Observation, bool, dict]:
        scene = self._require_scene()
        task = self.task
        assert task is not None
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (10,):
            raise ShapeError(f"action must be (10,); got {action.shape}")
        target_pose, grip_cmd = decode_action(self.gripper_pose(), action)

        # planar projection: keep xy, take yaw from the rotation's first column
        delta = target_pose.trans[:2] - scene.gripper_xy
        dist = float(np.linalg.norm(delta))
        if dist > MAX_STEP:
            delta = delta * (MAX_STEP / dist)
        scene.gripper_xy = np.clip(scene.gripper_xy + delta, 0.0, 1.0)
        yaw = float(np.arctan2(target_pose.rot[1, 0], target_pose.rot[0, 0]))
        dyaw = (yaw - scene.gripper_yaw + np.pi) % (2 * np.pi) - np.pi
        scene.gripper_yaw += float(np.clip(dyaw, -MAX_YAW_STEP, MAX_YAW_STEP))

        if scene.held is not None:
            scene.objects[scene.held].position = scene.gripper_xy.copy()

        want_open = grip_cmd >= 0.5
        if scene.gripper_open and not want_open:
            scene.gripper_open = False
            dists = [np.linalg.norm(o.position - scene.gripper_xy)
                     for o in scene.objects]
            nearest = int(np.argmin(dists))
            if dists[nearest] <= GRASP_RADIUS:
                scene.held = nearest
                scene.objects[nearest].position = scene.gripper_xy.copy()
                if nearest == self._target_index():
                    self._picked_target = True
                else:
                    self._picked_distractor = True
        elif not scene.gripper_open and want_open:
            scene.gripper_open = True
            if scene.held is not None:
                dropped = scene.held
                scene.held = None
                if task.primitive == "put" and dropped == self._target_index():
                    bowl = next(b for b in scene.bowls if b.color == task.bowl_color)
                    pos = scene.objects[dropped].position
                    if np.linalg.norm(pos - bowl.position) <= PLACE_RADIUS:
                        self._placed = True

        if task.primitive == "poke" and not scene.gripper_open:
            t = self._target_index()
            if t is not None and np.linalg.norm(
                    scene.objects[t].position - scene.gripper_xy) <= TOUCH_RADIUS:
                self._placed = True

        self.steps += 1
        done = self.done()
        info = {"score": self.score(), "success": self._placed,
                "steps": self.steps, "held": scene.held}
        return self.observation(), done, info


# -- scripted expert -----------------------------------------------------------


def _move_vec(delta_xy: np.ndarray, grip: float, step: float) -> np.ndarray:
    dist = float(np.linalg.norm(delta_xy))
    if dist > step:
        delta_xy = delta_xy * (step / dist)
    rel = Pose(rot=np.eye(3), trans=np.array([delta_xy[0], delta_xy[1], 0.0]))
    return pose_to_vec(rel, grip)


def expert_action(scene: Scene, task: TaskSpec,
                  step: float = 0.8 * MAX_STEP) -> np.ndarray:
    """One waypoint-controller action for the current scene.

    put: approach the target, close, carry to the instructed bowl, open.
    poke: close first, then drive into the target.
    """
    target = None
    for i, obj in enumerate(scene.objects):
        if (obj.shape, obj.color) == (task.shape, task.color):
            target = i
            break
    if target is None:
        raise ExpertError(f"target {task.color} {task.shape} is not in the scene")
    grip_now = 1.0 if scene.gripper_open else 0.0
    here = scene.gripper_xy

    if task.primitive == "poke":
        if scene.held is not None:
            return _move_vec(np.zeros(2), 1.0, step)  # drop whatever was grabbed
        if scene.gripper_open:
            return _move_vec(np.zeros(2), 0.0, step)
        return _move_vec(scene.objects[target].position - here, 0.0, step)

    bowl = next((b for b in scene.bowls if b.color == task.bowl_color), None)
    if bowl is None:
        raise ExpertError(f"no {task.bowl_color} bowl in the scene")
    if scene.held == target:
        to_bowl = bowl.position - here
        if np.linalg.norm(to_bowl) <= 0.3 * PLACE_RADIUS:
            return _move_vec(np.zeros(2), 1.0, step)  # release
        return _move_vec(to_bowl, 0.0, step)
    if scene.held is not None:
        return _move_vec(np.zeros(2), 1.0, step)  # wrong object: drop it
    to_target = scene.objects[target].position - here
    if np.linalg.norm(to_target) <= 0.5 * OBJECT_RADIUS:
        return _move_vec(np.zeros(2), 0.0, step)  # close on it
    return _move_vec(to_target, 1.0, step)


# -- caption corpus ------------------------------------------------------------


CAPTION_TEMPLATES = (
    "a {color} {shape} on the table",
    "the {color} {shape}",
    "a {color} {shape}",
)


def make_caption_corpus(n: int, rng: np.random.Generator, size: int = IMAGE_SIZE,
                        template: int | None = None) -> list[tuple[np.ndarray, str]]:
    """(image, caption) pairs covering all 16 combinations.

    One object per image so the caption is unambiguous; the first 16 pairs
    enumerate every combination, the rest are drawn at random. ``template``
    pins one caption phrasing, giving each combination exactly one caption
    string; retrieval scoring needs that, since a synonymous phrasing ranked
    first would otherwise count as a miss.
    """
    if n < 16:
        raise UsageError(f"corpus needs n >= 16 to cover all combinations; got {n}")
    combos = all_combos()
    order = rng.permutation(len(combos))
    pairs = []
    lo, hi = TABLE_MARGIN, 1.0 - TABLE_MARGIN
    for k in range(n):
        if k < len(combos):
            shape, color = combos[int(order[k])]
        else:
            shape, color = combos[int(rng.integers(len(combos)))]
        pos = rng.uniform(lo, hi, size=2)
        scene = Scene(objects=[SimObject(shape, color, pos)], bowls=[],
                      gripper_xy=np.array([-1.0, -1.0]))  # gripper off-table
        pick = template if template is not None else int(rng.integers(len(CAPTION_TEMPLATES)))
        pairs.append((render(scene, size),
                      CAPTION_TEMPLATES[pick].format(color=color, shape=shape)))
    return pairs
