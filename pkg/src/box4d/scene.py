"""Synthetic cuboid rooms, random-walk cameras and analytic ray casting.

The room frame is z-up with the floor at ``z = 0`` and the room spanning
``[0, X] x [0, Y] x [0, Z]``. Object boxes keep their height axis (local y)
pointing down so that, seen from a level camera, they are gravity-aligned in
the camera convention of :mod:`box4d.geometry`.
"""

from dataclasses import dataclass, field, asdict
import json
import math

import numpy as np

from . import geometry as geo
from .errors import ConfigError, PlacementFailure
from .records import FrameRecord, SequenceClip

NO_HIT = 0.0
BACKGROUND_CATEGORIES = ("floor", "wall", "ceiling", "void")
FOREGROUND_CATEGORIES = ("chair", "table", "sofa", "cabinet", "bed", "shelf", "box", "lamp")

# box local (x, y, z) = (w, h, l) -> room (x, -z, y): height axis points down
_LOCAL_TO_ROOM = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def room_box_rotation(heading):
    """Rotation of an upright box in the room frame, turned by ``heading`` about +z."""
    c, s = math.cos(heading), math.sin(heading)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Rz @ _LOCAL_TO_ROOM


def camera_rotation(heading, pitch=0.0):
    """Camera-to-room rotation for a camera facing ``heading`` (radians from +x)."""
    ch, sh = math.cos(heading), math.sin(heading)
    forward = np.array([ch, sh, 0.0])
    right = np.array([sh, -ch, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, forward], axis=1)
    if pitch:
        cp, sp = math.cos(pitch), math.sin(pitch)
        # pitch about the camera x axis; positive looks down
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
        R = R @ Rx
    return R


@dataclass
class SceneConfig:
    room: tuple = (5.0, 4.0, 3.0)
    n_objects: int = 8
    width_range: tuple = (0.4, 1.5)
    height_range: tuple = (0.4, 1.6)
    length_range: tuple = (0.4, 1.5)
    wall_thickness: float = 0.1
    object_clearance: float = 0.1
    placement_retries: int = 2000
    categories: tuple = FOREGROUND_CATEGORIES
    background_categories: tuple = BACKGROUND_CATEGORIES
    # camera
    fx: float = 110.0
    fy: float = 110.0
    cx: float = 64.0
    cy: float = 64.0
    image_width: int = 128
    image_height: int = 128
    camera_height: float = 1.5
    camera_pitch_deg: float = 0.0
    camera_clearance: float = 0.3
    max_step: float = 0.25
    max_turn_deg: float = 15.0
    step_retries: int = 50
    guarantee_visibility: bool = False
    trajectory_retries: int = 20

    def __post_init__(self):
        self.room = tuple(float(v) for v in self.room)
        for name in ("width_range", "height_range", "length_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.categories = tuple(self.categories)
        self.background_categories = tuple(self.background_categories)
        self.validate()

    def validate(self):
        if len(self.room) != 3 or min(self.room) <= 0:
            raise ConfigError("room extents must be three positive numbers")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")
        for name in ("width_range", "height_range", "length_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.max_step < 0 or self.max_turn_deg < 0:
            raise ConfigError("max_step and max_turn_deg must be >= 0")
        if not 0 < self.camera_height < self.room[2]:
            raise ConfigError("camera must be inside the room")

    @property
    def intrinsics(self):
        return geo.CameraIntrinsics(
            self.fx, self.fy, self.cx, self.cy, int(self.image_width), int(self.image_height)
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SceneObject:
    instance_id: int
    category: str
    box: geo.OrientedBox3D

    @property
    def is_background(self):
        return self.category in BACKGROUND_CATEGORIES


@dataclass
class SceneSpec:
    room: tuple
    objects: list = field(default_factory=list)
    background_categories: tuple = BACKGROUND_CATEGORIES
    scene_id: str = "scene"

    @property
    def foreground(self):
        return [o for o in self.objects if o.category not in self.background_categories]

    def by_id(self, instance_id):
        for o in self.objects:
            if o.instance_id == instance_id:
                return o
        raise KeyError(instance_id)

    def without(self, instance_id):
        return SceneSpec(
            self.room,
            [o for o in self.objects if o.instance_id != instance_id],
            self.background_categories,
            self.scene_id,
        )

    def only(self, instance_id):
        return SceneSpec(self.room, [self.by_id(instance_id)], self.background_categories, self.scene_id)


@dataclass
class TrajectorySpec:
    poses: list
    headings: list = field(default_factory=list)

    def __len__(self):
        return len(self.poses)


@dataclass
class RawSequence:
    scene: SceneSpec
    trajectory: TrajectorySpec
    frames: list


# ---------------------------------------------------------------------------
# scene generation


def _background_objects(room, thickness, start_id):
    X, Y, Z = room
    t = thickness
    R = room_box_rotation(0.0)
    specs = [
        ("floor", (X / 2, Y / 2, -t / 2), (X + 2 * t, Y + 2 * t, t)),
        ("ceiling", (X / 2, Y / 2, Z + t / 2), (X + 2 * t, Y + 2 * t, t)),
        ("wall", (-t / 2, Y / 2, Z / 2), (t, Y, Z)),
        ("wall", (X + t / 2, Y / 2, Z / 2), (t, Y, Z)),
        ("wall", (X / 2, -t / 2, Z / 2), (X, t, Z)),
        ("wall", (X / 2, Y + t / 2, Z / 2), (X, t, Z)),
    ]
    out = []
    for k, (cat, c, ext) in enumerate(specs):
        # room extents (ex, ey, ez) map to box dims (w, h, l) = (ex, ez, ey) under R
        out.append(SceneObject(start_id + k, cat, geo.OrientedBox3D(c, (ext[0], ext[2], ext[1]), R)))
    return out


def _footprint_overlap(a, b, margin):
    """Separating-axis test of the two boxes' floor footprints dilated by ``margin``."""
    def rect(box):
        c = box.center[:2]
        ax = box.rotation[:2, 0]
        ay = box.rotation[:2, 2]
        hw, hl = box.dims[0] / 2 + margin / 2, box.dims[2] / 2 + margin / 2
        return c, [ax / np.linalg.norm(ax), ay / np.linalg.norm(ay)], (hw, hl)

    ca, axa, ha = rect(a)
    cb, axb, hb = rect(b)
    d = cb - ca
    for axis in axa + axb:
        ra = sum(h * abs(axis @ u) for h, u in zip(ha, axa))
        rb = sum(h * abs(axis @ u) for h, u in zip(hb, axb))
        if abs(d @ axis) > ra + rb:
            return False
    return True


def generate_scene(config, seed, scene_id="scene"):
    """Room with ``config.n_objects`` non-overlapping upright boxes on the floor."""
    rng = np.random.default_rng(seed)
    X, Y, _ = config.room
    objects = []
    for i in range(config.n_objects):
        for _attempt in range(config.placement_retries):
            w = rng.uniform(*config.width_range)
            h = rng.uniform(*config.height_range)
            l = rng.uniform(*config.length_range)
            heading = rng.uniform(-math.pi, math.pi)
            R = room_box_rotation(heading)
            # horizontal half-extent of the rotated footprint
            ex = 0.5 * (abs(math.cos(heading)) * w + abs(math.sin(heading)) * l)
            ey = 0.5 * (abs(math.sin(heading)) * w + abs(math.cos(heading)) * l)
            if 2 * ex >= X or 2 * ey >= Y:
                continue
            cx = rng.uniform(ex, X - ex)
            cy = rng.uniform(ey, Y - ey)
            box = geo.OrientedBox3D((cx, cy, h / 2), (w, h, l), R)
            if any(_footprint_overlap(box, o.box, config.object_clearance) for o in objects):
                continue
            category = config.categories[int(rng.integers(len(config.categories)))]
            objects.append(SceneObject(i + 1, category, box))
            break
        else:
            raise PlacementFailure(f"could not place object {i + 1} after {config.placement_retries} tries")
    objects += _background_objects(config.room, config.wall_thickness, config.n_objects + 1)
    return SceneSpec(config.room, objects, config.background_categories, scene_id)


# ---------------------------------------------------------------------------
# trajectories


def _free(scene, config, xy):
    X, Y, _ = config.room
    m = config.camera_clearance
    if not (m <= xy[0] <= X - m and m <= xy[1] <= Y - m):
        return False
    for o in scene.foreground:
        local = (np.array([xy[0], xy[1], o.box.center[2]]) - o.box.center) @ o.box.rotation
        if abs(local[0]) <= o.box.dims[0] / 2 + m and abs(local[2]) <= o.box.dims[2] / 2 + m:
            return False
    return True


def _walk(scene, n_steps, config, rng):
    X, Y, _ = config.room
    for _ in range(10000):
        xy = rng.uniform((0, 0), (X, Y))
        if _free(scene, config, xy):
            break
    else:
        raise PlacementFailure("no free space for the camera")
    heading = rng.uniform(-math.pi, math.pi)
    max_turn = math.radians(config.max_turn_deg)
    pitch = math.radians(config.camera_pitch_deg)
    positions, headings = [xy.copy()], [heading]
    for _ in range(n_steps - 1):
        moved = False
        for _try in range(config.step_retries):
            turn = rng.uniform(-max_turn, max_turn)
            step = rng.uniform(0.0, config.max_step)
            h = heading + turn
            cand = xy + step * np.array([math.cos(h), math.sin(h)])
            if _free(scene, config, cand):
                xy, heading, moved = cand, h, True
                break
        if not moved:
            # blocked: stay in place and turn as far as allowed
            heading = heading + max_turn
        positions.append(xy.copy())
        headings.append(heading)
    poses = [
        geo.RigidTransform(camera_rotation(h, pitch), (p[0], p[1], config.camera_height))
        for p, h in zip(positions, headings)
    ]
    return TrajectorySpec(poses, headings)


def frustum_sees(box, pose, K):
    """True if any corner or the center of ``box`` projects inside the image in front of the camera."""
    pts = np.vstack([geo.box_corners(box), box.center])
    cam = pose.inverse().apply(pts)
    u, v, z = geo.project_points(cam, K)
    ok = (z > 0) & (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
    return bool(np.any(ok))


def random_walk(scene, n_steps, seed, config=None):
    """Seeded random walk: bounded per-step translation and turn, fixed camera height."""
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    config = config or SceneConfig(room=scene.room, n_objects=len(scene.foreground))
    rng = np.random.default_rng(seed)
    K = config.intrinsics
    for _ in range(max(1, config.trajectory_retries)):
        traj = _walk(scene, n_steps, config, rng)
        if not config.guarantee_visibility:
            return traj
        if all(any(frustum_sees(o.box, p, K) for p in traj.poses) for o in scene.foreground):
            return traj
    raise PlacementFailure("no trajectory sees every object")


# ---------------------------------------------------------------------------
# rendering


def pixel_rays(K):
    """Camera-frame ray directions through pixel centers, scaled to unit z; shape (H, W, 3)."""
    cols, rows = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    return np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones_like(cols)], axis=-1)


def ray_box_hits(origin, dirs, box):
    """Entry parameter along ``dirs`` for rays from ``origin``; inf where the ray misses.

    Slab method in the box frame. Rays starting inside the box count as misses.
    """
    o = (np.asarray(origin, dtype=float) - box.center) @ box.rotation
    d = dirs @ box.rotation
    half = box.dims / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # rays parallel to a slab: inside the slab -> unbounded, outside -> miss
    par = d == 0
    inside_slab = np.abs(o) <= half
    t1 = np.where(par, -np.inf, t1)
    t2 = np.where(par, np.inf, t2)
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmin > 0) & ~np.any(par & ~inside_slab, axis=-1)
    return np.where(hit, tmin, np.inf)


def render_frame(scene, pose, K):
    """Depth (float32, camera z) and instance-id maps by casting one ray per pixel center."""
    dirs_cam = pixel_rays(K)
    dirs_world = dirs_cam @ pose.rotation.T
    best = np.full(K.shape, np.inf)
    ids = np.zeros(K.shape, dtype=np.int32)
    for obj in scene.objects:
        if obj.box.is_degenerate:
            continue
        t = ray_box_hits(pose.translation, dirs_world, obj.box)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, obj.instance_id, ids)
    # dirs have unit z in the camera frame, so the ray parameter is the depth
    depth = np.where(np.isfinite(best), best, NO_HIT).astype(np.float32)
    ids[~np.isfinite(best)] = 0
    return depth, ids


def render_sequence(scene, trajectory, K):
    frames = []
    for i, pose in enumerate(trajectory.poses):
        depth, inst = render_frame(scene, pose, K)
        frames.append(FrameRecord(i, pose, K, depth, inst))
    return RawSequence(scene, trajectory, frames)


def segment_clips(raw, clip_len, stride):
    """Overlapping fixed-length clips starting every ``stride`` frames.

    A tail shorter than ``clip_len`` is dropped. Frames keep their room-frame
    poses and carry no annotations yet.
    """
    if clip_len < 1 or stride < 1:
        raise ConfigError("clip_len and stride must be >= 1")
    if stride > clip_len:
        raise ConfigError(f"stride {stride} exceeds clip length {clip_len}")
    scene_id = raw.scene.scene_id
    clips = []
    for s in range(0, len(raw.frames) - clip_len + 1, stride):
        clips.append(SequenceClip(f"{scene_id}_{s:05d}", scene_id, list(raw.frames[s : s + clip_len]), start=s))
    return clips


# ---------------------------------------------------------------------------
# hand-built scenes


def entering_object_scene(n_frames=16):
    """Small fixed scene where one box is fully in view and another pans in.

    The camera stands still at 1.5 m, pitched 20 degrees down, and turns
    right by 2 degrees per frame. Instance 1 (a 0.6 m cube) is in view and
    unoccluded from the first frame; instance 2 enters from the right edge
    around frame 1 and is completely in view a few frames later.

    Returns:
        (SceneSpec, TrajectorySpec)
    """
    room = (6.0, 6.0, 3.0)
    objects = [
        SceneObject(1, "cabinet", geo.OrientedBox3D((4.0, 3.0, 0.3), (0.6, 0.6, 0.6), room_box_rotation(0.3))),
        SceneObject(2, "table", geo.OrientedBox3D((3.6, 1.3, 0.4), (0.8, 0.8, 0.6), room_box_rotation(-0.2))),
    ]
    objects += _background_objects(room, 0.1, len(objects) + 1)
    headings = [math.radians(8.0 - 2.0 * i) for i in range(n_frames)]
    pitch = math.radians(20.0)
    poses = [geo.RigidTransform(camera_rotation(h, pitch), (1.0, 3.0, 1.5)) for h in headings]
    return SceneSpec(room, objects, scene_id="entering"), TrajectorySpec(poses, headings)
