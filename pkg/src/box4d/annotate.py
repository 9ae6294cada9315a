"""Per-frame object filtering and visibility-driven box adaptation.

A clip arrives with room-frame camera poses and rendered depth/instance
maps. For every frame the scene's boxes are filtered (semantic class,
frustum/depth, pixel support, vertex occlusion); surviving objects are then
annotated by a small per-object state machine:

* ``FULL_FROM_START`` -- fully visible when first seen: the global box is
  emitted until the object shows no pixels, after which it is ``DROPPED``.
* ``ACCUMULATING`` -- partially visible when first seen: visible pixels are
  back-projected into a growing point cloud and the emitted box is the tight
  fit of that cloud with the global box's orientation.
* ``CONVERGED`` -- the tight fit reached ``converge_ratio`` of the global
  volume: the global box is emitted from then on.

Finally the clip is re-referenced to its first camera.
"""

from dataclasses import dataclass, field
import enum
import logging

import numpy as np

from . import geometry as geo
from . import scene as synth
from .records import FrameRecord, ObjectAnnotation, SequenceClip

log = logging.getLogger(__name__)


@dataclass
class AnnotationConfig:
    depth_max: float = 10.0
    min_pixels: int = 100
    behind_margin: float = 0.02
    max_behind: int = 5
    full_visible_ratio: float = 0.95
    converge_ratio: float = 0.9
    subsample: int = 2
    min_extent: float = 0.02
    near: float = 1e-3
    background_categories: tuple = synth.BACKGROUND_CATEGORIES


class Phase(enum.Enum):
    FULL_FROM_START = "full_from_start"
    ACCUMULATING = "accumulating"
    CONVERGED = "converged"
    DROPPED = "dropped"


@dataclass
class AdaptationState:
    instance_id: int
    phase: Phase
    global_box: geo.OrientedBox3D
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    adapted_box: geo.OrientedBox3D = None

    def current_box(self):
        if self.phase in (Phase.FULL_FROM_START, Phase.CONVERGED):
            return self.global_box
        return self.adapted_box


# ---------------------------------------------------------------------------
# filters


def filter_semantic(objects, background_categories=synth.BACKGROUND_CATEGORIES):
    blocked = set(background_categories)
    return [o for o in objects if o.category not in blocked]


def camera_box(obj, pose):
    return geo.transform_box(pose.inverse(), obj.box)


def filter_frustum_depth(objects, pose, K, depth_max):
    """Drop boxes entirely behind the camera or whose center is beyond ``depth_max``."""
    if not depth_max > 0:
        raise ValueError("depth_max must be positive")
    kept = []
    for o in objects:
        box = camera_box(o, pose)
        if np.all(geo.box_corners(box)[:, 2] <= 0):
            continue
        if box.center[2] > depth_max:
            continue
        kept.append(o)
    return kept


def projected_rect(box_cam, K, near=1e-3):
    """Integer pixel bounds ``(c0, r0, c1, r1)`` (inclusive) of the box's image footprint.

    The box is first clipped to ``z >= near`` so boxes straddling the camera
    plane still get a finite footprint. ``None`` if nothing is in view.
    """
    verts = geo.clip_box_vertices(box_cam, (0.0, 0.0, -1.0), -near)
    if len(verts) == 0:
        return None
    u, v, _ = geo.project_points(verts, K)
    c0 = max(int(np.floor(u.min() + 0.5)), 0)
    c1 = min(int(np.floor(u.max() + 0.5)), K.width - 1)
    r0 = max(int(np.floor(v.min() + 0.5)), 0)
    r1 = min(int(np.floor(v.max() + 0.5)), K.height - 1)
    if c0 > c1 or r0 > r1:
        return None
    return c0, r0, c1, r1


def visible_pixel_count(instance_id, mask, rect):
    if rect is None:
        return 0
    c0, r0, c1, r1 = rect
    return int(np.count_nonzero(mask[r0 : r1 + 1, c0 : c1 + 1] == instance_id))


def filter_occlusion_pixels(obj, mask, min_pixels, pose, K, near=1e-3):
    """Keep iff at least ``min_pixels`` mask pixels of the object fall in its projected box."""
    if min_pixels < 1:
        raise ValueError("min_pixels must be >= 1")
    rect = projected_rect(camera_box(obj, pose), K, near)
    return visible_pixel_count(obj.instance_id, mask, rect) >= min_pixels


def behind_vertex_count(box_cam, depth, K, margin=0.02):
    """Corners that project in-image and lie more than ``margin`` behind the rendered depth."""
    corners = geo.box_corners(box_cam)
    u, v, z = geo.project_points(corners, K)
    col, row, ok = geo.pixel_index(u, v, K)
    ok &= z > 0
    pix = depth[row, col].astype(float)
    ok &= pix != synth.NO_HIT
    return int(np.count_nonzero(ok & (z > pix + margin)))


def filter_vertex_depth(obj, depth, pose, K, margin=0.02, max_behind=5):
    """Keep unless more than ``max_behind`` corners are hidden behind their pixels."""
    return behind_vertex_count(camera_box(obj, pose), depth, K, margin) <= max_behind


def filter_frame(objects, frame, config=AnnotationConfig()):
    """Apply the four filters in order; returns the surviving objects."""
    K, pose = frame.intrinsics, frame.pose
    kept = filter_semantic(objects, config.background_categories)
    kept = filter_frustum_depth(kept, pose, K, config.depth_max)
    kept = [o for o in kept if filter_occlusion_pixels(o, frame.instance, config.min_pixels, pose, K, config.near)]
    kept = [
        o
        for o in kept
        if filter_vertex_depth(o, frame.depth, pose, K, config.behind_margin, config.max_behind)
    ]
    return kept


# ---------------------------------------------------------------------------
# visibility and accumulation


def corners_unoccluded(obj, scene, pose, K, margin=0.02):
    """True if every corner is in the image and no other box sits in front of it."""
    box_cam = camera_box(obj, pose)
    corners = geo.box_corners(box_cam)
    u, v, z = geo.project_points(corners, K)
    _, _, ok = geo.pixel_index(u, v, K)
    if not np.all(ok & (z > 0)):
        return False
    dirs_world = corners @ pose.rotation.T
    dist = np.linalg.norm(corners, axis=1)
    for other in scene.objects:
        if other.instance_id == obj.instance_id:
            continue
        t = synth.ray_box_hits(pose.translation, dirs_world, other.box)
        if np.any(t < 1.0 - margin / dist):
            return False
    return True


def is_fully_visible(obj, frame, scene, config=AnnotationConfig()):
    K, pose = frame.intrinsics, frame.pose
    if not corners_unoccluded(obj, scene, pose, K, config.behind_margin):
        return False
    _, alone = synth.render_frame(scene.only(obj.instance_id), pose, K)
    total = np.count_nonzero(alone == obj.instance_id)
    if total == 0:
        return False
    seen = np.count_nonzero(frame.instance == obj.instance_id)
    return seen / total >= config.full_visible_ratio


def visible_points(instance_id, frame, subsample=2):
    """Room-frame back-projection of the object's mask pixels on a ``subsample`` grid."""
    rows, cols = np.nonzero(frame.instance == instance_id)
    keep = (rows % subsample == 0) & (cols % subsample == 0)
    rows, cols = rows[keep], cols[keep]
    d = frame.depth[rows, cols].astype(float)
    good = d > 0
    if not np.any(good):
        return np.zeros((0, 3))
    pts = geo.backproject_pixels(cols[good], rows[good], d[good], frame.intrinsics)
    return frame.pose.apply(pts)


def mask_prompt(instance_id, mask):
    """Pixel-edge bounding rectangle ``(x0, y0, x1, y1)`` of the object's mask pixels."""
    rows, cols = np.nonzero(mask == instance_id)
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (cols.min() - 0.5, rows.min() - 0.5, cols.max() + 0.5, rows.max() + 0.5)


def _step(state, obj, frame, config):
    """Advance one object's state with this frame's observation (object passed the filters)."""
    if state.phase is Phase.ACCUMULATING:
        new = visible_points(obj.instance_id, frame, config.subsample)
        if len(new):
            state.points = np.vstack([state.points, new])
            state.adapted_box = geo.tight_fitting_box(state.points, state.global_box.rotation)
        if state.adapted_box is not None and state.adapted_box.volume >= config.converge_ratio * state.global_box.volume:
            state.phase = Phase.CONVERGED


def adapt_boxes(clip, scene, config=AnnotationConfig()):
    """Annotate a room-frame clip; returns ``(clip with annotations, state history)``.

    Annotation ``box_world`` fields are still in the room frame here;
    :func:`rereference` moves them to the first camera. ``history[t]`` maps
    instance id to ``(phase, emitted room-frame box)`` for frame ``t``.
    """
    states = {}
    frames, history = [], []
    for frame in clip.frames:
        kept = {o.instance_id: o for o in filter_frame(scene.objects, frame, config)}
        present = set(np.unique(frame.instance).tolist())
        for inst, state in states.items():
            if state.phase is Phase.FULL_FROM_START and inst not in present:
                log.debug("instance %s lost presence in frame %s; dropped", inst, frame.index)
                state.phase = Phase.DROPPED
        annotations, snapshot = [], {}
        for inst in sorted(kept):
            obj = kept[inst]
            state = states.get(inst)
            if state is None:
                if is_fully_visible(obj, frame, scene, config):
                    state = AdaptationState(inst, Phase.FULL_FROM_START, obj.box)
                else:
                    state = AdaptationState(inst, Phase.ACCUMULATING, obj.box)
                states[inst] = state
            if state.phase is Phase.DROPPED:
                log.info("instance %s reappeared in frame %s after being dropped; ignored", inst, frame.index)
                continue
            _step(state, obj, frame, config)
            box = state.current_box()
            if box is None or box.dims.min() < config.min_extent:
                # a single visible face gives a flat cloud; wait for more views
                continue
            snapshot[inst] = (state.phase, box)
            annotations.append(
                ObjectAnnotation(
                    inst,
                    obj.category,
                    geo.transform_box(frame.pose.inverse(), box),
                    box,
                    mask_prompt(inst, frame.instance),
                    1.0,
                )
            )
        history.append(snapshot)
        frames.append(
            FrameRecord(frame.index, frame.pose, frame.intrinsics, frame.depth, frame.instance, annotations, frame.image)
        )
    return SequenceClip(clip.sequence_id, clip.scene_id, frames, clip.start), history


def rereference(clip):
    """Express poses and world boxes relative to the clip's first camera."""
    if not clip.frames:
        raise ValueError("clip has no frames")
    to_ref = clip.frames[0].pose.inverse()
    frames = []
    for f in clip.frames:
        rel = to_ref @ f.pose
        objs = [
            ObjectAnnotation(a.instance_id, a.category, a.box, geo.transform_box(to_ref, a.box_world), a.prompt, a.score)
            for a in f.objects
        ]
        frames.append(FrameRecord(f.index, rel, f.intrinsics, f.depth, f.instance, objs, f.image))
    # exact identity for the reference frame
    frames[0].pose = geo.RigidTransform.identity()
    return SequenceClip(clip.sequence_id, clip.scene_id, frames, clip.start)


def annotate_clip(clip, scene, config=AnnotationConfig()):
    adapted, _ = adapt_boxes(clip, scene, config)
    return rereference(adapted)
