"""On-disk formats: sequence documents, rasters, raw scenes, predictions, manifests.

Sequence documents are JSON with sorted keys. Floats are written with
Python's shortest round-trip ``repr``, so a write/read cycle reproduces
every number bit for bit and writing the same clip twice gives identical
bytes. Depth and instance maps live next to the document as raster files::

    bytes 0-3    magic b"B4DR"
    bytes 4-15   width, height, channels (little-endian uint32)
    bytes 16-    float32 little-endian samples, row-major, channels last

See ``docs/schema.md`` for the field-by-field description.
"""

from dataclasses import dataclass
import json
import math
import os
import struct
import warnings

import numpy as np

from . import geometry as geo
from . import scene as synth
from .errors import SchemaError
from .records import FrameRecord, ObjectAnnotation, SequenceClip

SCHEMA_VERSION = 1
RASTER_MAGIC = b"B4DR"
_HEADER = struct.Struct("<4sIII")

SEQUENCE_FILE = "sequence.json"
MANIFEST_FILE = "manifest.json"
RAW_SCENE_FILE = "scene.json"


# ---------------------------------------------------------------------------
# low-level helpers


def dumps(doc):
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}", path) from e


def write_raster(path, array):
    """Write a (H, W) or (H, W, C) array as a float32 raster."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {a.shape}")
    h, w, c = a.shape
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RASTER_MAGIC, w, h, c))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_raster(path):
    """Inverse of :func:`write_raster`; single-channel rasters come back 2-D."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise SchemaError("raster file missing", path) from e
    if len(blob) < _HEADER.size:
        raise SchemaError("truncated raster header", path)
    magic, w, h, c = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC:
        raise SchemaError(f"bad raster magic {magic!r}", path)
    expected = _HEADER.size + 4 * w * h * c
    if len(blob) != expected:
        raise SchemaError(f"raster has {len(blob)} bytes, header implies {expected}", path)
    a = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)
    return a[:, :, 0] if c == 1 else a


class _Reader:
    """Field access on a parsed document that reports the dotted path on failure."""

    def __init__(self, doc, path, known=None):
        if not isinstance(doc, dict):
            raise SchemaError("expected an object", path)
        self.doc = doc
        self.path = path
        if known is not None:
            extra = sorted(set(doc) - set(known))
            if extra:
                warnings.warn(f"{path}: ignoring unknown fields {extra}", stacklevel=3)

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key):
        if key not in self.doc:
            raise SchemaError("missing field", self._p(key))
        return self.doc[key]

    def number(self, key, allow_none=False):
        v = self.get(key)
        if v is None and allow_none:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SchemaError(f"expected a finite number, got {v!r}", self._p(key))
        return float(v)

    def integer(self, key):
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"expected an integer, got {v!r}", self._p(key))
        return v

    def string(self, key, allow_none=False):
        v = self.get(key)
        if v is None and allow_none:
            return None
        if not isinstance(v, str):
            raise SchemaError(f"expected a string, got {v!r}", self._p(key))
        return v

    def numbers(self, key, n, allow_none_at=()):
        v = self.get(key)
        if not isinstance(v, list) or len(v) != n:
            raise SchemaError(f"expected a list of {n} numbers", self._p(key))
        out = []
        for i, x in enumerate(v):
            if x is None and i in allow_none_at:
                out.append(None)
                continue
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise SchemaError(f"expected a finite number, got {x!r}", f"{self._p(key)}[{i}]")
            out.append(float(x))
        return out

    def items(self, key):
        v = self.get(key)
        if not isinstance(v, list):
            raise SchemaError("expected a list", self._p(key))
        return [(f"{self._p(key)}[{i}]", x) for i, x in enumerate(v)]


def _floats(a):
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


# ---------------------------------------------------------------------------
# boxes, poses, intrinsics


def box_to_doc(box):
    """``{"box": [x, y, z, w, h, l, yaw|null], "rotation": [9 floats]}``."""
    return {"box": _floats(box.center) + _floats(box.dims) + [box.yaw], "rotation": _floats(box.rotation)}


def box_from_doc(r, box_key="box", rot_key="rotation"):
    vals = r.numbers(box_key, 7, allow_none_at=(6,))
    rot = r.numbers(rot_key, 9)
    if any(d < 0 for d in vals[3:6]):
        raise SchemaError("negative box dimension", r._p(box_key))
    try:
        box = geo.OrientedBox3D(vals[:3], vals[3:6], np.array(rot).reshape(3, 3))
    except ValueError as e:
        raise SchemaError(str(e), r._p(rot_key)) from e
    if vals[6] is not None:
        if box.yaw is None or abs(box.yaw - vals[6]) > geo.GRAVITY_TOL:
            raise SchemaError("yaw disagrees with rotation", r._p(box_key))
    return box


def pose_to_doc(pose):
    """Row-major ``[R | t]``, 12 floats."""
    return _floats(pose.as_matrix()[:3, :])


def pose_from_doc(r, key="pose"):
    vals = r.numbers(key, 12)
    M = np.array(vals).reshape(3, 4)
    try:
        return geo.RigidTransform(M[:, :3], M[:, 3])
    except ValueError as e:
        raise SchemaError(str(e), r._p(key)) from e


def intrinsics_to_doc(K):
    return {"fx": float(K.fx), "fy": float(K.fy), "cx": float(K.cx), "cy": float(K.cy),
            "width": int(K.width), "height": int(K.height)}


def intrinsics_from_doc(r):
    try:
        return geo.CameraIntrinsics(
            r.number("fx"), r.number("fy"), r.number("cx"), r.number("cy"), r.integer("width"), r.integer("height")
        )
    except ValueError as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(str(e), r.path) from e


# ---------------------------------------------------------------------------
# annotated sequences

_SEQ_KEYS = ("schema_version", "sequence_id", "scene_id", "start", "frames")
_FRAME_KEYS = ("index", "intrinsics", "pose", "depth", "instance", "image", "objects")
_OBJ_KEYS = ("instance_id", "category", "box", "rotation", "box_world", "rotation_world", "prompt", "score")
_K_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def _raster_names(i):
    return f"rasters/depth_{i:05d}.bin", f"rasters/instance_{i:05d}.bin"


def sequence_to_doc(clip):
    frames = []
    for i, f in enumerate(clip.frames):
        depth_ref, inst_ref = _raster_names(i)
        objects = []
        for a in f.objects:
            cam, world = box_to_doc(a.box), box_to_doc(a.box_world)
            objects.append(
                {
                    "instance_id": int(a.instance_id),
                    "category": a.category,
                    "box": cam["box"],
                    "rotation": cam["rotation"],
                    "box_world": world["box"],
                    "rotation_world": world["rotation"],
                    "prompt": _floats(a.prompt),
                    "score": float(a.score),
                }
            )
        frames.append(
            {
                "index": int(f.index),
                "intrinsics": intrinsics_to_doc(f.intrinsics),
                "pose": pose_to_doc(f.pose),
                "depth": depth_ref,
                "instance": inst_ref,
                "image": f.image,
                "objects": objects,
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "sequence_id": clip.sequence_id,
        "scene_id": clip.scene_id,
        "start": int(clip.start),
        "frames": frames,
    }


def write_sequence(clip, directory):
    """Write ``clip`` into ``directory``.

    Returns:
        Manifest entry without a split tag; ``path`` is relative to ``directory``.
    """
    for i, f in enumerate(clip.frames):
        depth_ref, inst_ref = _raster_names(i)
        write_raster(os.path.join(directory, depth_ref), f.depth)
        write_raster(os.path.join(directory, inst_ref), f.instance)
    _write_text(os.path.join(directory, SEQUENCE_FILE), dumps(sequence_to_doc(clip)))
    return {"id": clip.sequence_id, "scene_id": clip.scene_id, "frames": len(clip.frames), "path": SEQUENCE_FILE}


def _read_object(path, doc):
    r = _Reader(doc, path, _OBJ_KEYS)
    score = r.number("score")
    if not 0.0 <= score <= 1.0:
        raise SchemaError("score outside [0, 1]", r._p("score"))
    return ObjectAnnotation(
        r.integer("instance_id"),
        r.string("category"),
        box_from_doc(r, "box", "rotation"),
        box_from_doc(r, "box_world", "rotation_world"),
        tuple(r.numbers("prompt", 4)),
        score,
    )


def _read_frame(path, doc, directory, load_rasters):
    r = _Reader(doc, path, _FRAME_KEYS)
    K = intrinsics_from_doc(_Reader(r.get("intrinsics"), r._p("intrinsics"), _K_KEYS))
    pose = pose_from_doc(r)
    depth = instance = None
    refs = {}
    for key in ("depth", "instance"):
        ref = r.string(key)
        full = os.path.join(directory, ref)
        if not os.path.isfile(full):
            raise SchemaError(f"referenced raster {ref!r} does not exist", r._p(key))
        refs[key] = full
    if load_rasters:
        depth = read_raster(refs["depth"])
        instance = read_raster(refs["instance"]).astype(np.int32)
        if depth.shape != K.shape or instance.shape != K.shape:
            raise SchemaError(f"raster shape does not match intrinsics {K.shape}", r.path)
    objects = [_read_object(p, o) for p, o in r.items("objects")]
    return FrameRecord(r.integer("index"), pose, K, depth, instance, objects, r.string("image", allow_none=True))


def read_sequence(path, load_rasters=True):
    """Read a sequence document (file or its directory); exact inverse of :func:`write_sequence`."""
    if os.path.isdir(path):
        path = os.path.join(path, SEQUENCE_FILE)
    directory = os.path.dirname(path)
    try:
        doc = _load_json(path)
    except FileNotFoundError as e:
        raise SchemaError("sequence document missing", path) from e
    r = _Reader(doc, "", _SEQ_KEYS)
    version = r.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {version!r}", "schema_version")
    frames = [_read_frame(p, f, directory, load_rasters) for p, f in r.items("frames")]
    return SequenceClip(r.string("sequence_id"), r.string("scene_id"), frames, r.integer("start"))


# ---------------------------------------------------------------------------
# raw (unannotated) scenes

_RAW_KEYS = ("schema_version", "scene_id", "room", "background_categories", "objects", "intrinsics", "frames")


def write_raw(raw, directory):
    """Write a rendered scene: its boxes, camera poses and rasters."""
    scene = raw.scene
    frames = []
    K = None
    for i, f in enumerate(raw.frames):
        depth_ref, inst_ref = _raster_names(i)
        write_raster(os.path.join(directory, depth_ref), f.depth)
        write_raster(os.path.join(directory, inst_ref), f.instance)
        frames.append({"index": int(f.index), "pose": pose_to_doc(f.pose), "depth": depth_ref, "instance": inst_ref})
        K = f.intrinsics
    objects = []
    for o in scene.objects:
        d = box_to_doc(o.box)
        objects.append({"instance_id": int(o.instance_id), "category": o.category, **d})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "room": _floats(scene.room),
        "background_categories": list(scene.background_categories),
        "objects": objects,
        "intrinsics": intrinsics_to_doc(K) if K is not None else None,
        "frames": frames,
    }
    _write_text(os.path.join(directory, RAW_SCENE_FILE), dumps(doc))


def read_raw(directory):
    """Inverse of :func:`write_raw`; returns a :class:`box4d.scene.RawSequence`."""
    path = os.path.join(directory, RAW_SCENE_FILE)
    try:
        doc = _load_json(path)
    except FileNotFoundError as e:
        raise SchemaError("raw scene document missing", path) from e
    r = _Reader(doc, "", _RAW_KEYS)
    if r.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {r.get('schema_version')!r}", "schema_version")
    objects = []
    for p, o in r.items("objects"):
        ro = _Reader(o, p, ("instance_id", "category", "box", "rotation"))
        objects.append(synth.SceneObject(ro.integer("instance_id"), ro.string("category"), box_from_doc(ro)))
    bg = r.get("background_categories")
    if not isinstance(bg, list) or not all(isinstance(c, str) for c in bg):
        raise SchemaError("expected a list of strings", "background_categories")
    scene = synth.SceneSpec(tuple(r.numbers("room", 3)), objects, tuple(bg), r.string("scene_id"))
    frame_items = r.items("frames")
    K = intrinsics_from_doc(_Reader(r.get("intrinsics"), "intrinsics", _K_KEYS)) if frame_items else None
    poses, frames = [], []
    for p, f in frame_items:
        rf = _Reader(f, p, ("index", "pose", "depth", "instance"))
        pose = pose_from_doc(rf)
        depth = read_raster(os.path.join(directory, rf.string("depth")))
        inst = read_raster(os.path.join(directory, rf.string("instance")))
        if depth.shape != K.shape or inst.shape != K.shape:
            raise SchemaError(f"raster shape does not match intrinsics {K.shape}", p)
        poses.append(pose)
        frames.append(FrameRecord(rf.integer("index"), pose, K, depth, inst.astype(np.int32)))
    return synth.RawSequence(scene, synth.TrajectorySpec(poses), frames)


# ---------------------------------------------------------------------------
# predictions


@dataclass
class PredictionRecord:
    """One predicted box. ``frame`` is the 0-based position within the sequence."""

    sequence_id: str
    frame: int
    instance_id: int
    box: geo.OrientedBox3D
    score: float
    category: str = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.frame < 0:
            raise ValueError("frame index must be >= 0")


_PRED_KEYS = ("sequence_id", "frame", "instance_id", "box", "rotation", "score", "category")


def prediction_to_doc(p):
    d = box_to_doc(p.box)
    return {
        "sequence_id": p.sequence_id,
        "frame": int(p.frame),
        "instance_id": None if p.instance_id is None else int(p.instance_id),
        "box": d["box"],
        "rotation": d["rotation"],
        "score": float(p.score),
        "category": p.category,
    }


def write_predictions(preds, path):
    """JSON Lines, one prediction per line, in the given order."""
    lines = [json.dumps(prediction_to_doc(p), sort_keys=True, allow_nan=False) for p in preds]
    _write_text(path, "".join(line + "\n" for line in lines))


def read_predictions(path):
    """Parse a predictions file; errors name the 0-based row."""
    out = []
    with open(path, encoding="utf-8") as f:
        for row, line in enumerate(f):
            if not line.strip():
                continue
            where = f"row {row}"
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", where) from e
            r = _Reader(doc, where, _PRED_KEYS)
            inst = r.get("instance_id")
            if inst is not None and (isinstance(inst, bool) or not isinstance(inst, int)):
                raise SchemaError(f"expected an integer or null, got {inst!r}", r._p("instance_id"))
            category = r.string("category", allow_none=True) if "category" in doc else None
            score = r.number("score")
            frame = r.integer("frame")
            try:
                out.append(PredictionRecord(r.string("sequence_id"), frame, inst, box_from_doc(r), score, category))
            except ValueError as e:
                if isinstance(e, SchemaError):
                    raise
                raise SchemaError(str(e), where) from e
    return out


def ground_truth_predictions(clip):
    """The clip's annotations recast as predictions (useful as a perfect baseline)."""
    return [
        PredictionRecord(clip.sequence_id, t, a.instance_id, a.box, a.score, a.category)
        for t, f in enumerate(clip.frames)
        for a in f.objects
    ]


# ---------------------------------------------------------------------------
# manifest and splits


def split_scenes(scene_ids, val_fraction, seed):
    """Deterministic disjoint split of scene ids; returns sorted ``(train, val)`` lists.

    The validation share is ``round(val_fraction * n)`` clamped so that both
    sides are non-empty whenever there are at least two scenes.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    ids = sorted(set(scene_ids))
    n = len(ids)
    if n < 2:
        return ids, []
    n_val = min(max(int(round(val_fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def write_manifest(entries, directory):
    """``entries``: manifest entries with ``split`` tags, written sorted by id."""
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sequence ids in manifest")
    doc = {"schema_version": SCHEMA_VERSION, "sequences": sorted(entries, key=lambda e: e["id"])}
    _write_text(os.path.join(directory, MANIFEST_FILE), dumps(doc))


def read_manifest(directory):
    """Manifest entries with ``path`` resolved relative to ``directory``; checks files exist."""
    path = os.path.join(directory, MANIFEST_FILE)
    try:
        doc = _load_json(path)
    except FileNotFoundError as e:
        raise SchemaError("manifest missing", path) from e
    r = _Reader(doc, "", ("schema_version", "sequences"))
    if r.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {r.get('schema_version')!r}", "schema_version")
    entries, seen = [], set()
    for p, e in r.items("sequences"):
        re_ = _Reader(e, p, ("id", "scene_id", "frames", "path", "split"))
        sid = re_.string("id")
        if sid in seen:
            raise SchemaError(f"duplicate sequence id {sid!r}", re_._p("id"))
        seen.add(sid)
        split = re_.string("split")
        if split not in ("train", "val"):
            raise SchemaError(f"unknown split {split!r}", re_._p("split"))
        full = os.path.join(directory, re_.string("path"))
        if not os.path.isfile(full):
            raise SchemaError(f"sequence file {full} does not exist", re_._p("path"))
        entries.append(
            {"id": sid, "scene_id": re_.string("scene_id"), "frames": re_.integer("frames"), "path": full, "split": split}
        )
    return entries
