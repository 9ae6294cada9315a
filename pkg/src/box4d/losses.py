"""Detection, pose, depth and consistency losses with forward-mode gradients.

Every public loss returns a :class:`LossValue`: the scalar value, its
gradient with respect to the prediction's parameter vector, and, per
parameter, the first-order distance to the nearest non-smooth point met
during evaluation (see :func:`box4d.autodiff.note_branch`).

Each loss is a thin wrapper over a ``*_term`` function that accepts plain
floats or dual numbers. The wrappers seed duals on the prediction; the
terms can also be fed duals seeded elsewhere (e.g. decoder weights), which
is how the decoder gradient check composes them.
"""

import contextlib
import contextvars
from dataclasses import dataclass, field
import math

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .errors import InstanceMismatch, NonPositiveDepth

TAU = 0.1
BOX_PARAM_NAMES = ("x", "y", "z", "w", "h", "l", "yaw")
POSE_PARAM_NAMES = ("tx", "ty", "tz", "qw", "qx", "qy", "qz", "fov")


@dataclass
class BoxParams:
    """Differentiable parameters of a gravity-aligned box."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.dims = np.asarray(self.dims, dtype=float).reshape(3)
        self.yaw = float(self.yaw)

    def vector(self):
        return np.concatenate([self.center, self.dims, [self.yaw]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6], v[6])

    @classmethod
    def from_box(cls, box):
        yaw = box.yaw
        if yaw is None:
            raise ValueError("box is not gravity-aligned")
        return cls(box.center, box.dims, yaw)

    def to_box(self):
        return geo.OrientedBox3D.from_yaw(self.center, self.dims, self.yaw)


@dataclass
class PoseParams:
    """Camera-to-world translation, unit quaternion ``(w, x, y, z)`` and vertical fov."""

    translation: np.ndarray
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    fov: float = 1.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.quaternion = np.asarray(self.quaternion, dtype=float).reshape(4)
        self.fov = float(self.fov)

    def vector(self):
        return np.concatenate([self.translation, self.quaternion, [self.fov]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:7], v[7])

    @classmethod
    def from_transform(cls, T, fov=1.0):
        return cls(T.translation, rotation_to_quaternion(T.rotation), fov)

    def to_transform(self):
        R = np.array(quaternion_to_rotation_generic(list(self.quaternion)), dtype=float)
        return geo.RigidTransform(R, self.translation)


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray
    branch_distance: np.ndarray = None

    def __post_init__(self):
        self.value = float(self.value)
        self.gradient = np.asarray(self.gradient, dtype=float)
        if self.branch_distance is None:
            self.branch_distance = np.full(self.gradient.shape, np.inf)

    def embed(self, offset, size):
        """The same loss seen as a function of a longer vector it occupies a slice of."""
        grad = np.zeros(size)
        dist = np.full(size, np.inf)
        n = self.gradient.size
        grad[offset : offset + n] = self.gradient
        dist[offset : offset + n] = self.branch_distance
        return LossValue(self.value, grad, dist)

    def __add__(self, other):
        if self.gradient.shape != other.gradient.shape:
            raise ValueError("losses are over different parameter vectors")
        return LossValue(
            self.value + other.value,
            self.gradient + other.gradient,
            np.minimum(self.branch_distance, other.branch_distance),
        )


# ---------------------------------------------------------------------------
# rotation helpers


def rotation_to_quaternion(R):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def quaternion_to_rotation_generic(q):
    n = ad.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w, x, y, z = (c / n for c in q)
    return [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]


def _box_parts(p):
    return list(p[0:3]), list(p[3:6]), geo.yaw_rotation_generic(p[6])


def _world_corners(box_p, pose_p):
    """Corners of a camera-frame box moved to the world by a camera-to-world pose."""
    center, dims, rot = _box_parts(box_p)
    corners = geo.corners_generic(center, dims, rot)
    R = quaternion_to_rotation_generic(list(pose_p[3:7]))
    t = pose_p[0:3]
    return [[R[i][0] * c[0] + R[i][1] * c[1] + R[i][2] * c[2] + t[i] for i in range(3)] for c in corners]


def _box_corner_list(box):
    return geo.box_corners(box).tolist()


# ---------------------------------------------------------------------------
# scalar-generic loss terms


def center_term(p, g):
    return abs(p[0] - g[0]) + abs(p[1] - g[1]) + abs(p[2] - g[2])


def depth_term(p, g):
    return abs(p[2] - g[2])


def iou3d_term(p, g):
    return 1.0 - geo.iou3d_generic(*_box_parts(p), *_box_parts(g))


def projected_rect(p, K):
    """Bounding rectangle of the projected corners (all corners must be in front)."""
    corners = geo.corners_generic(*_box_parts(p))
    us, vs = [], []
    for c in corners:
        if not ad.value(c[2]) > 0:
            raise NonPositiveDepth("box corner behind the camera")
        us.append(K.fx * c[0] / c[2] + K.cx)
        vs.append(K.fy * c[1] / c[2] + K.cy)
    x0, x1, y0, y1 = us[0], us[0], vs[0], vs[0]
    for u, v in zip(us[1:], vs[1:]):
        x0, x1 = ad.minimum(x0, u), ad.maximum(x1, u)
        y0, y1 = ad.minimum(y0, v), ad.maximum(y1, v)
    return [x0, y0, x1, y1]


def iou2d_term(p, g, K):
    return 1.0 - geo.iou2d(projected_rect(p, K), projected_rect(g, K))


def corner_term(p, g, squared=False):
    return geo.chamfer_generic(
        geo.corners_generic(*_box_parts(p)), geo.corners_generic(*_box_parts(g)), squared
    )


def dim_term(p, g, tau=TAU):
    """Height L1 plus a softmin over the two (w, l) pairings."""
    wp, hp, lp = p[3], p[4], p[5]
    wg, hg, lg = g[3], g[4], g[5]
    l_h = abs(hp - hg)
    pairs = [abs(wp - wg) + abs(lp - lg), abs(wp - lg) + abs(lp - wg)]
    logits = [-lk / tau for lk in pairs]
    top = ad.maximum(logits[0], logits[1])
    e = [ad.exp(a - top) for a in logits]
    z = e[0] + e[1]
    return l_h + (e[0] / z) * pairs[0] + (e[1] / z) * pairs[1]


def pose_term(p, g):
    """L1 on translation, sign-canonical quaternion and field of view."""
    qp, qg = list(p[3:7]), list(g[3:7])
    ad.note_branch(qp[0])
    if ad.value(qp[0]) < 0:
        qp = [-c for c in qp]
    if ad.value(qg[0]) < 0:
        qg = [-c for c in qg]
    total = 0.0
    for i in range(3):
        total = total + abs(p[i] - g[i])
    for i in range(4):
        total = total + abs(qp[i] - qg[i])
    return total + abs(p[7] - g[7])


def silog_term(pred, gt, lam=1.0):
    """SILog over matching 1-D arrays (plain ndarray or DualArray) of valid depths."""
    g = ad.log(pred) - np.log(gt)
    n = ad.value(g).size
    mean_sq = (g * g).sum() * (1.0 / n)
    mean = g.sum() * (1.0 / n)
    radicand = mean_sq - mean * mean * lam
    if ad.value(radicand) <= 0:
        return radicand * 0.0
    return ad.sqrt(radicand)


def _check_instances(pred_frames, other_frames):
    if len(pred_frames) != len(other_frames):
        raise InstanceMismatch(f"{len(pred_frames)} prediction frames vs {len(other_frames)}")
    for i, (a, b) in enumerate(zip(pred_frames, other_frames)):
        if set(a) != set(b):
            raise InstanceMismatch(f"frame {i}: instances {sorted(a)} vs {sorted(b)}")


def spatial_term(pred_frames, pose_frames, gt_world_frames, squared=False):
    """Sum over frames and instances of world-frame corner Chamfer to the GT."""
    _check_instances(pred_frames, gt_world_frames)
    total = 0.0
    for boxes, pose, gts in zip(pred_frames, pose_frames, gt_world_frames):
        for inst in sorted(boxes):
            total = total + geo.chamfer_generic(
                _world_corners(boxes[inst], pose), _box_corner_list(gts[inst]), squared
            )
    return total


def temporal_term(pred_frames, pose_frames, squared=False):
    """Per instance, mean Chamfer between each frame's world box and the per-corner average."""
    if len(pred_frames) != len(pose_frames):
        raise InstanceMismatch("one pose per frame is required")
    tracks = {}
    for boxes, pose in zip(pred_frames, pose_frames):
        for inst in sorted(boxes):
            tracks.setdefault(inst, []).append(_world_corners(boxes[inst], pose))
    total = 0.0
    for inst in sorted(tracks):
        track = tracks[inst]
        T = len(track)
        mean = [[sum(c[k][i] for c in track) / T for i in range(3)] for k in range(8)]
        per = 0.0
        for corners in track:
            per = per + geo.chamfer_generic(corners, mean, squared)
        total = total + per / T
    return total


# ---------------------------------------------------------------------------
# public losses


_value_only = contextvars.ContextVar("box4d_value_only", default=False)


@contextlib.contextmanager
def values_only():
    """Within this block losses skip differentiation and return zero gradients."""
    token = _value_only.set(True)
    try:
        yield
    finally:
        _value_only.reset(token)


def evaluate(term, x, *args, **kwargs):
    """Run ``term`` on duals seeded at ``x``; returns a :class:`LossValue`."""
    x = np.asarray(x, dtype=float).ravel()
    if _value_only.get():
        return LossValue(float(term(x.tolist(), *args, **kwargs)), np.zeros(x.size))
    duals = ad.seed(x)
    with ad.record_branches(x.size) as rec:
        out = term(duals, *args, **kwargs)
    if isinstance(out, ad.Dual):
        return LossValue(out.val, out.der, rec.distance)
    return LossValue(float(out), np.zeros(x.size), rec.distance)


def _vec(b):
    return b.vector() if hasattr(b, "vector") else np.asarray(b, dtype=float)


def l_center(pred, gt):
    return evaluate(center_term, _vec(pred), _vec(gt).tolist())


def l_d(pred, gt):
    return evaluate(depth_term, _vec(pred), _vec(gt).tolist())


def l_iou3d(pred, gt):
    return evaluate(iou3d_term, _vec(pred), _vec(gt).tolist())


def l_iou2d(pred, gt, K):
    return evaluate(iou2d_term, _vec(pred), _vec(gt).tolist(), K)


def l_corner(pred, gt, squared=False):
    return evaluate(corner_term, _vec(pred), _vec(gt).tolist(), squared=squared)


def l_dim(pred, gt, tau=TAU):
    return evaluate(dim_term, _vec(pred), _vec(gt).tolist(), tau=tau)


def l_pose(pred, gt):
    return evaluate(pose_term, _vec(pred), _vec(gt).tolist())


def silog(depth_pred, depth_gt, lam=1.0, valid=None, chunk=256):
    """SILog between depth maps; gradient w.r.t. every pixel of ``depth_pred``.

    The gradient is built by forward mode in chunks of ``chunk`` tangent
    directions, so memory stays O(pixels * chunk).
    """
    pred = np.asarray(depth_pred, dtype=float)
    gt = np.asarray(depth_gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("depth maps differ in shape")
    if valid is None:
        valid = gt > 0
    valid = np.asarray(valid, dtype=bool)
    p, g = pred[valid], gt[valid]
    if p.size == 0:
        raise ValueError("no valid pixels")
    if np.any(p <= 0) or np.any(g <= 0):
        raise NonPositiveDepth("silog needs strictly positive depths on the valid mask")
    grad_valid = np.zeros(p.size)
    dist_valid = np.full(p.size, np.inf)
    val = float(silog_term(p, g, lam))
    if _value_only.get():
        return LossValue(val, np.zeros(pred.size))
    for start in range(0, p.size, chunk):
        stop = min(start + chunk, p.size)
        der = np.zeros((p.size, stop - start))
        der[np.arange(start, stop), np.arange(stop - start)] = 1.0
        out = silog_term(ad.DualArray(p, der), g, lam)
        grad_valid[start:stop] = out.der.reshape(-1)
    if val < 1e-6:
        # sqrt kink at a scale-only residual
        dist_valid[:] = 0.0
    grad = np.zeros(pred.shape)
    grad[valid] = grad_valid
    dist = np.full(pred.shape, np.inf)
    dist[valid] = dist_valid
    return LossValue(val, grad.ravel(), dist.ravel())


def _frame_layout(pred_frames):
    """Parameter layout: per frame the pose (8) then boxes by instance id (7 each)."""
    layout = []
    for boxes in pred_frames:
        layout.append(sorted(boxes))
    return layout


def flatten_sequence(pred_frames, pose_frames):
    parts = []
    for boxes, pose in zip(pred_frames, pose_frames):
        parts.append(_vec(pose))
        for inst in sorted(boxes):
            parts.append(_vec(boxes[inst]))
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_sequence(x, layout):
    frames, poses, i = [], [], 0
    for insts in layout:
        poses.append(x[i : i + 8])
        i += 8
        boxes = {}
        for inst in insts:
            boxes[inst] = x[i : i + 7]
            i += 7
        frames.append(boxes)
    return frames, poses


def l_spatial(pred_frames, pose_frames, gt_world_frames, squared=False):
    """Spatial consistency loss.

    Args:
        pred_frames: per frame, ``{instance_id: BoxParams}`` in that camera frame.
        pose_frames: per frame, camera-to-world :class:`PoseParams`.
        gt_world_frames: per frame, ``{instance_id: OrientedBox3D}`` in the world frame.

    The gradient follows :func:`flatten_sequence` ordering.
    """
    _check_instances(pred_frames, gt_world_frames)
    layout = _frame_layout(pred_frames)

    def term(x):
        frames, poses = unflatten_sequence(x, layout)
        return spatial_term(frames, poses, gt_world_frames, squared)

    return evaluate(term, flatten_sequence(pred_frames, pose_frames))


def l_temp(pred_frames, pose_frames, squared=False):
    layout = _frame_layout(pred_frames)

    def term(x):
        frames, poses = unflatten_sequence(x, layout)
        return temporal_term(frames, poses, squared)

    return evaluate(term, flatten_sequence(pred_frames, pose_frames))


def total_loss(parts):
    """Unweighted sum of loss values over a shared parameter vector."""
    parts = list(parts)
    if not parts:
        raise ValueError("no loss parts")
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    flagged: np.ndarray

    @property
    def max_rel_error(self):
        ok = ~self.flagged
        return float(self.rel_error[ok].max()) if ok.any() else 0.0

    @property
    def n_flagged(self):
        return int(self.flagged.sum())

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol


def grad_check(fn, x, h=1e-5, floor=1e-6):
    """Compare ``fn(x).gradient`` against central differences.

    ``fn`` maps a parameter vector to a :class:`LossValue`. The relative
    error is ``|g - fd| / max(|g|, |fd|, floor)``. Parameters within ``10 h``
    of a recorded non-smooth point are flagged and excluded from the maximum.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).ravel()
    base = fn(x)
    numeric = np.empty(x.size)
    with values_only():
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            numeric[j] = (fn(xp).value - fn(xm).value) / (2.0 * h)
    analytic = base.gradient
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    flagged = base.branch_distance < 10.0 * h
    return GradCheckResult(analytic, numeric, rel, flagged)


def softmin_bound(pred, gt, tau=TAU):
    """Upper bound ``min(l1, l2) + tau ln 2`` on the (w, l) part of :func:`l_dim`."""
    p, g = _vec(pred), _vec(gt)
    l1 = abs(p[3] - g[3]) + abs(p[5] - g[5])
    l2 = abs(p[3] - g[5]) + abs(p[5] - g[3])
    return min(l1, l2) + tau * math.log(2.0)
