"""Coordinate frames, pinhole projection and oriented-box geometry.

Conventions
-----------
* Camera frames are x right, y down, z forward. Reference ("world") frames
  of a clip are camera frames, so their vertical axis is -y.
* The synthetic room frame used by :mod:`box4d.scene` is z-up; it never
  leaves the generator.
* A box stores its dimensions ``(w, h, l)`` along its local x, y and z axes.
  A box is *gravity-aligned* when its rotation is a pure rotation about the
  y axis; ``yaw`` is that angle.
* Pixel ``(col, row)`` has its center at ``u = col, v = row``.

The scalar kernels (``corners_generic``, ``box_planes``,
``clip_polytope``, ``polytope_volume``, ``chamfer_generic``) accept plain
floats or :class:`box4d.autodiff.Dual` values, so the loss module
differentiates exactly the code that the value path evaluates.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .errors import EmptySet, NonPositiveDepth

ORTHO_TOL = 1e-9
GRAVITY_TOL = 1e-6
CLIP_EPS = 1e-10

# Corner b has sign (-1)**(1 - bit) on the axis given by bit0 -> x, bit1 -> y, bit2 -> z.
CORNER_SIGNS = np.array(
    [[1 if (b >> k) & 1 else -1 for k in range(3)] for b in range(8)], dtype=float
)

# Faces as corner-index loops, counter-clockwise seen from outside the box.
BOX_FACES = (
    (1, 3, 7, 5),  # +x
    (0, 4, 6, 2),  # -x
    (2, 6, 7, 3),  # +y
    (0, 1, 5, 4),  # -y
    (4, 5, 7, 6),  # +z
    (0, 2, 3, 1),  # -z
)


def yaw_matrix(yaw):
    """Rotation by ``yaw`` radians about the y axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_rotation_generic(yaw):
    c, s = ad.cos(yaw), ad.sin(yaw)
    return [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]


def _check_rotation(R, name="rotation"):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError(f"{name} is not a proper rotation")
    return R


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls):
        return cls(fx=110.0, fy=110.0, cx=64.0, cy=64.0, width=128, height=128)

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def vertical_fov(self):
        return 2.0 * math.atan2(self.height / 2.0, self.fy)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return RigidTransform(
                self.rotation @ other.rotation,
                self.rotation @ other.translation + self.translation,
            )
        return NotImplemented

    def apply(self, points):
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    center: np.ndarray
    dims: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        d = np.asarray(self.dims, dtype=float).reshape(3)
        if np.any(d < 0) or not np.all(np.isfinite(d)) or not np.all(np.isfinite(c)):
            raise ValueError(f"invalid box center/dims {c} {d}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))

    @classmethod
    def from_yaw(cls, center, dims, yaw):
        return cls(center, dims, yaw_matrix(yaw))

    @property
    def yaw(self):
        """Yaw about y, or ``None`` when the box is not gravity-aligned."""
        R = self.rotation
        yaw = math.atan2(R[0, 2], R[0, 0])
        if np.max(np.abs(yaw_matrix(yaw) - R)) <= GRAVITY_TOL:
            return yaw
        return None

    @property
    def volume(self):
        return float(np.prod(self.dims))

    @property
    def is_degenerate(self):
        return bool(np.any(self.dims <= 0))

    def corners(self):
        return box_corners(self)

    def same_as(self, other, atol=0.0):
        return (
            np.allclose(self.center, other.center, rtol=0, atol=atol)
            and np.allclose(self.dims, other.dims, rtol=0, atol=atol)
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"OrientedBox3D(center={self.center.tolist()}, dims={self.dims.tolist()}, yaw={self.yaw})"


# ---------------------------------------------------------------------------
# projection


def project(p, K):
    """Project a camera-frame point; returns ``(u, v, depth)``."""
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def backproject(pixel, depth, K):
    u, v = pixel
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth} is not positive")
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, float(depth)])


def project_points(points, K):
    """Vectorized projection of (N, 3) points; entries with z <= 0 come back as nan."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, K.fx * points[:, 0] / z + K.cx, np.nan)
        v = np.where(z > 0, K.fy * points[:, 1] / z + K.cy, np.nan)
    return u, v, z


def backproject_pixels(cols, rows, depths, K):
    cols = np.asarray(cols, dtype=float)
    rows = np.asarray(rows, dtype=float)
    depths = np.asarray(depths, dtype=float)
    if np.any(depths <= 0):
        raise NonPositiveDepth("all depths must be positive")
    return np.stack(
        [(cols - K.cx) * depths / K.fx, (rows - K.cy) * depths / K.fy, depths], axis=-1
    )


def pixel_index(u, v, K):
    """Nearest pixel ``(col, row)`` for image coordinates, and an in-image flag."""
    col = np.floor(np.asarray(u, dtype=float) + 0.5)
    row = np.floor(np.asarray(v, dtype=float) + 0.5)
    ok = np.isfinite(col) & np.isfinite(row)
    ok &= (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    col = np.where(ok, col, 0).astype(np.int64)
    row = np.where(ok, row, 0).astype(np.int64)
    return col, row, ok


# ---------------------------------------------------------------------------
# boxes


def box_corners(box):
    """The 8 corners of ``box`` in canonical bit order, shape (8, 3)."""
    local = CORNER_SIGNS * (box.dims / 2.0)
    return local @ box.rotation.T + box.center


def corners_generic(center, dims, rotation):
    """Scalar-generic :func:`box_corners`; returns a list of 8 ``[x, y, z]``."""
    half = [d * 0.5 for d in dims]
    out = []
    for signs in CORNER_SIGNS:
        local = [half[k] * signs[k] for k in range(3)]
        out.append(
            [
                center[i] + rotation[i][0] * local[0] + rotation[i][1] * local[1] + rotation[i][2] * local[2]
                for i in range(3)
            ]
        )
    return out


def transform_box(T, box):
    return OrientedBox3D(T.rotation @ box.center + T.translation, box.dims.copy(), T.rotation @ box.rotation)


def tight_fitting_box(points, rotation):
    """Smallest box with the given orientation containing every point."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if P.shape[0] == 0:
        raise EmptySet("cannot fit a box to an empty point set")
    R = np.asarray(rotation, dtype=float)
    local = P @ R
    lo, hi = local.min(axis=0), local.max(axis=0)
    return OrientedBox3D(R @ ((lo + hi) / 2.0), hi - lo, R)


def points_in_box(points, box, tol=0.0):
    local = (np.asarray(points, dtype=float) - box.center) @ box.rotation
    return np.all(np.abs(local) <= box.dims / 2.0 + tol, axis=-1)


# ---------------------------------------------------------------------------
# convex polytope clipping (scalar-generic)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def box_polytope(corners):
    """Face loops (lists of points) of a box given its canonical corners."""
    return [[corners[i] for i in face] for face in BOX_FACES]


def box_planes(center, dims, rotation):
    """Half-spaces ``n . x <= d`` bounding a box, as ``(n, d)`` pairs."""
    planes = []
    for k in range(3):
        axis = [rotation[0][k], rotation[1][k], rotation[2][k]]
        c = _dot(axis, center)
        half = dims[k] * 0.5
        planes.append((axis, c + half))
        planes.append(([-axis[0], -axis[1], -axis[2]], -c + half))
    return planes


def _order_cap(points, normal):
    """Order coplanar points counter-clockwise about ``normal`` (by value)."""
    P = [[ad.value(c) for c in p] for p in points]
    n = [ad.value(c) for c in normal]
    k = min(range(3), key=lambda i: abs(n[i]))
    ref = [0.0, 0.0, 0.0]
    ref[k] = 1.0
    u = _cross(n, ref)
    v = _cross(n, u)
    m = [sum(p[i] for p in P) / len(P) for i in range(3)]
    ang = []
    for p in P:
        r = _sub(p, m)
        ang.append(math.atan2(_dot(r, v), _dot(r, u)))
    order = sorted(range(len(points)), key=ang.__getitem__)
    return [points[i] for i in order]


def _dedupe(points, tol=1e-12):
    out, seen = [], []
    for p in points:
        x, y, z = (ad.value(c) for c in p)
        if any(abs(x - a) <= tol and abs(y - b) <= tol and abs(z - c) <= tol for a, b, c in seen):
            continue
        seen.append((x, y, z))
        out.append(p)
    return out


def clip_polytope(faces, normal, offset, eps=CLIP_EPS):
    """Clip a convex polytope (outward face loops) by ``normal . x <= offset``."""
    new_faces, cap = [], []
    coplanar = False
    for face in faces:
        dist = [_dot(normal, p) - offset for p in face]
        for dv in dist:
            ad.note_branch(dv)
        dval = [ad.value(dv) for dv in dist]
        inside = [v <= eps for v in dval]
        if all(abs(v) <= eps for v in dval):
            coplanar = True
        out = []
        for i in range(len(face)):
            e, de = face[i], dist[i]
            s_in, e_in = inside[i - 1], inside[i]
            if e_in != s_in:
                s, ds = face[i - 1], dist[i - 1]
                t = ds / (ds - de)
                x = [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]), s[2] + t * (e[2] - s[2])]
                out.append(x)
                cap.append(x)
            if e_in:
                out.append(e)
                if abs(dval[i]) <= eps:
                    cap.append(e)
        if len(out) >= 3:
            new_faces.append(out)
    if not coplanar:
        cap = _dedupe(cap)
        if len(cap) >= 3:
            new_faces.append(_order_cap(cap, normal))
    return new_faces


def polytope_volume(faces):
    """Volume of a closed polytope from outward face loops (divergence theorem)."""
    if not faces:
        return 0.0
    o = [ad.value(c) for c in faces[0][0]]
    vol = 0.0
    for face in faces:
        p0 = _sub(face[0], o)
        for i in range(1, len(face) - 1):
            vol = vol + _dot(p0, _cross(_sub(face[i], o), _sub(face[i + 1], o)))
    return vol / 6.0


def intersection_volume_generic(center_a, dims_a, rot_a, center_b, dims_b, rot_b):
    """Exact volume of box A intersected with box B (scalar-generic)."""
    faces = box_polytope(corners_generic(center_a, dims_a, rot_a))
    for n, d in box_planes(center_b, dims_b, rot_b):
        faces = clip_polytope(faces, n, d)
        if not faces:
            return 0.0
    vol = polytope_volume(faces)
    if ad.value(vol) < 0:
        return 0.0
    return vol


def _as_generic(box):
    return box.center.tolist(), box.dims.tolist(), box.rotation.tolist()


def iou3d_generic(center_a, dims_a, rot_a, center_b, dims_b, rot_b):
    vol_a = dims_a[0] * dims_a[1] * dims_a[2]
    vol_b = dims_b[0] * dims_b[1] * dims_b[2]
    if ad.value(vol_a) <= 0 or ad.value(vol_b) <= 0:
        return 0.0
    # bounding-sphere rejection
    ra = 0.5 * math.sqrt(sum(ad.value(d) ** 2 for d in dims_a))
    rb = 0.5 * math.sqrt(sum(ad.value(d) ** 2 for d in dims_b))
    gap = math.sqrt(sum((ad.value(center_a[i]) - ad.value(center_b[i])) ** 2 for i in range(3)))
    if gap > ra + rb:
        return 0.0
    inter = intersection_volume_generic(center_a, dims_a, rot_a, center_b, dims_b, rot_b)
    iou = inter / (vol_a + vol_b - inter)
    if ad.value(iou) > 1.0:
        return 1.0
    return iou


def iou3d(a, b):
    """Exact IoU of two oriented boxes; 0 when either is degenerate."""
    if a.is_degenerate or b.is_degenerate:
        return 0.0
    # clip the smaller box so the symmetric result is computed the same way both ways round
    if (b.volume, tuple(b.center), tuple(b.dims)) < (a.volume, tuple(a.center), tuple(a.dims)):
        a, b = b, a
    return float(iou3d_generic(*_as_generic(a), *_as_generic(b)))


def clip_box_vertices(box, normal, offset):
    """Vertices of ``box`` intersected with the half-space ``normal . x <= offset``."""
    faces = box_polytope(corners_generic(*_as_generic(box)))
    faces = clip_polytope(faces, list(normal), float(offset))
    pts = [p for f in faces for p in f]
    if not pts:
        return np.zeros((0, 3))
    return np.unique(np.round(np.array(pts, dtype=float), 12), axis=0)


# ---------------------------------------------------------------------------
# 2D rectangles


def iou2d(a, b):
    """IoU of axis-aligned rectangles ``(x0, y0, x1, y1)``; scalar-generic."""
    ix = ad.minimum(a[2], b[2]) - ad.maximum(a[0], b[0])
    iy = ad.minimum(a[3], b[3]) - ad.maximum(a[1], b[1])
    if ad.value(ix) <= 0 or ad.value(iy) <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if ad.value(union) <= 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Chamfer distance


def chamfer(A, B, squared=False):
    """Symmetric mean nearest-neighbour distance between two point sets."""
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise EmptySet("chamfer needs two non-empty point sets")
    D = cdist(A, B, "sqeuclidean" if squared else "euclidean")
    return 0.5 * (D.min(axis=1).mean() + D.min(axis=0).mean())


def _nn_mean(src, dst, squared):
    # neighbours are chosen on values; only the chosen pair and the runner-up
    # (for the tie distance) are evaluated generically
    sv = np.array([[ad.value(c) for c in p] for p in src], dtype=float)
    dv = np.array([[ad.value(c) for c in q] for q in dst], dtype=float)
    order = np.argsort(cdist(sv, dv, "sqeuclidean"), axis=1, kind="stable")
    total = 0.0
    for i, p in enumerate(src):
        d = _sub(p, dst[order[i, 0]])
        best = _dot(d, d)
        if len(dst) > 1:
            e = _sub(p, dst[order[i, 1]])
            ad.note_branch(_dot(e, e) - best)
        if squared:
            total = total + best
        else:
            ad.note_branch_norm(d)
            total = total + ad.sqrt(best)
    return total / len(src)


def _is_plain(points):
    return not any(isinstance(c, ad.Dual) for p in points for c in p)


def chamfer_generic(A, B, squared=False):
    """Scalar-generic :func:`chamfer` over lists of ``[x, y, z]``."""
    if not A or not B:
        raise EmptySet("chamfer needs two non-empty point sets")
    if _is_plain(A) and _is_plain(B):
        return float(chamfer(A, B, squared))
    return 0.5 * (_nn_mean(A, B, squared) + _nn_mean(B, A, squared))
