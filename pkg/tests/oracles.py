"""Independent reference implementations used only by the tests."""

import math

import numpy as np


def mc_intersection(a, b, n, rng):
    """Monte-Carlo estimate of vol(a & b): uniform samples in a, fraction inside b."""
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * a.dims
    pts = local @ a.rotation.T + a.center
    inside = np.all(np.abs((pts - b.center) @ b.rotation) <= b.dims / 2, axis=1)
    return inside.mean() * a.volume


def mc_iou(a, b, n, rng):
    inter = mc_intersection(a, b, n, rng)
    return inter / (a.volume + b.volume - inter)


def axis_aligned_iou(c1, d1, c2, d2):
    lo = np.maximum(np.subtract(c1, np.divide(d1, 2)), np.subtract(c2, np.divide(d2, 2)))
    hi = np.minimum(np.add(c1, np.divide(d1, 2)), np.add(c2, np.divide(d2, 2)))
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    return inter / (np.prod(d1) + np.prod(d2) - inter)


def brute_chamfer(A, B):
    def one_way(P, Q):
        return sum(min(math.dist(p, q) for q in Q) for p in P) / len(P)

    return 0.5 * (one_way(A, B) + one_way(B, A))


def brute_corners(center, dims, R):
    """Corners by enumeration of sign triples in bit order (bit0 -> x)."""
    out = []
    for b in range(8):
        s = np.array([1 if (b >> k) & 1 else -1 for k in range(3)], dtype=float)
        out.append(np.asarray(center) + np.asarray(R) @ (s * np.asarray(dims) / 2))
    return np.array(out)


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def brute_ap(flags, n_gt):
    """All-points AP by enumerating recall levels and taking max precision at recall >= r."""
    tp = fp = 0
    pts = []
    for f in flags:
        tp += f
        fp += not f
        pts.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for r, _ in pts:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in pts if rr >= r)
            prev = r
    return ap


def brute_match(pred_boxes, scores, gt_boxes, tau, iou):
    """Greedy matching by descending score via exhaustive IoU table."""
    order = sorted(range(len(pred_boxes)), key=lambda i: -scores[i])
    taken, tp = set(), []
    for i in order:
        cand = [(iou(pred_boxes[i], g), -j) for j, g in enumerate(gt_boxes) if j not in taken]
        cand = [c for c in cand if c[0] >= tau]
        if cand:
            _, mj = max(cand)
            taken.add(-mj)
            tp.append(True)
        else:
            tp.append(False)
    return tp


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )

