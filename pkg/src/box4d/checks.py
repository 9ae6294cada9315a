"""Randomized verification suites shared by the CLI, the demos and the tests.

:func:`run_loss_suite` samples prediction/ground-truth pairs for every
loss, checks the value at ``pred == gt`` and compares the forward-mode
gradient at a perturbed point against central differences.
:func:`run_decoder_suite` runs the decoder's causality, padding and
gradient checks.
"""

from dataclasses import dataclass
import math
import time

import numpy as np

from . import decoder
from . import geometry as geo
from . import losses as L

LOSS_NAMES = (
    "l_center",
    "l_d",
    "l_iou2d",
    "l_iou3d",
    "l_corner",
    "l_dim",
    "silog",
    "l_pose",
    "l_spatial",
    "l_temp",
    "total_loss",
)

_K = geo.CameraIntrinsics.default()
_N_PIX = 16


def random_box(rng):
    """Box parameters in front of the default camera."""
    return np.concatenate(
        [rng.uniform(-1.0, 1.0, 2), [rng.uniform(3.0, 6.0)], rng.uniform(0.3, 1.5, 3), [rng.uniform(-math.pi, math.pi)]]
    )


def perturb_box(rng, b, scale=0.3):
    out = b.copy()
    out[0:3] += rng.normal(scale=scale, size=3)
    out[3:6] *= np.exp(rng.normal(scale=scale, size=3))
    out[6] += rng.normal(scale=scale)
    return out


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return np.concatenate([rng.normal(size=3), q, [rng.uniform(0.6, 1.4)]])


def _yaw_pose(rng):
    """Camera-to-world pose turning about y only, so camera-frame boxes stay gravity-aligned."""
    a = rng.uniform(-1.0, 1.0)
    return np.concatenate([rng.normal(scale=0.5, size=3), [math.cos(a / 2), 0.0, math.sin(a / 2), 0.0], [1.0]]), a


@dataclass
class _Sequence:
    """Two frames, two instances: GT in world and camera form plus the flat GT vector."""

    layout: list
    gt_world: list
    x_gt: np.ndarray


def _random_sequence(rng, T=2, instances=(1, 2)):
    world = {i: random_box(rng) for i in instances}
    frames, poses, gt_world = [], [], []
    for _ in range(T):
        pv, a = _yaw_pose(rng)
        pose = geo.RigidTransform(geo.yaw_matrix(a), pv[:3])
        boxes = {}
        for i, wb in world.items():
            box = geo.transform_box(pose.inverse(), L.BoxParams.from_vector(wb).to_box())
            boxes[i] = L.BoxParams.from_box(box)
        frames.append(boxes)
        poses.append(L.PoseParams.from_vector(pv))
        gt_world.append({i: L.BoxParams.from_vector(wb).to_box() for i, wb in world.items()})
    return _Sequence(L._frame_layout(frames), gt_world, L.flatten_sequence(frames, poses))


def _seq_parts(x, seq):
    frames, poses = L.unflatten_sequence(x, seq.layout)
    bf = [{i: L.BoxParams.from_vector(v) for i, v in f.items()} for f in frames]
    pf = [L.PoseParams.from_vector(p) for p in poses]
    return bf, pf


def make_case(name, rng):
    """``(fn, x_gt, x_pred)`` for loss ``name``; ``fn(x)`` returns a :class:`LossValue`."""
    if name in ("l_center", "l_d", "l_iou3d", "l_corner", "l_dim"):
        g = random_box(rng)
        f = getattr(L, name)
        return (lambda x: f(x, g)), g, perturb_box(rng, g)
    if name == "l_iou2d":
        g = random_box(rng)
        return (lambda x: L.l_iou2d(x, g, _K)), g, perturb_box(rng, g)
    if name == "l_pose":
        g = random_pose(rng)
        p = g + rng.normal(scale=0.2, size=8)
        return (lambda x: L.l_pose(x, g)), g, p
    if name == "silog":
        g = rng.uniform(0.5, 8.0, _N_PIX)
        lam = float(rng.uniform(0.0, 1.0))
        return (lambda x: L.silog(x, g, lam)), g, g * np.exp(rng.normal(scale=0.3, size=_N_PIX))
    if name in ("l_spatial", "l_temp"):
        seq = _random_sequence(rng)
        if name == "l_spatial":
            fn = lambda x: L.l_spatial(*_seq_parts(x, seq), seq.gt_world)  # noqa: E731
        else:
            fn = lambda x: L.l_temp(*_seq_parts(x, seq))  # noqa: E731
        return fn, seq.x_gt, seq.x_gt + rng.normal(scale=0.1, size=seq.x_gt.size)
    if name == "total_loss":
        return _total_case(rng)
    raise KeyError(name)


def _total_case(rng, n_pix=8):
    # one instance keeps the finite-difference sweep affordable; every term is still present
    seq = _random_sequence(rng, instances=(1,))
    n_seq = seq.x_gt.size
    depth_gt = rng.uniform(0.5, 8.0, n_pix)
    size = n_seq + n_pix
    gt_frames, gt_poses = L.unflatten_sequence(seq.x_gt, seq.layout)

    def fn(x):
        parts = [L.l_spatial(*_seq_parts(x[:n_seq], seq), seq.gt_world).embed(0, size)]
        parts.append(L.l_temp(*_seq_parts(x[:n_seq], seq)).embed(0, size))
        off = 0
        for insts, gf, gp in zip(seq.layout, gt_frames, gt_poses):
            parts.append(L.l_pose(x[off : off + 8], gp).embed(off, size))
            off += 8
            for inst in insts:
                p, g = x[off : off + 7], gf[inst]
                for f in (L.l_center, L.l_d, L.l_iou3d, L.l_corner, L.l_dim):
                    parts.append(f(p, g).embed(off, size))
                parts.append(L.l_iou2d(p, g, _K).embed(off, size))
                off += 7
        parts.append(L.silog(x[n_seq:], depth_gt).embed(n_seq, size))
        return L.total_loss(parts)

    x_gt = np.concatenate([seq.x_gt, depth_gt])
    x_pred = x_gt + np.concatenate([rng.normal(scale=0.05, size=n_seq), np.zeros(n_pix)])
    x_pred[n_seq:] = depth_gt * np.exp(rng.normal(scale=0.3, size=n_pix))
    return fn, x_gt, x_pred


@dataclass
class LossCheckRow:
    name: str
    n_points: int
    max_identity_value: float
    max_rel_error: float
    n_flagged: int
    seconds: float
    tol: float = 1e-4
    identity_tol: float = 1e-12

    @property
    def passed(self):
        return self.max_identity_value <= self.identity_tol and self.max_rel_error < self.tol


def run_loss_suite(n_points=100, seed=0, h=1e-5, tol=1e-4, names=LOSS_NAMES, inject=None):
    """One :class:`LossCheckRow` per loss.

    Args:
        inject: optional ``{loss name: offset}`` added to the first analytic
            gradient component, to demonstrate that the checker fails.
    """
    rows = []
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        worst_id, worst_rel, flagged = 0.0, 0.0, 0
        for _ in range(n_points):
            fn, x_gt, x_pred = make_case(name, rng)
            worst_id = max(worst_id, abs(fn(x_gt).value))
            check_fn = fn
            if inject and name in inject:
                def check_fn(x, fn=fn, off=inject[name]):
                    v = fn(x)
                    g = v.gradient.copy()
                    g[0] += off
                    return L.LossValue(v.value, g, v.branch_distance)
            res = L.grad_check(check_fn, x_pred, h=h)
            worst_rel = max(worst_rel, res.max_rel_error)
            flagged += res.n_flagged
        rows.append(LossCheckRow(name, n_points, worst_id, worst_rel, flagged, time.perf_counter() - t0, tol))
    return rows


def format_loss_table(rows, seed):
    lines = [f"{'loss':<12} {'seed':>5} {'points':>6} {'max|L(gt,gt)|':>14} {'max rel.err':>12} {'flagged':>8}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<12} {seed:>5} {r.n_points:>6} {r.max_identity_value:>14.3e} {r.max_rel_error:>12.3e} "
            f"{r.n_flagged:>8}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)


@dataclass
class DecoderReport:
    shapes: dict
    causality: dict
    padding: float
    grad: decoder.DecoderGradCheck
    tol_causal: float = 1e-6
    tol_grad: float = 1e-3

    @property
    def causal_ok(self):
        return all(v <= self.tol_causal for v in self.causality.values())

    @property
    def padding_ok(self):
        return self.padding <= self.tol_causal

    @property
    def grad_ok(self):
        return self.grad.result.max_rel_error < self.tol_grad

    @property
    def passed(self):
        return self.causal_ok and self.padding_ok and self.grad_ok

    def text(self):
        out = ["shapes:"]
        out += [f"  {k:<10} {v}" for k, v in self.shapes.items()]
        out.append("causality (max change at frames <= t):")
        out += [f"  {k:<10} {v:.3e}  {'PASS' if v <= self.tol_causal else 'FAIL'}" for k, v in self.causality.items()]
        out.append(f"padding neutrality: {self.padding:.3e}  {'PASS' if self.padding_ok else 'FAIL'}")
        r = self.grad.result
        out.append(
            f"gradient check: max rel.err {r.max_rel_error:.3e} over {len(r.rel_error)} parameters, "
            f"{r.n_flagged} flagged  {'PASS' if self.grad_ok else 'FAIL'}"
        )
        out.append(self.grad.table())
        return "\n".join(out)


def run_decoder_suite(T=4, N=3, M=5, d=32, trials=50, seed=0, mode="frame", grad_params=40, corrupt=None):
    weights = decoder.DecoderWeights.init(d, seed=seed)
    tok, eimg, egeo = decoder.random_inputs(T, N, M, d, seed)
    states = decoder.decoder_forward(tok, eimg, egeo, weights, mode=mode)
    box, pose = decoder.heads_forward(states, weights)
    shapes = {"tokens": tok.shape, "E_img": eimg.shape, "E_geo": egeo.shape, "states": states.shape,
              "boxes": box.shape, "poses": pose.shape}
    causal = decoder.causality_trials(weights, T, N, M, trials, seed, mode)
    pad = decoder.padding_trials(weights, T=3, M=M, seed=seed)
    grad = decoder.gradient_check(T=3, N=2, d=16, n_params=grad_params, seed=seed, corrupt=corrupt)
    return DecoderReport(shapes, causal, pad, grad)
