"""A tiny causal spatiotemporal decoder and its output heads.

The decoder is three causal attention blocks (CABs). Each block runs
masked self-attention over object tokens, then attention in both directions
between tokens and a set of per-frame embeddings. Block A pairs tokens with
image embeddings, block B pairs them with geometry embeddings and its
updated embeddings become the geometry control embedding, and block C fuses
block A's tokens (queries) with that control embedding.

Causality is enforced at frame granularity: a position in frame ``t`` only
sees positions in frames ``<= t``. Padded query slots are never used as
keys, so they cannot change any real output.

All functions accept plain ndarrays or :class:`box4d.autodiff.DualArray`
values, which is how :func:`gradient_check` differentiates the whole stack
in forward mode.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import losses
from .annotate import rereference
from .errors import DimMismatch
from .records import SequenceClip

LN_EPS = 1e-5
_MASKED = -1e30
BLOCKS = ("A", "B", "C")
_ATTN = ("self", "t2e", "e2t")


# ---------------------------------------------------------------------------
# masks and attention


def frame_ids(T, N):
    return np.repeat(np.arange(T), N)


def build_causal_mask(T, N, mode="frame"):
    """Boolean ``(T*N, T*N)`` mask; ``mask[i, j]`` means position ``i`` may attend to ``j``.

    ``mode="frame"`` allows full attention inside a frame and none to later
    frames. ``mode="token"`` is the strict per-position lower triangle.
    """
    if T < 1 or N < 1:
        raise ValueError("T and N must be >= 1")
    if mode == "frame":
        f = frame_ids(T, N)
        return f[None, :] <= f[:, None]
    if mode == "token":
        return np.tril(np.ones((T * N, T * N), dtype=bool))
    raise ValueError(f"unknown mask mode {mode!r}")


def build_cross_mask(T, Nq, Nk):
    """Frame-causal mask between two different token sets."""
    fq, fk = frame_ids(T, Nq), frame_ids(T, Nk)
    return fk[None, :] <= fq[:, None]


def attention(Q, K, V, mask=None):
    """Scaled dot-product attention over the last two axes.

    Disallowed entries get zero weight. A query with no allowed key returns
    a zero row.
    """
    q_shape, k_shape, v_shape = np.shape(ad.value(Q)), np.shape(ad.value(K)), np.shape(ad.value(V))
    if q_shape[-1] != k_shape[-1]:
        raise DimMismatch(f"query dim {q_shape[-1]} != key dim {k_shape[-1]}")
    if k_shape[-2] != v_shape[-2]:
        raise DimMismatch(f"{k_shape[-2]} keys but {v_shape[-2]} values")
    Lq, Lk = q_shape[-2], k_shape[-2]
    mask = np.ones((Lq, Lk), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (Lq, Lk):
        raise DimMismatch(f"mask shape {mask.shape} != {(Lq, Lk)}")
    KT = K.mT if isinstance(K, ad.DualArray) else np.swapaxes(K, -1, -2)
    scores = (Q @ KT) * (1.0 / math.sqrt(q_shape[-1]))
    sv = ad.value(scores)
    # row max over allowed keys only; a constant shift leaves softmax unchanged
    top = np.where(mask, sv, -np.inf).max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = ad.where(mask, scores - top, _MASKED)
    e = ad.exp(shifted)
    z = ad.value(e).sum(axis=-1, keepdims=True)
    has_key = mask.any(axis=-1, keepdims=True)
    denom = e.sum(axis=-1, keepdims=True) if isinstance(e, ad.DualArray) else z
    safe = ad.where(has_key, denom, 1.0)
    weights = ad.where(has_key, e / safe, 0.0)
    return weights @ V


def attention_weights(Q, K, mask=None):
    """The attention matrix itself (plain arrays only), for inspection and tests."""
    d = Q.shape[-1]
    Lq, Lk = Q.shape[-2], K.shape[-2]
    mask = np.ones((Lq, Lk), dtype=bool) if mask is None else mask
    s = Q @ np.swapaxes(K, -1, -2) / math.sqrt(d)
    s = np.where(mask, s, -np.inf)
    top = s.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(s - top), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.where(z > 0, e / np.where(z > 0, z, 1.0), 0.0)


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True) if isinstance(x, ad.DualArray) else np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True) if isinstance(xc, ad.DualArray) else np.mean(xc * xc, -1, keepdims=True)
    return xc / ad.sqrt(var + LN_EPS) * gain + bias


# ---------------------------------------------------------------------------
# weights


@dataclass
class DecoderWeights:
    """Named parameter arrays of the three blocks and both heads.

    Names look like ``"A.self.Wq"``, ``"B.t2e.ln_k.g"``, ``"box.W"``.
    """

    d: int
    params: dict

    @classmethod
    def init(cls, d=32, seed=0, scale=1.0):
        """Draw weights from ``numpy.random.default_rng(seed)`` in sorted name order.

        Projection matrices are N(0, scale^2 / d); head matrices are ten times
        smaller; layer-norm gains are 1 and every bias is 0.
        """
        if d < 1:
            raise ValueError("d must be >= 1")
        shapes = cls.shapes(d)
        rng = np.random.default_rng(seed)
        params = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if name.endswith(".g"):
                params[name] = np.ones(shape)
            elif name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name.startswith(("box.", "pose.")):
                params[name] = rng.normal(0.0, 0.1 * scale / math.sqrt(d), shape)
            else:
                params[name] = rng.normal(0.0, scale / math.sqrt(d), shape)
        return cls(d, params)

    @staticmethod
    def shapes(d):
        out = {}
        for blk in BLOCKS:
            for att in _ATTN:
                for m in ("Wq", "Wk", "Wv", "Wo"):
                    out[f"{blk}.{att}.{m}"] = (d, d)
                for ln in ("ln_q", "ln_k"):
                    out[f"{blk}.{att}.{ln}.g"] = (d,)
                    out[f"{blk}.{att}.{ln}.b"] = (d,)
        out["box.W"], out["box.b"] = (d, 7), (7,)
        out["pose.W"], out["pose.b"] = (d, 8), (8,)
        return out

    def replace(self, **updates):
        """Copy with some parameters swapped (keys use ``__`` for ``.``)."""
        params = dict(self.params)
        for k, v in updates.items():
            params[k.replace("__", ".")] = v
        return DecoderWeights(self.d, params)

    def with_zero_outputs(self):
        """Every attention output projection set to zero: each block becomes the identity."""
        params = {k: (np.zeros_like(v) if k.endswith(".Wo") else v) for k, v in self.params.items()}
        return DecoderWeights(self.d, params)


def _check_dims(x, d, what):
    shape = np.shape(ad.value(x))
    if len(shape) != 3 or shape[-1] != d:
        raise DimMismatch(f"{what} must be (T, n, {d}), got {shape}")
    return shape


# ---------------------------------------------------------------------------
# blocks


def _attend(w, prefix, q_in, kv_in, mask):
    P = w.params
    q = layer_norm(q_in, P[f"{prefix}.ln_q.g"], P[f"{prefix}.ln_q.b"])
    kv = layer_norm(kv_in, P[f"{prefix}.ln_k.g"], P[f"{prefix}.ln_k.b"])
    out = attention(q @ P[f"{prefix}.Wq"], kv @ P[f"{prefix}.Wk"], kv @ P[f"{prefix}.Wv"], mask)
    return out @ P[f"{prefix}.Wo"]


def _flat(x):
    s = np.shape(ad.value(x))
    return x.reshape(s[0] * s[1], s[2])


def cab_forward(tokens, embeddings, weights, block="A", token_mask=None, mode="frame"):
    """One causal attention block; returns ``(tokens', embeddings')`` with input shapes.

    Args:
        tokens: ``(T, N, d)`` query tokens.
        embeddings: ``(T, M, d)`` per-frame embeddings.
        weights: :class:`DecoderWeights`.
        block: which block's parameters to use.
        token_mask: ``(T, N)`` bool, False for padded slots. Padded slots are
            never attended to and come out as zeros.
        mode: self-attention mask granularity, see :func:`build_causal_mask`.
    """
    d = weights.d
    T, N, _ = _check_dims(tokens, d, "tokens")
    Te, M, _ = _check_dims(embeddings, d, "embeddings")
    if Te != T:
        raise DimMismatch(f"tokens have {T} frames, embeddings {Te}")
    valid = np.ones((T, N), dtype=bool) if token_mask is None else np.asarray(token_mask, dtype=bool)
    if valid.shape != (T, N):
        raise DimMismatch(f"token mask shape {valid.shape} != {(T, N)}")
    keep = valid.reshape(T * N)
    t = _flat(tokens)
    e = _flat(embeddings)

    self_mask = build_causal_mask(T, N, mode) & keep[None, :]
    t = t + _attend(weights, f"{block}.self", t, t, self_mask)
    t2e_mask = build_cross_mask(T, N, M)
    t = t + _attend(weights, f"{block}.t2e", t, e, t2e_mask)
    e2t_mask = build_cross_mask(T, M, N) & keep[None, :]
    e = e + _attend(weights, f"{block}.e2t", e, t, e2t_mask)

    t = ad.where(keep[:, None], t, 0.0)
    return t.reshape(T, N, d), e.reshape(T, M, d)


def decoder_forward(tokens, E_img, E_geo, weights, token_mask=None, mode="frame", return_all=False):
    """Implicit per-query states ``(T, N, d)``.

    With ``return_all`` a dict of every intermediate (``"A"``, ``"B"``,
    ``"G_control"``, ``"C"``) is returned as well.
    """
    tA, eA = cab_forward(tokens, E_img, weights, "A", token_mask, mode)
    tB, g_control = cab_forward(tokens, E_geo, weights, "B", token_mask, mode)
    tC, eC = cab_forward(tA, g_control, weights, "C", token_mask, mode)
    if return_all:
        return tC, {"A": (tA, eA), "B": (tB, g_control), "G_control": g_control, "C": (tC, eC)}
    return tC


def heads_forward(states, weights, token_mask=None):
    """Box parameters ``(T, N, 7)`` and pose parameters ``(T, 8)``.

    Box: ``[x, y, z, w, h, l, yaw]`` with softplus dimensions. Pose:
    translation, unit quaternion ``(w, x, y, z)`` as the normalized sum of the
    identity and a head offset, and a softplus field of view, computed from
    the mean of the frame's valid states.
    """
    P = weights.params
    T, N, d = _check_dims(states, weights.d, "states")
    valid = np.ones((T, N), dtype=bool) if token_mask is None else np.asarray(token_mask, dtype=bool)

    raw = states @ P["box.W"] + P["box.b"]
    box = ad.concatenate([raw[..., 0:3], ad.softplus(raw[..., 3:6]), raw[..., 6:7]], axis=-1)

    counts = valid.sum(axis=1)
    weights_pool = valid / np.maximum(counts, 1)[:, None]
    pooled = (states * weights_pool[:, :, None]).sum(axis=1) if isinstance(states, ad.DualArray) else (
        (states * weights_pool[:, :, None]).sum(axis=1)
    )
    out = pooled @ P["pose.W"] + P["pose.b"]
    q = out[..., 3:7] + np.array([1.0, 0.0, 0.0, 0.0])
    qn = q / ad.sqrt((q * q).sum(axis=-1, keepdims=True))
    pose = ad.concatenate([out[..., 0:3], qn, ad.softplus(out[..., 7:8])], axis=-1)
    return box, pose


# ---------------------------------------------------------------------------
# queries and clips


def encode_prompt(rect, width, height, d):
    """Sinusoidal code of a pixel rectangle ``(x0, y0, x1, y1)``; ``d`` must be a multiple of 8."""
    if d % 8:
        raise DimMismatch(f"prompt encoding needs d divisible by 8, got {d}")
    x0, y0, x1, y1 = rect
    coords = np.array([x0 / width, y0 / height, x1 / width, y1 / height])
    freqs = math.pi * 2.0 ** np.arange(d // 8)
    ang = coords[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).ravel()


@dataclass
class QueryBatch:
    tokens: np.ndarray  # (T, N, d)
    mask: np.ndarray  # (T, N) bool
    instance_ids: np.ndarray  # (T, N) int, -1 on padding


def pad_queries(frames_objects, width, height, d=32):
    """Encode per-frame prompts and pad every frame to the largest object count.

    Args:
        frames_objects: per frame, a list of objects with ``instance_id`` and
            ``prompt``; they are ordered by instance id.
    """
    if len(frames_objects) < 1:
        raise ValueError("need at least one frame")
    T = len(frames_objects)
    N = max(1, max(len(objs) for objs in frames_objects))
    tokens = np.zeros((T, N, d))
    mask = np.zeros((T, N), dtype=bool)
    ids = np.full((T, N), -1, dtype=int)
    for t, objs in enumerate(frames_objects):
        for n, a in enumerate(sorted(objs, key=lambda a: a.instance_id)):
            tokens[t, n] = encode_prompt(a.prompt, width, height, d)
            mask[t, n] = True
            ids[t, n] = a.instance_id
    return QueryBatch(tokens, mask, ids)


def crop_sequence(clip, max_len, seed):
    """Random contiguous crop of at most ``max_len`` frames, re-referenced to its first frame."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    n = len(clip.frames)
    if n <= 1:
        return clip
    rng = np.random.default_rng(seed)
    length = int(rng.integers(1, min(max_len, n) + 1))
    start = int(rng.integers(0, n - length + 1))
    sub = SequenceClip(clip.sequence_id, clip.scene_id, list(clip.frames[start : start + length]), clip.start + start)
    return rereference(sub)


# ---------------------------------------------------------------------------
# checks


def random_inputs(T, N, M, d, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(T, N, d)), rng.normal(size=(T, M, d)), rng.normal(size=(T, M, d))


def causality_trials(weights, T=4, N=3, M=5, trials=50, seed=0, mode="frame"):
    """Largest change at frames ``<= t`` after perturbing inputs at frames ``> t``.

    Every trial draws fresh inputs and a split frame ``t``, perturbs all
    three inputs after ``t``, and compares every block's outputs and the full
    decoder's. Returns ``{name: max abs change}``.
    """
    if T < 2:
        raise ValueError("causality needs T >= 2")
    rng = np.random.default_rng(seed)
    worst = {"A": 0.0, "B": 0.0, "C": 0.0, "decoder": 0.0}
    d = weights.d
    for _ in range(trials):
        tok, eimg, egeo = rng.normal(size=(T, N, d)), rng.normal(size=(T, M, d)), rng.normal(size=(T, M, d))
        t = int(rng.integers(0, T - 1))
        tok2, eimg2, egeo2 = tok.copy(), eimg.copy(), egeo.copy()
        tok2[t + 1 :] += rng.normal(scale=3.0, size=tok2[t + 1 :].shape)
        eimg2[t + 1 :] += rng.normal(scale=3.0, size=eimg2[t + 1 :].shape)
        egeo2[t + 1 :] += rng.normal(scale=3.0, size=egeo2[t + 1 :].shape)
        for blk, e1, e2 in (("A", eimg, eimg2), ("B", egeo, egeo2), ("C", eimg, eimg2)):
            a_t, a_e = cab_forward(tok, e1, weights, blk, mode=mode)
            b_t, b_e = cab_forward(tok2, e2, weights, blk, mode=mode)
            diff = max(np.abs(a_t[: t + 1] - b_t[: t + 1]).max(), np.abs(a_e[: t + 1] - b_e[: t + 1]).max())
            worst[blk] = max(worst[blk], float(diff))
        s1 = decoder_forward(tok, eimg, egeo, weights, mode=mode)
        s2 = decoder_forward(tok2, eimg2, egeo2, weights, mode=mode)
        worst["decoder"] = max(worst["decoder"], float(np.abs(s1[: t + 1] - s2[: t + 1]).max()))
    return worst


def padding_trials(weights, T=3, M=4, trials=20, seed=0):
    """Largest change of real outputs when extra padded query slots are appended."""
    rng = np.random.default_rng(seed)
    d = weights.d
    worst = 0.0
    for _ in range(trials):
        counts = rng.integers(1, 4, size=T)
        N = int(counts.max())
        extra = int(rng.integers(1, 3))
        tok = rng.normal(size=(T, N, d))
        mask = np.arange(N)[None, :] < counts[:, None]
        tok = np.where(mask[..., None], tok, 0.0)
        eimg, egeo = rng.normal(size=(T, M, d)), rng.normal(size=(T, M, d))
        big = np.concatenate([tok, np.zeros((T, extra, d))], axis=1)
        big_mask = np.concatenate([mask, np.zeros((T, extra), dtype=bool)], axis=1)
        s1 = decoder_forward(tok, eimg, egeo, weights, mask)
        s2 = decoder_forward(big, eimg, egeo, weights, big_mask)
        b1, p1 = heads_forward(s1, weights, mask)
        b2, p2 = heads_forward(s2, weights, big_mask)
        diff = max(
            np.abs(np.where(mask[..., None], s1 - s2[:, :N], 0.0)).max(),
            np.abs(np.where(mask[..., None], b1 - b2[:, :N], 0.0)).max(),
            np.abs(p1 - p2).max(),
        )
        worst = max(worst, float(diff))
    return worst


def _gt_targets(T, N, rng):
    """Plausible camera-frame GT boxes and poses for the toy gradient check."""
    boxes = np.zeros((T, N, 7))
    boxes[..., 0:2] = rng.uniform(-0.5, 0.5, size=(T, N, 2))
    boxes[..., 2] = rng.uniform(2.0, 4.0, size=(T, N))
    boxes[..., 3:6] = rng.uniform(0.4, 1.2, size=(T, N, 3))
    boxes[..., 6] = rng.uniform(-0.5, 0.5, size=(T, N))
    poses = np.zeros((T, 8))
    poses[:, 0:3] = rng.normal(scale=0.2, size=(T, 3))
    q = np.concatenate([np.ones((T, 1)), rng.normal(scale=0.1, size=(T, 3))], axis=1)
    poses[:, 3:7] = q / np.linalg.norm(q, axis=1, keepdims=True)
    poses[:, 7] = rng.uniform(0.8, 1.2, size=T)
    return boxes, poses


def _scalar_loss(box, pose, mask, gt_boxes, gt_poses, ids):
    """Sum of box, pose and temporal terms over valid queries (duals or floats)."""
    T, N = mask.shape
    total = 0.0
    frames, pose_list = [], []
    for t in range(T):
        pv = [pose.element((t, k)) if isinstance(pose, ad.DualArray) else float(pose[t, k]) for k in range(8)]
        total = total + losses.pose_term(pv, list(gt_poses[t]))
        per = {}
        for n in range(N):
            if not mask[t, n]:
                continue
            bv = [box.element((t, n, k)) if isinstance(box, ad.DualArray) else float(box[t, n, k]) for k in range(7)]
            g = list(gt_boxes[t, n])
            total = total + losses.center_term(bv, g) + losses.dim_term(bv, g) + losses.corner_term(bv, g)
            total = total + losses.iou3d_term(bv, g)
            per[int(ids[t, n])] = bv
        frames.append(per)
        pose_list.append(pv)
    return total + losses.temporal_term(frames, pose_list)


@dataclass
class DecoderGradCheck:
    names: list
    result: losses.GradCheckResult

    def table(self):
        r = self.result
        rows = [f"{'parameter':<22} {'analytic':>13} {'numeric':>13} {'rel.err':>10}  flag"]
        for name, a, n, e, f in zip(self.names, r.analytic, r.numeric, r.rel_error, r.flagged):
            rows.append(f"{name:<22} {a:13.6e} {n:13.6e} {e:10.2e}  {'kink' if f else ''}")
        return "\n".join(rows)


def gradient_check(T=3, N=2, d=16, M=4, n_params=40, seed=0, h=1e-6, corrupt=None):
    """Finite-difference check of a training loss through the heads and decoder.

    ``n_params`` scalar parameters are sampled from the inputs and every
    weight array. Their gradient is computed in forward mode and compared to
    central differences. ``corrupt`` (a float) is added to the first analytic
    component; it exists so callers can prove that a wrong gradient fails.
    """
    rng = np.random.default_rng(seed)
    weights = DecoderWeights.init(d, seed=seed)
    tok, eimg, egeo = random_inputs(T, N, M, d, seed + 1)
    mask = np.ones((T, N), dtype=bool)
    mask[-1, -1] = N < 2  # one padded slot when possible
    tok = np.where(mask[..., None], tok, 0.0)
    ids = np.where(mask, np.arange(N)[None, :], -1)
    gt_boxes, gt_poses = _gt_targets(T, N, rng)

    arrays = {"tokens": tok, "E_img": eimg, "E_geo": egeo, **weights.params}
    names = sorted(arrays)
    picks = []
    while len(picks) < n_params:
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(arrays[name].size))
        if name == "tokens" and not mask.reshape(-1)[flat // d]:
            continue  # padded token entries are forced to zero
        if (name, flat) not in picks:
            picks.append((name, flat))
    x0 = np.array([arrays[n].ravel()[i] for n, i in picks])

    def build(x, dual):
        out = {k: v.copy() for k, v in arrays.items()}
        for (n, i), v in zip(picks, x):
            out[n].ravel()[i] = v
        if not dual:
            return out
        lifted = {}
        for k, v in out.items():
            idx = [(j, i) for j, (n, i) in enumerate(picks) if n == k]
            if not idx:
                lifted[k] = v
                continue
            der = np.zeros(v.shape + (len(picks),))
            flat_der = der.reshape(v.size, len(picks))
            for j, i in idx:
                flat_der[i, j] = 1.0
            lifted[k] = ad.DualArray(v, der)
        return lifted

    def loss(x, dual):
        a = build(x, dual)
        w = DecoderWeights(d, {k: a[k] for k in weights.params})
        states = decoder_forward(a["tokens"], a["E_img"], a["E_geo"], w, mask)
        box, pose = heads_forward(states, w, mask)
        return _scalar_loss(box, pose, mask, gt_boxes, gt_poses, ids)

    def fn(x):
        with ad.record_branches(len(picks)) as rec:
            out = loss(x, dual=True)
        grad = np.array(out.der, dtype=float)
        if corrupt is not None:
            grad[0] += corrupt
        return losses.LossValue(float(out.val), grad, rec.distance)

    def value_only(x):
        return losses.LossValue(float(loss(x, dual=False)), np.zeros(len(picks)), np.full(len(picks), np.inf))

    base = fn(x0)
    numeric = np.empty(len(picks))
    for j in range(len(picks)):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        numeric[j] = (value_only(xp).value - value_only(xm).value) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(base.gradient), np.abs(numeric)), 1e-6)
    rel = np.abs(base.gradient - numeric) / denom
    flagged = base.branch_distance < 10 * h
    result = losses.GradCheckResult(base.gradient, numeric, rel, flagged)
    return DecoderGradCheck([f"{n}[{i}]" for n, i in picks], result)
