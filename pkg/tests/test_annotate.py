import numpy as np
import pytest

from box4d import annotate as ann
from box4d import geometry as geo
from box4d import scene as synth
from box4d.records import FrameRecord, SequenceClip

K = geo.CameraIntrinsics.default()
IDENTITY = geo.RigidTransform.identity()


def _obj(center=(0.0, 0.0, 4.0), dims=(1.0, 1.0, 1.0), yaw=0.5, inst=1, category="box"):
    return synth.SceneObject(inst, category, geo.OrientedBox3D.from_yaw(center, dims, yaw))


def _corner_pixels(obj):
    u, v, z = geo.project_points(geo.box_corners(obj.box), K)
    col, row, ok = geo.pixel_index(u, v, K)
    assert ok.all()
    return col, row, z


def _depth_with_hidden_corners(obj, k, gap=0.1):
    """Depth map whose pixels put exactly ``k`` corners behind the surface."""
    col, row, z = _corner_pixels(obj)
    assert len(set(zip(col.tolist(), row.tolist()))) == 8
    depth = np.full(K.shape, 50.0, dtype=np.float32)
    for i in range(k):
        depth[row[i], col[i]] = z[i] - gap
    return depth


@pytest.mark.parametrize("k,kept", [(0, True), (5, True), (6, False), (8, False)])
def test_vertex_depth_boundary(k, kept):
    obj = _obj()
    depth = _depth_with_hidden_corners(obj, k)
    assert ann.behind_vertex_count(obj.box, depth, K) == k
    assert ann.filter_vertex_depth(obj, depth, IDENTITY, K) is kept


def test_vertex_depth_margin():
    obj = _obj()
    col, row, z = _corner_pixels(obj)
    depth = np.full(K.shape, 50.0, dtype=np.float32)
    depth[row[0], col[0]] = z[0] - 0.01  # within the 0.02 margin
    assert ann.behind_vertex_count(obj.box, depth, K, margin=0.02) == 0
    depth[row[0], col[0]] = z[0] - 0.03
    assert ann.behind_vertex_count(obj.box, depth, K, margin=0.02) == 1


def test_vertex_depth_ignores_no_hit_pixels():
    obj = _obj()
    depth = np.full(K.shape, synth.NO_HIT, dtype=np.float32)
    assert ann.behind_vertex_count(obj.box, depth, K) == 0


def test_rendered_occluder_hides_all_corners():
    target = _obj(center=(0.0, 0.0, 6.0))
    wall = synth.SceneObject(2, "box", geo.OrientedBox3D((0.0, 0.0, 3.0), (6.0, 6.0, 0.1)))
    scene = synth.SceneSpec((10, 10, 3), [target, wall])
    depth, _ = synth.render_frame(scene, IDENTITY, K)
    assert ann.behind_vertex_count(target.box, depth, K) == 8
    alone, _ = synth.render_frame(scene.only(1), IDENTITY, K)
    # only self-occluded back corners remain
    assert ann.behind_vertex_count(target.box, alone, K) <= 3


def _mask_with_pixels(obj, n):
    rect = ann.projected_rect(obj.box, K)
    c0, r0, c1, r1 = rect
    mask = np.zeros(K.shape, dtype=np.int32)
    cells = [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
    assert len(cells) >= n
    for r, c in cells[:n]:
        mask[r, c] = obj.instance_id
    # pixels outside the projected rectangle never count
    mask[0, 0] = obj.instance_id
    return mask


@pytest.mark.parametrize("n,kept", [(99, False), (100, True), (101, True)])
def test_min_pixels_boundary(n, kept):
    obj = _obj()
    mask = _mask_with_pixels(obj, n)
    assert ann.filter_occlusion_pixels(obj, mask, 100, IDENTITY, K) is kept


def test_min_pixels_boundary_on_render():
    obj = _obj()
    _, inst = synth.render_frame(synth.SceneSpec((10, 10, 3), [obj]), IDENTITY, K)
    n = int((inst == 1).sum())
    assert ann.filter_occlusion_pixels(obj, inst, n, IDENTITY, K)
    assert not ann.filter_occlusion_pixels(obj, inst, n + 1, IDENTITY, K)


def test_semantic_filter():
    objs = [_obj(category="wall"), _obj(inst=2, category="chair"), _obj(inst=3, category="floor")]
    assert [o.instance_id for o in ann.filter_semantic(objs)] == [2]


def test_frustum_depth_filter():
    near, far, behind = _obj(center=(0, 0, 10.0)), _obj(center=(0, 0, 10.001), inst=2), _obj(center=(0, 0, -3), inst=3)
    kept = ann.filter_frustum_depth([near, far, behind], IDENTITY, K, 10.0)
    assert [o.instance_id for o in kept] == [1]
    with pytest.raises(ValueError):
        ann.filter_frustum_depth([near], IDENTITY, K, 0.0)


def test_projected_rect_straddling_camera():
    # half in front, half behind: still a finite footprint
    obj = _obj(center=(0.0, 0.0, 0.2), dims=(0.5, 0.5, 1.0), yaw=0.0)
    rect = ann.projected_rect(obj.box, K)
    assert rect is not None and rect[0] >= 0 and rect[2] <= K.width - 1


def test_mask_prompt_edges():
    mask = np.zeros((5, 6), dtype=np.int32)
    mask[1:3, 2:5] = 4
    assert ann.mask_prompt(4, mask) == (1.5, 0.5, 4.5, 2.5)
    assert ann.mask_prompt(9, mask) == (0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# adaptation


@pytest.fixture(scope="module")
def entering():
    scene, traj = synth.entering_object_scene()
    raw = synth.render_sequence(scene, traj, K)
    clip = SequenceClip("entering_00000", scene.scene_id, raw.frames)
    adapted, history = ann.adapt_boxes(clip, scene)
    return scene, raw, adapted, history


def test_fully_visible_object_gets_global_box(entering):
    scene, raw, _, history = entering
    g = scene.by_id(1).box
    present = [t for t, f in enumerate(raw.frames) if (f.instance == 1).any()]
    assert present
    for t in present:
        phase, box = history[t][1]
        assert phase is ann.Phase.FULL_FROM_START
        assert box is g


def test_entering_object_grows_then_converges(entering):
    scene, _, _, history = entering
    g = scene.by_id(2).box
    track = [h[2] for h in history if 2 in h]
    phases = [p for p, _ in track]
    assert phases[0] is ann.Phase.ACCUMULATING
    assert phases[-1] is ann.Phase.CONVERGED
    vols = [b.volume for _, b in track]
    assert all(b >= a for a, b in zip(vols, vols[1:]))
    for p, b in track:
        assert np.all(geo.points_in_box(geo.box_corners(b), g, tol=1e-3))
        if p is ann.Phase.CONVERGED:
            assert np.array_equal(b.center, g.center) and np.array_equal(b.dims, g.dims)
            assert np.array_equal(b.rotation, g.rotation)


def test_annotations_match_history_in_camera_frame(entering):
    _, raw, adapted, history = entering
    for f, h in zip(adapted.frames, history):
        assert sorted(a.instance_id for a in f.objects) == sorted(h)
        for a in f.objects:
            expect = geo.transform_box(f.pose.inverse(), h[a.instance_id][1])
            assert a.box.same_as(expect, atol=1e-12)
            assert a.score == 1.0


def test_rereference_first_pose_identity(entering):
    _, _, adapted, history = entering
    clip = ann.rereference(adapted)
    assert np.array_equal(clip.frames[0].pose.as_matrix(), np.eye(4))
    for f in clip.frames:
        for a in f.objects:
            # camera-frame boxes are unchanged; world boxes agree with pose @ camera box
            assert geo.transform_box(f.pose, a.box).same_as(a.box_world, atol=1e-9)


def test_dropped_object_is_not_reregistered():
    scene, traj = synth.entering_object_scene()
    raw = synth.render_sequence(scene, traj, K)
    frames = list(raw.frames)
    # blank instance 1 out of frame 2 so it loses presence, then let it come back
    f = frames[2]
    inst = np.where(f.instance == 1, 0, f.instance)
    depth = np.where(f.instance == 1, synth.NO_HIT, f.depth).astype(np.float32)
    frames[2] = FrameRecord(f.index, f.pose, f.intrinsics, depth, inst)
    _, history = ann.adapt_boxes(SequenceClip("x", "entering", frames), scene)
    assert 1 in history[1] and 1 not in history[2]
    assert all(1 not in h for h in history[3:])


def test_annotate_clip_end_to_end(entering):
    scene, raw, _, _ = entering
    clip = ann.annotate_clip(SequenceClip("e", scene.scene_id, raw.frames), scene)
    assert len(clip) == len(raw.frames)
    assert sum(len(f.objects) for f in clip.frames) > 0
