"""Articulated body model: skinning, kinematics, serialization, anchors."""

import numpy as np
import pytest

from flowpose import body
from flowpose.rotation import Rotation, axis_angle_exp


def _naive_fk(model, state):
    """Independent forward-kinematics implementation used as a test oracle:
    explicit per-joint 4x4 world transforms and per-vertex blending."""
    verts = body.shape_blend(model, state.shape)
    jr = model.joint_regressor @ verts
    k = model.n_joints
    world = [None] * k
    for j in range(k):
        local = np.eye(4)
        local[:3, :3] = state.pose[j].matrix()
        p = model.parents[j]
        local[:3, 3] = jr[j] - (jr[p] if p >= 0 else 0.0)
        world[j] = local if p < 0 else world[p] @ local
    out = np.zeros_like(verts)
    for i in range(verts.shape[0]):
        h = np.zeros(4)
        for j in range(k):
            rel = np.eye(4)
            rel[:3, 3] = -jr[j]
            h += model.blend_weights[j, i] * (world[j] @ rel @ np.append(verts[i], 1.0))
        out[i] = h[:3] / h[3]
    joints = np.array([w[:3, 3] for w in world])
    return out + state.translation, joints + state.translation


def test_fk_matches_naive(toy_model, rng):
    for _ in range(5):
        state = body.BodyState(
            [axis_angle_exp(rng.normal(scale=0.4, size=3))
             for _ in range(toy_model.n_joints)],
            rng.normal(scale=0.5, size=toy_model.n_shape),
            rng.normal(size=3))
        v, j = body.forward_kinematics(toy_model, state)
        v_ref, j_ref = _naive_fk(toy_model, state)
        np.testing.assert_allclose(v, v_ref, atol=1e-10)
        np.testing.assert_allclose(j, j_ref, atol=1e-10)


def test_fk_identity_is_template(toy_model):
    state = body.BodyState([Rotation.identity()] * toy_model.n_joints,
                           np.zeros(toy_model.n_shape), np.zeros(3))
    v, j = body.forward_kinematics(toy_model, state)
    np.testing.assert_allclose(v, toy_model.template, atol=1e-12)
    np.testing.assert_allclose(j, body.rest_joints(toy_model,
                                                   np.zeros(toy_model.n_shape)),
                               atol=1e-12)


def test_fk_root_rotation_is_rigid(toy_model, rng):
    g = axis_angle_exp(rng.normal(scale=0.7, size=3))
    state = body.BodyState([g] + [Rotation.identity()] * (toy_model.n_joints - 1),
                           np.zeros(toy_model.n_shape), np.zeros(3))
    v, _ = body.forward_kinematics(toy_model, state)
    jr = body.rest_joints(toy_model, np.zeros(toy_model.n_shape))
    expect = (toy_model.template - jr[0]) @ g.matrix().T + jr[0]
    np.testing.assert_allclose(v, expect, atol=1e-10)


def test_shape_blend_linear(toy_model, rng):
    b1 = rng.normal(size=toy_model.n_shape)
    b2 = rng.normal(size=toy_model.n_shape)
    v0 = body.shape_blend(toy_model, np.zeros(toy_model.n_shape))
    va = body.shape_blend(toy_model, b1)
    vb = body.shape_blend(toy_model, b2)
    vab = body.shape_blend(toy_model, b1 + b2)
    np.testing.assert_allclose(vab, va + vb - v0, atol=1e-12)


def test_model_json_roundtrip(toy_model, tmp_path):
    p = tmp_path / "m.json"
    body.save_model(toy_model, p)
    m2 = body.load_model(p)
    np.testing.assert_array_equal(m2.template, toy_model.template)
    np.testing.assert_array_equal(m2.shape_basis, toy_model.shape_basis)
    np.testing.assert_array_equal(m2.joint_regressor, toy_model.joint_regressor)
    np.testing.assert_array_equal(m2.blend_weights, toy_model.blend_weights)
    np.testing.assert_array_equal(m2.parents, toy_model.parents)
    np.testing.assert_array_equal(m2.anchor_indices, toy_model.anchor_indices)


def test_load_rejects_bad_format(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format_version": 99}')
    with pytest.raises(body.ModelLoadError):
        body.load_model(p)
    p.write_text("not json at all")
    with pytest.raises(body.ModelLoadError):
        body.load_model(p)


def _corrupt_and_load(toy_model, tmp_path, mutate):
    import json
    p = tmp_path / "m.json"
    body.save_model(toy_model, p)
    doc = json.loads(p.read_text())
    mutate(doc)
    p.write_text(json.dumps(doc))
    return body.load_model(p)


def test_validation_rejects_cycle(toy_model, tmp_path):
    def mutate(doc):
        doc["parents"][1] = 2
        doc["parents"][2] = 1

    with pytest.raises(body.ModelLoadError):
        _corrupt_and_load(toy_model, tmp_path, mutate)


def test_validation_rejects_nonconvex_regressor(toy_model, tmp_path):
    def mutate(doc):
        doc["joint_regressor"][0] = [2 * x for x in doc["joint_regressor"][0]]

    with pytest.raises(body.ModelLoadError):
        _corrupt_and_load(toy_model, tmp_path, mutate)


def test_segment_of_vertex_covers_joints(toy_model):
    seg = body.segment_of_vertex(toy_model)
    assert set(np.unique(seg[seg >= 0])) == set(range(toy_model.n_joints))


def test_select_anchors_quota_and_determinism(toy_model):
    a = body.select_anchors(toy_model, per_segment_min=2, total=48)
    assert len(a) == 48
    assert len(np.unique(a)) == 48
    seg = body.segment_of_vertex(toy_model)
    counts = np.bincount(seg[a], minlength=toy_model.n_joints)
    assert (counts >= 2).all()
    np.testing.assert_array_equal(a, body.select_anchors(toy_model, 2, 48))


def test_select_anchors_impossible_quota(toy_model):
    with pytest.raises(body.QuotaError):
        body.select_anchors(toy_model, per_segment_min=50, total=48)


def test_toy_model_valid_and_deterministic():
    m1 = body.make_toy_model()
    m2 = body.make_toy_model()
    np.testing.assert_array_equal(m1.template, m2.template)
    assert m1.n_joints == 8
    # shape directions must not contain a global-scale mode: under
    # perspective projection that trades off exactly against depth
    v0 = m1.template
    for s in range(m1.n_shape):
        d = m1.shape_basis[s].reshape(-1, 3)
        scale_dir = v0 - v0.mean(0)
        scale_dir /= np.linalg.norm(scale_dir)
        cos = abs(np.sum(d / np.linalg.norm(d) * scale_dir))
        assert cos < 0.9
