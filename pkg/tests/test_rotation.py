"""Rotation primitives checked against scipy.spatial.transform."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation as ScipyRot

from flowpose.rotation import (DegenerateMeanError, InvalidRotationError,
                               Rotation, TwoVectorFrame, axis_angle_exp,
                               axis_angle_log, frame_complete,
                               geodesic_distance, matrix_to_quat,
                               quat_to_matrix, rotation_mean,
                               special_orthogonalize, svd3)

unit_vec3 = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: 0.1 < np.linalg.norm(v) < 3.0)


def _scipy_from(r):
    # scipy stores quaternions (x, y, z, w); ours are (w, x, y, z)
    w, x, y, z = r.q
    return ScipyRot.from_quat([x, y, z, w])


def test_matrix_matches_scipy(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        r = Rotation(q / np.linalg.norm(q))
        np.testing.assert_allclose(r.matrix(), _scipy_from(r).as_matrix(),
                                   atol=1e-12)


def test_compose_matches_scipy(rng):
    for _ in range(20):
        qa, qb = rng.normal(size=4), rng.normal(size=4)
        a = Rotation(qa / np.linalg.norm(qa))
        b = Rotation(qb / np.linalg.norm(qb))
        np.testing.assert_allclose(
            a.compose(b).matrix(),
            _scipy_from(a).as_matrix() @ _scipy_from(b).as_matrix(),
            atol=1e-12)


def test_apply_matches_matrix(rng):
    q = rng.normal(size=4)
    r = Rotation(q / np.linalg.norm(q))
    v = rng.normal(size=3)
    np.testing.assert_allclose(r.apply(v), r.matrix() @ v, atol=1e-13)


def test_known_rotation_matrix():
    # 90 degrees about z: x -> y
    r = axis_angle_exp([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(r.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0],
                               atol=1e-12)


def test_double_cover_canonicalized():
    q = np.array([-0.5, 0.5, 0.5, 0.5])
    r = Rotation(q)
    assert r.q[np.nonzero(r.q)[0][0]] > 0
    assert r == Rotation(-q)


def test_invalid_quaternion_rejected():
    with pytest.raises(InvalidRotationError):
        Rotation([0.0, 0.0, 0.0, 0.0])
    with pytest.raises(InvalidRotationError):
        Rotation([np.nan, 0.0, 0.0, 1.0])


def test_non_unit_quaternion_normalized():
    r = Rotation([2.0, 0.0, 0.0, 0.0])
    assert r == Rotation.identity()


@given(st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3))
@settings(max_examples=50, deadline=None)
def test_exp_log_roundtrip(v):
    v = np.asarray(v)
    if np.linalg.norm(v) > 2.8:
        v = v * 2.8 / np.linalg.norm(v)
    np.testing.assert_allclose(axis_angle_log(axis_angle_exp(v)), v,
                               atol=1e-9)


def test_exp_matches_scipy(rng):
    for _ in range(20):
        v = rng.normal(scale=0.8, size=3)
        np.testing.assert_allclose(axis_angle_exp(v).matrix(),
                                   ScipyRot.from_rotvec(v).as_matrix(),
                                   atol=1e-12)


def test_geodesic_distance_known():
    a = Rotation.identity()
    b = axis_angle_exp([0.7, 0.0, 0.0])
    assert abs(geodesic_distance(a, b) - 0.7) < 1e-10


def test_geodesic_triangle_inequality(rng):
    for _ in range(30):
        qs = [rng.normal(size=4) for _ in range(3)]
        a, b, c = [Rotation(q / np.linalg.norm(q)) for q in qs]
        assert (geodesic_distance(a, c) <= geodesic_distance(a, b)
                + geodesic_distance(b, c) + 1e-9)


def test_matrix_quat_roundtrip(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        r = Rotation(q / np.linalg.norm(q))
        assert geodesic_distance(r, matrix_to_quat(quat_to_matrix(r))) < 1e-7


def test_svd3_reconstruction(rng):
    m = rng.normal(size=(3, 3))
    u, s, v = svd3(m)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, m, atol=1e-12)


def test_special_orthogonalize_projects(rng):
    r = axis_angle_exp(rng.normal(scale=0.5, size=3))
    noisy = r.matrix() + 0.05 * rng.normal(size=(3, 3))
    q = special_orthogonalize(noisy)
    m = q.matrix()
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(m) > 0
    # projection of a clean rotation is that rotation
    assert geodesic_distance(special_orthogonalize(r.matrix()), r) < 1e-7


def test_frame_complete_orthonormal(rng):
    u1 = rng.normal(size=3)
    u1 /= np.linalg.norm(u1)
    t = rng.normal(size=3)
    u2 = t - (t @ u1) * u1
    u2 /= np.linalg.norm(u2)
    r = frame_complete(TwoVectorFrame(u1, u2))
    m = r.matrix()
    np.testing.assert_allclose(m[:, 0], u1, atol=1e-12)
    np.testing.assert_allclose(m[:, 1], u2, atol=1e-12)
    assert abs(np.linalg.det(m) - 1) < 1e-12


def test_rotation_mean_chordal(rng):
    base = axis_angle_exp(rng.normal(scale=0.5, size=3))
    rots = [base.compose(axis_angle_exp(rng.normal(scale=0.05, size=3)))
            for _ in range(40)]
    m = rotation_mean(rots)
    assert geodesic_distance(m, base) < 0.05
    # scipy's quaternion mean is the same chordal L2 optimum
    qs = np.array([[r.q[1], r.q[2], r.q[3], r.q[0]] for r in rots])
    sp = ScipyRot.from_quat(qs).mean()
    w_last = sp.as_quat()
    assert geodesic_distance(m, Rotation([w_last[3], *w_last[:3]])) < 1e-8


def test_rotation_mean_degenerate():
    a = Rotation.identity()
    b = axis_angle_exp([np.pi, 0.0, 0.0])
    with pytest.raises(DegenerateMeanError):
        rotation_mean([a, b], [0.5, 0.5])
