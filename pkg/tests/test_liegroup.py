import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import series_expm, skew, trace_angle, twist_matrix
from se3reg.liegroup import (
    RENORM_PERIOD,
    RigidMotion,
    apply,
    compose,
    exp_se3,
    exp_so3,
    hat3,
    hat6,
    inverse,
    is_rotation,
    left_jacobian,
    left_jacobian_inv,
    log_se3,
    log_so3,
    random_rotation,
    rotation_angle_error,
    translation_norm_error,
    vee3,
    vee6,
)

finite = st.floats(-5, 5, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)


def random_motion(rng, max_angle=math.pi - 0.1):
    return RigidMotion(random_rotation(rng, max_angle), rng.normal(size=3))


def test_hat3_examples():
    assert np.array_equal(hat3([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(hat3([1, 2, 3]), [[0, -3, 2], [3, 0, -1], [-2, 1, 0]])


@given(vec3, vec3)
def test_hat3_is_cross_product(w, v):
    h = hat3(w)
    np.testing.assert_allclose(h, -h.T)
    np.testing.assert_allclose(h @ v, np.cross(w, v), atol=1e-12)
    np.testing.assert_allclose(h @ w, 0.0, atol=1e-12)
    np.testing.assert_array_equal(vee3(h), w)


def test_hat3_batched():
    w = np.arange(12.0).reshape(4, 3)
    for k in range(4):
        np.testing.assert_array_equal(hat3(w)[k], hat3(w[k]))


def test_hat6_vee6_roundtrip(rng):
    v = rng.normal(size=6)
    np.testing.assert_array_equal(vee6(hat6(v)), v)
    np.testing.assert_array_equal(hat6(v), twist_matrix(v))


def test_exp_so3_examples():
    np.testing.assert_array_equal(exp_so3([0, 0, 0]), np.eye(3))
    quarter = [[1, 0, 0], [0, 0, -1], [0, 1, 0]]
    np.testing.assert_allclose(exp_so3([math.pi / 2, 0, 0]), quarter, atol=1e-15)


def test_exp_so3_matches_series(rng):
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        np.testing.assert_allclose(exp_so3(w), series_expm(skew(w)), atol=1e-10)


def test_exp_so3_angle_is_norm(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        r = exp_so3(w)
        assert is_rotation(r)
        assert trace_angle(r) == pytest.approx(np.linalg.norm(w), abs=1e-7)


def test_small_angle_branch_is_continuous():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for theta in (1e-12, 5e-7, 9.99e-7, 1.01e-6, 1e-5):
        w = theta * axis
        np.testing.assert_allclose(exp_so3(w), series_expm(skew(w)), atol=1e-15)
        np.testing.assert_allclose(log_so3(exp_so3(w)), w, rtol=1e-9, atol=1e-20)
        v = np.concatenate([w, [0.1, 0.2, 0.3]])
        np.testing.assert_allclose(exp_se3(v).matrix(), series_expm(twist_matrix(v)), atol=1e-15)
        np.testing.assert_allclose(left_jacobian_inv(w) @ left_jacobian(w), np.eye(3), atol=1e-15)


def test_log_so3_examples():
    np.testing.assert_array_equal(log_so3(np.eye(3)), np.zeros(3))
    quarter = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    np.testing.assert_allclose(log_so3(quarter), [math.pi / 2, 0, 0], atol=1e-15)


def test_log_so3_half_turn_about_z():
    r = np.diag([-1.0, -1.0, 1.0])
    # eigenvector of r for eigenvalue +1
    vals, vecs = np.linalg.eig(r)
    axis = np.real(vecs[:, np.argmin(abs(vals - 1))])
    w = log_so3(r)
    assert np.linalg.norm(w) == pytest.approx(math.pi)
    assert abs(abs(w @ axis) - math.pi) < 1e-12
    np.testing.assert_allclose(exp_so3(w), r, atol=1e-12)


@pytest.mark.parametrize("offset", [0.0, 1e-9, 1e-7, 1e-5, 1e-3])
def test_log_so3_near_pi(rng, offset):
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        w = (math.pi - offset) * axis
        r = exp_so3(w)
        out = log_so3(r)
        assert np.linalg.norm(out) <= math.pi + 1e-12
        np.testing.assert_allclose(exp_so3(out), r, atol=1e-9)
        if offset > 0:
            np.testing.assert_allclose(out, w, atol=1e-6)


def test_exp_se3_pure_parts(rng):
    u = rng.normal(size=3)
    m = exp_se3(np.concatenate([np.zeros(3), u]))
    np.testing.assert_array_equal(m.rotation, np.eye(3))
    np.testing.assert_allclose(m.translation, u)
    w = rng.normal(size=3)
    m = exp_se3(np.concatenate([w, np.zeros(3)]))
    np.testing.assert_array_equal(m.rotation, exp_so3(w))
    np.testing.assert_array_equal(m.translation, np.zeros(3))


def test_exp_se3_matches_series(rng):
    for _ in range(200):
        v = rng.normal(size=6)
        v[:3] *= rng.uniform(0, 3) / np.linalg.norm(v[:3])
        np.testing.assert_allclose(exp_se3(v).matrix(), series_expm(twist_matrix(v)), atol=1e-10)


def test_log_se3_examples(rng):
    np.testing.assert_array_equal(log_se3(RigidMotion.identity()), np.zeros(6))
    t = rng.normal(size=3)
    np.testing.assert_allclose(log_se3(RigidMotion(np.eye(3), t)), np.concatenate([np.zeros(3), t]))


def test_log_exp_roundtrip(rng):
    for _ in range(500):
        m = random_motion(rng, math.pi)
        np.testing.assert_allclose(exp_se3(log_se3(m)).matrix(), m.matrix(), atol=1e-9)
        v = log_se3(m)
        assert np.linalg.norm(v[:3]) <= math.pi + 1e-6


@settings(max_examples=300)
@given(arrays(float, 6, elements=st.floats(-3, 3, allow_nan=False)))
def test_exp_log_roundtrip_property(v):
    if np.linalg.norm(v[:3]) > math.pi - 0.1:
        v = v.copy()
        v[:3] *= (math.pi - 0.1) / np.linalg.norm(v[:3])
    np.testing.assert_allclose(log_se3(exp_se3(v)), v, atol=1e-9)


def test_left_jacobian_inverse(rng):
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        np.testing.assert_allclose(left_jacobian_inv(w) @ left_jacobian(w), np.eye(3), atol=1e-12)


def test_group_operations(rng):
    a, b, c = (random_motion(rng) for _ in range(3))
    np.testing.assert_allclose(compose(compose(a, b), c).matrix(),
                               compose(a, compose(b, c)).matrix(), atol=1e-12)
    np.testing.assert_allclose(compose(a, inverse(a)).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(inverse(inverse(a)).matrix(), a.matrix(), atol=1e-15)
    np.testing.assert_array_equal(compose(RigidMotion.identity(), a).matrix(), a.matrix())
    p = rng.normal(size=(5, 3))
    t = rng.normal(size=3)
    np.testing.assert_allclose(apply(RigidMotion(np.eye(3), t), p), p + t)
    np.testing.assert_allclose(apply(a, p[0]), a.rotation @ p[0] + a.translation)
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    assert np.array_equal(a.matrix()[3], [0, 0, 0, 1])


def test_from_matrix_rejects_wrong_shape():
    with pytest.raises(ValueError):
        RigidMotion.from_matrix(np.eye(3))


def test_motion_arrays_are_read_only():
    m = RigidMotion.identity()
    with pytest.raises(ValueError):
        m.rotation[0, 0] = 2.0


def test_long_composition_chain_stays_orthonormal(rng):
    m = RigidMotion.identity()
    for k in range(1, 10_001):
        step = exp_se3(0.3 * rng.normal(size=6))
        m = step @ m if k % 2 else (m @ step).inverse()
        if k % RENORM_PERIOD == 0:
            m = m.renormalized()
        r = m.rotation
        assert np.linalg.norm(r.T @ r - np.eye(3)) <= 1e-8
    assert is_rotation(m.rotation)


def test_rotation_angle_error(rng):
    r = random_rotation(rng)
    assert rotation_angle_error(r, r) == pytest.approx(0.0, abs=1e-12)
    quarter = exp_so3([0, 0, math.pi / 2])
    assert rotation_angle_error(np.eye(3), quarter) == pytest.approx(math.pi / 2)
    for _ in range(200):
        a, b = random_rotation(rng, 3.0), random_rotation(rng, 3.0)
        expect = trace_angle(a @ b.T)
        if expect < math.pi - 0.01:
            assert rotation_angle_error(a, b) == pytest.approx(expect, abs=1e-8)
    ma, mb = random_motion(rng), random_motion(rng)
    assert rotation_angle_error(ma, mb) == pytest.approx(rotation_angle_error(ma.rotation, mb.rotation))


def test_translation_norm_error(rng):
    a, b = random_motion(rng), random_motion(rng)
    assert translation_norm_error(a, a) == 0.0
    assert translation_norm_error(a, b) == pytest.approx(np.linalg.norm(a.translation - b.translation))


def test_random_rotation_respects_angle_range(rng):
    for _ in range(100):
        r = random_rotation(rng, 0.5, 0.2)
        assert 0.2 - 1e-12 <= trace_angle(r) <= 0.5 + 1e-12
