import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpmpc.quaternion import (
    attitude_error,
    attitude_retract,
    quat_canonical,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_rotate_inverse,
    quat_to_rotmat,
    rotate_inverse_jacobian,
    rotate_jacobian,
)

finite = st.floats(-10, 10, allow_nan=False)
quats = arrays(float, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3).map(quat_normalize)
vecs = arrays(float, 3, elements=finite)


def test_identity_rotation_leaves_vectors():
    v = np.array([0.3, -1.2, 4.0])
    assert np.allclose(quat_rotate(np.array([1.0, 0, 0, 0]), v), v)


def test_quarter_turn_about_z():
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    assert np.allclose(quat_rotate(q, [1.0, 0, 0]), [0, 1, 0], atol=1e-15)


def test_rotmat_matches_rotation():
    q = quat_from_axis_angle([1, 2, 3], 0.7)
    v = np.array([0.5, -0.1, 2.0])
    assert np.allclose(quat_to_rotmat(q) @ v, quat_rotate(q, v))


def test_canonical_sign():
    q = np.array([-0.5, 0.5, 0.5, 0.5])
    assert np.allclose(quat_canonical(q), -q)


@settings(max_examples=50, deadline=None)
@given(quats, vecs)
def test_rotation_preserves_norm_and_inverts(q, v):
    w = quat_rotate(q, v)
    assert np.isclose(np.linalg.norm(w), np.linalg.norm(v), atol=1e-9)
    assert np.allclose(quat_rotate_inverse(q, w), v, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(quats, quats)
def test_composition_matches_sequential_rotation(a, b):
    v = np.array([1.0, -2.0, 0.5])
    assert np.allclose(quat_rotate(quat_mul(a, b), v), quat_rotate(a, quat_rotate(b, v)), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(quats, arrays(float, 3, elements=st.floats(-1.1, 1.1)).filter(lambda d: np.linalg.norm(d) < 1.9))
def test_attitude_error_inverts_retract(q, delta):
    # the error chart covers |delta| < 2 (rotations below 180 degrees)
    q2 = attitude_retract(q, delta)
    assert np.allclose(attitude_error(q2, q), delta, atol=1e-9)


def test_attitude_error_zero_for_same_or_negated_quaternion():
    q = quat_from_axis_angle([0, 1, 0], 0.3)
    assert np.allclose(attitude_error(q, q), 0)
    assert np.allclose(attitude_error(-q, q), 0)


def test_rotation_jacobians_match_finite_differences(rng):
    # deliberately not unit: RK4 stage points are not, and both maps are homogeneous in q
    q = rng.standard_normal(4)
    v = rng.standard_normal(3)
    h = 1e-6
    for fn, jac in ((quat_rotate, rotate_jacobian), (quat_rotate_inverse, rotate_inverse_jacobian)):
        fd = np.column_stack([(fn(q + h * e, v) - fn(q - h * e, v)) / (2 * h) for e in np.eye(4)])
        assert np.allclose(jac(q, v), fd, atol=1e-7)
