import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riloc.geometry import (
    GRAVITY_MAGNITUDE,
    NavState,
    ReducedState,
    Rotation3,
    compose,
    gravity_vector,
    rotate,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)


def _assert_orthonormal(R: Rotation3) -> None:
    m = R.as_matrix()
    np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(m) - 1.0) < 1e-9
    assert abs(np.linalg.norm(R.as_quaternion()) - 1.0) < 1e-9


def test_compose_identity():
    I = Rotation3.identity()
    np.testing.assert_allclose(compose(I, I).as_matrix(), np.eye(3), atol=1e-12)


def test_compose_with_inverse_is_identity():
    R = Rotation3.from_rotvec([0.3, -1.2, 0.7])
    np.testing.assert_allclose(compose(R, R.inverse()).as_matrix(), np.eye(3), atol=1e-9)


def test_compose_quarter_turns_is_half_turn():
    R = compose(Rotation3.rz(np.pi / 2), Rotation3.rz(np.pi / 2))
    expected = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(R.as_matrix(), expected, atol=1e-12)


def test_compose_applies_right_operand_first():
    a, b = Rotation3.rz(0.4), Rotation3.from_rotvec([0.5, 0.0, 0.0])
    v = np.array([0.2, -1.0, 3.0])
    np.testing.assert_allclose(compose(a, b).rotate(v), a.rotate(b.rotate(v)), atol=1e-12)


def test_rotate_identity():
    np.testing.assert_array_equal(rotate(Rotation3.identity(), [1, 2, 3]), [1.0, 2.0, 3.0])


def test_rotate_quarter_turn_about_z():
    np.testing.assert_allclose(rotate(Rotation3.rz(np.pi / 2), [1, 0, 0]), [0, 1, 0], atol=1e-9)


def test_rotate_zero_vector():
    np.testing.assert_array_equal(rotate(Rotation3.from_rotvec([1, 2, 3]), np.zeros(3)), np.zeros(3))


def test_gravity_vector_default():
    g = gravity_vector()
    np.testing.assert_array_equal(g, [0.0, 0.0, -9.81])
    assert abs(np.linalg.norm(g) - 9.81) <= 0.01
    assert GRAVITY_MAGNITUDE == 9.81


def test_gravity_vector_rejects_non_positive():
    with pytest.raises(ValueError):
        gravity_vector(0.0)


def test_from_matrix_rejects_wrong_shape():
    with pytest.raises(ValueError):
        Rotation3.from_matrix(np.eye(2))


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        Rotation3([0, 0, 0, 0])


def test_rotation_is_immutable():
    R = Rotation3.rz(0.1)
    with pytest.raises(ValueError):
        R.as_matrix()[0, 0] = 2.0


def test_navstate_rejects_negative_timestamp():
    with pytest.raises(ValueError):
        NavState(-1.0)


def test_navstate_rejects_non_finite_position():
    with pytest.raises(ValueError):
        NavState(0.0, position=[np.nan, 0, 0])


def test_reduced_state_vector_round_trip():
    x = np.arange(6.0)
    s = ReducedState.from_vector(x)
    np.testing.assert_array_equal(s.as_vector(), x)
    with pytest.raises(ValueError):
        ReducedState([np.inf, 0, 0], [0, 0, 0])


def test_navstate_reduced():
    s = NavState(1.0, Rotation3.rz(1.0), [1, 2, 3], [4, 5, 6])
    np.testing.assert_array_equal(s.reduced().as_vector(), [1, 2, 3, 4, 5, 6])


def test_norm_preserved_for_1000_random_pairs(rng):
    for _ in range(1000):
        R = Rotation3(rng.normal(size=4))
        v = rng.normal(size=3) * 10
        assert abs(np.linalg.norm(R.rotate(v)) - np.linalg.norm(v)) < 1e-9


@given(quats, vec3)
def test_rotation_preserves_norm(q, v):
    R = Rotation3(q)
    assert abs(np.linalg.norm(R.rotate(v)) - np.linalg.norm(v)) <= 1e-9 * max(1.0, np.linalg.norm(v))


@given(quats)
def test_quaternion_matrix_round_trip(q):
    R = Rotation3(q)
    _assert_orthonormal(R)
    back = Rotation3.from_matrix(R.as_matrix())
    qa, qb = back.as_quaternion(), R.as_quaternion()
    # q and -q are the same rotation
    assert min(np.abs(qa - qb).max(), np.abs(qa + qb).max()) < 1e-9
    np.testing.assert_allclose(back.as_matrix(), R.as_matrix(), atol=1e-9)


@given(quats, quats, quats)
def test_composition_is_associative(a, b, c):
    A, B, C = Rotation3(a), Rotation3(b), Rotation3(c)
    np.testing.assert_allclose(((A @ B) @ C).as_matrix(), (A @ (B @ C)).as_matrix(), atol=1e-9)


@given(quats)
def test_inverse_composes_to_identity(q):
    R = Rotation3(q)
    np.testing.assert_allclose((R @ R.inverse()).as_matrix(), np.eye(3), atol=1e-9)
    np.testing.assert_allclose((R.inverse() @ R).as_matrix(), np.eye(3), atol=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_rotvec_round_trip(rv):
    R = Rotation3.from_rotvec(rv)
    back = Rotation3.from_rotvec(R.as_rotvec())
    assert R.angle_to(back) < 1e-9


def test_long_composition_chain_stays_orthonormal(rng):
    R = Rotation3.identity()
    steps = [Rotation3.from_rotvec(rng.normal(scale=0.01, size=3)) for _ in range(100)]
    for _ in range(1000):
        for s in steps:
            R = R @ s
    _assert_orthonormal(R)


def test_euler_zyx_yaw():
    R = Rotation3.from_euler_zyx(0.7, 0.1, -0.2)
    assert abs(R.yaw() - 0.7) < 1e-12
    _assert_orthonormal(R)
