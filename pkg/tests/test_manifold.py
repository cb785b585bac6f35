import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm, logm

from scaledrift import manifold as mf
from scaledrift.manifold import SE3, BranchAmbiguityError, Rot3, Sim3, Sim3Tangent, exp_sim3, log_sim3, se3_to_sim3

from conftest import random_se3, random_sim3


def hat(xi):
    xi = np.asarray(xi, dtype=float)
    w, s, v = xi[:3], xi[3], xi[4:]
    M = np.zeros((4, 4))
    M[:3, :3] = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]) + s * np.eye(3)
    M[:3, 3] = v
    return M


def vee(L):
    A = L[:3, :3]
    s = np.trace(A) / 3.0
    W = 0.5 * (A - A.T)
    return np.array([W[2, 1], W[0, 2], W[1, 0], s, *L[:3, 3]])


def random_xi(rng, lo=0.1, hi=3.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([axis * rng.uniform(lo, hi), [rng.uniform(-1, 1)], rng.uniform(-3, 3, 3)])


finite = st.floats(-3.0, 3.0, allow_nan=False)


# -- exp / log --------------------------------------------------------------


def test_exp_of_zero_is_identity():
    S = exp_sim3(np.zeros(7))
    assert S.scale == 1.0
    np.testing.assert_allclose(S.matrix(), np.eye(4), atol=0)


def test_pure_scale():
    S = exp_sim3([0, 0, 0, 0.4, 0, 0, 0])
    assert S.scale == pytest.approx(math.exp(0.4), abs=1e-15)
    np.testing.assert_allclose(S.translation, 0.0, atol=0)
    xi = log_sim3(Sim3.identity().__class__(Rot3.identity(), np.zeros(3), 2.0)).vector()
    np.testing.assert_allclose(xi, [0, 0, 0, math.log(2.0), 0, 0, 0], atol=1e-15)


def test_log_of_identity_is_zero():
    np.testing.assert_allclose(log_sim3(Sim3.identity()).vector(), 0.0, atol=0)


def test_exp_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    for _ in range(300):
        xi = random_xi(rng)
        np.testing.assert_allclose(exp_sim3(xi).matrix(), expm(hat(xi)), atol=1e-9, rtol=1e-9)


def test_log_matches_matrix_logarithm():
    rng = np.random.default_rng(2)
    for _ in range(300):
        S = random_sim3(rng)
        ref = vee(np.real(logm(S.matrix())))
        np.testing.assert_allclose(log_sim3(S).vector(), ref, atol=1e-8)


def test_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        xi = random_xi(rng)
        np.testing.assert_allclose(log_sim3(exp_sim3(xi)).vector(), xi, atol=1e-8)


@given(st.lists(finite, min_size=7, max_size=7))
def test_round_trip_property(v):
    xi = np.array(v)
    if np.linalg.norm(xi[:3]) >= math.pi - 1e-3:
        xi[:3] *= 3.0 / np.linalg.norm(xi[:3])
    np.testing.assert_allclose(log_sim3(exp_sim3(xi)).vector(), xi, atol=1e-8)


@pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-9, 1e-7, 1e-6, 1.1e-6, 1e-5, 1e-3])
@pytest.mark.parametrize("sigma", [0.0, 1e-12, 1e-8, 1e-6, 1.1e-6, 1e-4, 0.5])
def test_small_angle_and_small_sigma_limits(theta, sigma):
    xi = np.array([theta, 0.0, 0.0, sigma, 0.3, -0.2, 0.7])
    ref = expm(hat(xi))
    np.testing.assert_allclose(exp_sim3(xi).matrix(), ref, atol=1e-12)
    np.testing.assert_allclose(log_sim3(exp_sim3(xi)).vector(), xi, atol=1e-10)


def test_rotation_at_pi_is_branch_ambiguous():
    S = Sim3(Rot3.exp([math.pi, 0, 0]), [1.0, 2.0, 3.0], 1.5)
    with pytest.raises(BranchAmbiguityError):
        log_sim3(S)


def test_non_finite_tangent_rejected():
    with pytest.raises(ValueError):
        exp_sim3([np.nan, 0, 0, 0, 0, 0, 0])


def test_tangent_vector_round_trip():
    t = Sim3Tangent([0.1, 0.2, 0.3], 0.4, [1, 2, 3])
    np.testing.assert_array_equal(Sim3Tangent.from_vector(t.vector()).vector(), t.vector())


# -- group operations ---------------------------------------------------------


def test_group_axioms_against_dense_matrices():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a, b, c = random_sim3(rng), random_sim3(rng), random_sim3(rng)
        p = rng.uniform(-10, 10, 3)
        np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)
        np.testing.assert_allclose(((a @ b) @ c).matrix(), (a @ (b @ c)).matrix(), atol=1e-9)
        np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-9)
        np.testing.assert_allclose(a.inverse().matrix(), np.linalg.inv(a.matrix()), atol=1e-9)
        np.testing.assert_allclose((a @ b).act(p), a.act(b.act(p)), atol=1e-9)
        np.testing.assert_allclose(a.act(p), (a.matrix() @ np.append(p, 1.0))[:3], atol=1e-9)
        assert abs(np.linalg.norm((a @ b).rotation.q) - 1.0) < 1e-9


def test_identity_action():
    p = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(Sim3.identity().act(p), p)


def test_se3_inverse_and_conversion():
    rng = np.random.default_rng(5)
    for _ in range(200):
        G = random_se3(rng)
        np.testing.assert_allclose((G @ G.inverse()).matrix(), np.eye(4), atol=1e-9)
        np.testing.assert_allclose(G.inverse().inverse().matrix(), G.matrix(), atol=1e-9)
        S = se3_to_sim3(G)
        assert S.scale == 1.0
        np.testing.assert_allclose(S.matrix(), G.matrix(), atol=0)
        np.testing.assert_allclose(SE3.exp(G.log()).matrix(), G.matrix(), atol=1e-9)


def test_rot3_matrix_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(200):
        R = Rot3.exp(rng.normal(size=3))
        np.testing.assert_allclose(Rot3.from_matrix(R.matrix()).matrix(), R.matrix(), atol=1e-12)
        assert R.q[0] >= 0


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        Sim3(Rot3.identity(), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        Sim3(Rot3.identity(), np.zeros(3), -1.0)


def test_adjoint_moves_tangent_across():
    # exp(Ad_S xi) S = S exp(xi)
    rng = np.random.default_rng(7)
    for _ in range(100):
        S = random_sim3(rng)
        xi = random_xi(rng, 0.01, 1.0) * 0.3
        lhs = exp_sim3(mf.adjoint(S) @ xi) @ S
        rhs = S @ exp_sim3(xi)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


def test_values_are_immutable():
    S = Sim3.identity()
    with pytest.raises(ValueError):
        S.translation[0] = 1.0
