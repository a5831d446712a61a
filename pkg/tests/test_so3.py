import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from imudebias import so3
from imudebias.errors import NearSingular, NotSkew

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def rng():
    return np.random.default_rng(1234)


def test_hat_examples():
    assert np.array_equal(so3.hat(np.zeros(3)), np.zeros((3, 3)))
    expected = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    assert np.array_equal(so3.hat([1.0, 0.0, 0.0]), expected)


@given(vec3, vec3)
def test_hat_is_cross_product(v, w):
    np.testing.assert_allclose(so3.hat(v) @ w, np.cross(v, w), atol=1e-12)
    np.testing.assert_allclose(so3.hat(v) @ v, 0.0, atol=1e-12)
    m = so3.hat(v)
    assert np.array_equal(m, -m.T)


def test_vee_examples():
    assert np.array_equal(so3.vee(np.zeros((3, 3))), np.zeros(3))
    np.testing.assert_array_equal(so3.vee(so3.hat([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    with pytest.raises(NotSkew):
        so3.vee(np.eye(3))


@given(vec3)
def test_hat_vee_inverse(v):
    np.testing.assert_array_equal(so3.vee(so3.hat(v)), v)


def test_exp_examples():
    np.testing.assert_array_equal(so3.exp_so3(np.zeros(3)), np.eye(3))
    # Independent Rodrigues evaluation: rotation by pi/2 about x.
    expected = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    np.testing.assert_allclose(so3.exp_so3([np.pi / 2, 0, 0]), expected, atol=1e-15)
    v = np.array([0.3, -0.7, 1.1])
    np.testing.assert_allclose(so3.exp_so3(v) @ so3.exp_so3(-v), np.eye(3), atol=1e-12)


def test_exp_matches_scipy_and_is_a_rotation():
    v = rng().uniform(-1, 1, size=(1000, 3))
    v *= (rng().uniform(0, np.pi, size=1000) / np.linalg.norm(v, axis=1))[:, None]
    R = so3.exp_so3(v)
    np.testing.assert_allclose(R, Rotation.from_rotvec(v).as_matrix(), atol=1e-13)
    assert np.max(so3.orthogonality_residual(R)) <= 1e-9
    assert np.max(np.abs(np.linalg.det(R) - 1.0)) <= 1e-9


def test_exp_single_matches_batched():
    v = rng().normal(size=(50, 3))
    for x in v:
        np.testing.assert_allclose(so3.exp_so3(x), so3.exp_so3(x[None])[0], atol=1e-15)


def test_exp_small_angle_branch_continuous():
    axis = np.array([0.6, -0.8, 0.0])
    for t in (1e-12, 1e-8, 9.9e-5, 1.01e-4):
        np.testing.assert_allclose(so3.exp_so3(t * axis), Rotation.from_rotvec(t * axis).as_matrix(), atol=1e-16)


def test_log_examples():
    np.testing.assert_array_equal(so3.log_so3(np.eye(3)), np.zeros(3))
    v = np.array([0.3, -0.2, 0.1])
    np.testing.assert_allclose(so3.log_so3(so3.exp_so3(v)), v, atol=1e-12)
    w = so3.log_so3(so3.exp_so3([np.pi, 0.0, 0.0]))
    assert abs(np.linalg.norm(w) - np.pi) < 1e-12
    np.testing.assert_allclose(np.abs(w), [np.pi, 0.0, 0.0], atol=1e-12)


def test_log_near_pi_matches_eigen_axis():
    # Oracle: rotation axis is the eigenvector of R with eigenvalue 1.
    r = rng()
    for _ in range(50):
        axis = r.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.pi - r.uniform(0, 5e-3)
        R = Rotation.from_rotvec(angle * axis).as_matrix()
        w = so3.log_so3(R)
        vals, vecs = np.linalg.eig(R)
        ref = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
        assert abs(np.linalg.norm(w) - angle) < 1e-9
        assert abs(abs(w @ ref) / np.linalg.norm(w) - 1.0) < 1e-9
        np.testing.assert_allclose(so3.exp_so3(w), R, atol=1e-9)


def test_log_exp_roundtrip_and_exp_log():
    r = rng()
    v = r.normal(size=(2000, 3))
    v *= (r.uniform(0, np.pi - 1e-6, size=2000) / np.linalg.norm(v, axis=1))[:, None]
    np.testing.assert_allclose(so3.log_so3(so3.exp_so3(v)), v, atol=1e-9)
    R = Rotation.random(500, random_state=7).as_matrix()
    np.testing.assert_allclose(so3.exp_so3(so3.log_so3(R)), R, atol=1e-9)
    assert np.all(np.linalg.norm(so3.log_so3(R), axis=1) <= np.pi + 1e-12)


def test_log_matches_scipy():
    R = Rotation.random(200, random_state=3)
    np.testing.assert_allclose(so3.log_so3(R.as_matrix()), R.as_rotvec(), atol=1e-10)


def test_log_keeps_batch_shape():
    R = so3.exp_so3(rng().normal(size=(4, 5, 3)))
    assert so3.log_so3(R).shape == (4, 5, 3)


def test_jacobians_at_zero():
    np.testing.assert_array_equal(so3.right_jacobian(np.zeros(3)), np.eye(3))
    np.testing.assert_array_equal(so3.right_jacobian_inv(np.zeros(3)), np.eye(3))


def test_jacobian_product_identity():
    v = np.array([0.7, -0.4, 0.2])
    np.testing.assert_allclose(so3.right_jacobian(v) @ so3.right_jacobian_inv(v), np.eye(3), atol=1e-10)
    r = rng()
    vs = r.normal(size=(500, 3))
    vs *= (r.uniform(0, 2 * np.pi - 0.01, size=500) / np.linalg.norm(vs, axis=1))[:, None]
    prod = so3.right_jacobian(vs) @ so3.right_jacobian_inv(vs)
    np.testing.assert_allclose(prod, np.broadcast_to(np.eye(3), prod.shape), atol=1e-9)


@pytest.mark.parametrize("v", [np.array([0.7, -0.4, 0.2]), np.array([2.0, 1.0, -1.5]), np.array([3e-5, 0, 1e-5])])
def test_right_jacobian_finite_difference(v):
    # vee(Exp(v)^T Exp(v + eps e_i) - I) ~ eps J_r(v) e_i
    eps = 1e-6
    J = so3.right_jacobian(v)
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        d = so3.exp_so3(v).T @ so3.exp_so3(v + e) - np.eye(3)
        col = 0.5 * np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]]) / eps
        assert np.linalg.norm(col - J[:, i]) <= 1e-5 * np.linalg.norm(J[:, i])


def test_near_singular():
    limit = 2 * np.pi - so3.SINGULAR_MARGIN
    with pytest.raises(NearSingular):
        so3.right_jacobian_inv(np.array([limit, 0, 0]))
    with pytest.raises(NearSingular):
        so3.jr_inv_apply(np.array([0, 0, limit + 0.1]), np.ones(3))
    so3.right_jacobian_inv(np.array([limit - 1e-3, 0, 0]))


def test_matrix_free_products_match_matrices():
    r = rng()
    xi = r.normal(size=(300, 3))
    xi[:10] *= 1e-6
    w = r.normal(size=(300, 3))
    Ji = so3.right_jacobian_inv(xi)
    J = so3.right_jacobian(xi)
    np.testing.assert_allclose(so3.jr_inv_apply(xi, w), np.einsum("bij,bj->bi", Ji, w), atol=1e-12)
    np.testing.assert_allclose(so3.jr_inv_t_apply(xi, w), np.einsum("bji,bj->bi", Ji, w), atol=1e-12)
    np.testing.assert_allclose(so3.jr_t_apply(xi, w), np.einsum("bji,bj->bi", J, w), atol=1e-12)
    # Single-vector fast path.
    for k in range(20):
        np.testing.assert_allclose(so3.jr_inv_apply(xi[k], w[k]), Ji[k] @ w[k], atol=1e-12)


@pytest.mark.parametrize("scale", [1e-7, 1e-3, 0.05, 0.5, 2.0, 4.0])
def test_jr_inv_vjp_against_finite_differences(scale):
    r = np.random.default_rng(int(scale * 1e7) % 2**31)
    for _ in range(10):
        xi = r.normal(size=3)
        xi *= scale / np.linalg.norm(xi)
        w, g = r.normal(size=3), r.normal(size=3)
        got = so3.jr_inv_apply_vjp_xi(xi, w, g)
        h = 1e-6
        fd = np.array([
            g @ (so3.right_jacobian_inv(xi + h * e) @ w - so3.right_jacobian_inv(xi - h * e) @ w) / (2 * h)
            for e in np.eye(3)
        ])
        assert np.linalg.norm(got - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_exp_derivative_identity_random_paths():
    # d/dt Exp(xi(t)) = Exp(xi) hat(J_r(xi) xi')
    r = rng()
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        a, b, c = r.normal(size=(3, 3))
        om = r.uniform(0.5, 2.0)

        def xi(t):
            return a + b * np.sin(om * t) + c * t * t

        def dxi(t):
            return b * om * np.cos(om * t) + 2 * c * t

        t = r.uniform(-1, 1)
        fd = (so3.exp_so3(xi(t + h)) - so3.exp_so3(xi(t - h))) / (2 * h)
        x = xi(t)
        exact = so3.exp_so3(x) @ so3.hat(so3.right_jacobian(x) @ dxi(t))
        worst = max(worst, np.linalg.norm(fd - exact) / np.linalg.norm(exact))
    assert worst <= 1e-4


def test_geodesic_distance():
    R = so3.exp_so3([0.1, 0.2, -0.3])
    assert so3.geodesic_distance(R, R) == pytest.approx(0.0, abs=1e-15)
    d = so3.geodesic_distance(np.eye(3), so3.exp_so3([0.0, 0.0, 0.4]))
    assert d == pytest.approx(0.4, abs=1e-15)


@settings(max_examples=200)
@given(vec3)
def test_exp_orthogonal_property(v):
    R = so3.exp_so3(v)
    assert so3.orthogonality_residual(R) <= 1e-9
    assert abs(np.linalg.det(R) - 1) <= 1e-9
