import numpy as np
import pytest

from degen_spde.mesh import (build_mesh, build_operator, hardy_check,
                             weighted_h1_norm)


def test_mesh_geometry():
    mesh = build_mesh(8)
    assert mesh.h == pytest.approx(1.0 / 8)
    assert np.all(mesh.centers > 0.0) and np.all(mesh.centers < 1.0)
    assert mesh.faces[0] == 0.0 and mesh.faces[-1] == 1.0
    assert np.allclose(np.diff(mesh.centers), mesh.h)


def test_operator_zero_vector():
    mesh = build_mesh(16)
    for alpha in (0.5, 1.5):
        op = build_operator(mesh, alpha, 0.01)
        assert np.all(op.apply(np.zeros(16)) == 0.0)


def test_operator_laplacian_limit():
    # degeneracy switched off: the stencil approaches (1, -2, 1) / h^2
    # (a whiff of eps keeps the x=0 face coefficient at its alpha->0 limit)
    mesh = build_mesh(16)
    op = build_operator(mesh, 1e-13, 1e-8)
    h2 = mesh.h**2
    assert np.allclose(op.main_diag, -2.0 / h2, rtol=1e-10)
    assert np.allclose(op.off_diag, 1.0 / h2, rtol=1e-10)


def test_operator_symmetry_both_regimes():
    mesh = build_mesh(32)
    rng = np.random.default_rng(3)
    for alpha in (0.5, 1.5):
        for eps in (0.0, 0.02):
            op = build_operator(mesh, alpha, eps)
            u, v = rng.standard_normal(32), rng.standard_normal(32)
            assert abs(np.dot(op.apply(u), v) - np.dot(u, op.apply(v))) <= 1e-12 * (
                1 + abs(np.dot(op.apply(u), v)))


def test_operator_negative_semidefinite():
    mesh = build_mesh(24)
    for alpha in (0.3, 1.0, 1.7):
        for eps in (0.0, 0.05):
            op = build_operator(mesh, alpha, eps)
            eigs = np.linalg.eigvalsh(op.dense())
            assert np.max(eigs) <= 1e-10


def test_face_coefficients_monotone_in_eps():
    mesh = build_mesh(16)
    coef_small = build_operator(mesh, 0.7, 0.01).face_coef
    coef_large = build_operator(mesh, 0.7, 0.05).face_coef
    assert np.all(coef_large >= coef_small)


def test_zero_flux_regime_constant_vector():
    # with no left flux, a constant sees only the right Dirichlet face
    mesh = build_mesh(16)
    op = build_operator(mesh, 1.5, 0.0)
    out = op.apply(np.full(16, 3.0))
    assert np.allclose(out[:-1], 0.0, atol=1e-12)
    assert out[-1] < 0.0


def test_dirichlet_regime_sees_left_ghost():
    mesh = build_mesh(16)
    op = build_operator(mesh, 0.5, 0.1)
    out = op.apply(np.full(16, 3.0))
    assert out[0] < 0.0  # anchored by the zero ghost through eps^alpha


def test_operator_alpha_validation():
    mesh = build_mesh(8)
    with pytest.raises(ValueError):
        build_operator(mesh, 0.0, 0.0)
    with pytest.raises(ValueError):
        build_operator(mesh, 2.0, 0.0)


def test_shifted_solve_consistency():
    mesh = build_mesh(32)
    op = build_operator(mesh, 0.8, 0.01)
    rng = np.random.default_rng(6)
    rhs = rng.standard_normal((5, 32))
    sol = op.solve_shifted(0.1, rhs)
    assert np.allclose(op.apply_shifted(0.1, sol), rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# Hardy inequality


def test_hardy_parabola_closed_form():
    # z = x(1-x): lhs -> 1/30, rhs -> 4 * 2/15 = 8/15, ratio -> 1/16
    N = 256
    x = (np.arange(N) + 0.5) / N
    lhs, rhs, ratio = hardy_check(0.0, 0.0, x * (1 - x))
    assert lhs == pytest.approx(1.0 / 30.0, rel=2e-2)
    assert rhs == pytest.approx(8.0 / 15.0, rel=2e-2)
    assert ratio == pytest.approx(1.0 / 16.0, rel=2e-2)
    assert ratio <= 1.0


def test_hardy_zero_profile():
    lhs, rhs, ratio = hardy_check(0.5, 0.01, np.zeros(32))
    assert (lhs, rhs, ratio) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.5, 2.0])
def test_hardy_random_profiles(gamma):
    N = 64
    eps = 0.01
    rng = np.random.default_rng(11)
    bound = 1.0 + 5.0 / N
    for _ in range(100):
        z = rng.standard_normal(N)
        _, _, ratio = hardy_check(gamma, eps, z)
        assert ratio <= bound


def test_hardy_gamma_one_rejected():
    with pytest.raises(ValueError, match="gamma"):
        hardy_check(1.0, 0.01, np.ones(8))


def test_hardy_eps_zero_needs_small_gamma():
    with pytest.raises(ValueError):
        hardy_check(1.5, 0.0, np.ones(8))


def test_weighted_h1_zero():
    assert weighted_h1_norm(np.zeros(16), 0.7) == 0.0


def test_weighted_h1_constant_without_boundary():
    # gradient-free once the endpoint closure is lifted
    val = weighted_h1_norm(np.full(64, 2.0), 1.3, zero_endpoints=False)
    assert val == pytest.approx(4.0, rel=1e-12)


def test_weighted_h1_parabola():
    # z = x(1-x), alpha=1: 1/30 + 1/6 = 0.2
    N = 256
    x = (np.arange(N) + 0.5) / N
    val = weighted_h1_norm(x * (1 - x), 1.0)
    assert val == pytest.approx(0.2, rel=2e-2)
