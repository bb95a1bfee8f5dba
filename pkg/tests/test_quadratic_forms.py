import numpy as np
import pytest

from rfsos.beta_algebra import BetaBasis, gram_matrix, quadrature_oracle
from rfsos.quadratic_forms import (
    NumericError,
    PsdFactor,
    QuadraticForm,
    eval_form,
    general_real_eigen,
    integrate_form,
    integrate_out_dependent,
    log_det_pd,
    log_form_values,
    symmetric_eigen,
)


def _random_psd(rng, n):
    L = rng.normal(size=(n, n))
    return L.T @ L


class TestQuadraticForm:
    def test_symmetrized_on_construction(self):
        qf = QuadraticForm(BetaBasis.constant(2, 1), [[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_array_equal(qf.coeff, [[1.0, 1.0], [1.0, 1.0]])

    def test_dict_roundtrip(self, rng):
        basis = BetaBasis.random(4, 2, rng)
        qf = QuadraticForm(basis, _random_psd(rng, 4))
        data = qf.to_dict()
        assert len(data["coeff"]) == 10
        np.testing.assert_array_equal(QuadraticForm.from_dict(data, basis).coeff, qf.coeff)

    def test_dict_wrong_basis(self, rng):
        qf = QuadraticForm(BetaBasis.random(2, 1, rng), np.eye(2))
        with pytest.raises(ValueError):
            QuadraticForm.from_dict(qf.to_dict(), BetaBasis.random(2, 1, rng))


class TestEvalForm:
    def test_identity_on_constant_basis(self):
        assert eval_form(QuadraticForm(BetaBasis.constant(2, 1), np.eye(2)), [0.37]) == pytest.approx(2.0)

    def test_zero(self, rng):
        qf = QuadraticForm(BetaBasis.random(3, 2, rng), np.zeros((3, 3)))
        assert eval_form(qf, [0.2, 0.6]) == 0.0

    def test_matches_double_loop(self, rng):
        basis = BetaBasis.random(4, 2, rng)
        C = _random_psd(rng, 4)
        qf = QuadraticForm(basis, C)
        x = rng.uniform(0.05, 0.95, size=2)
        b = basis.eval(x)
        naive = sum(C[i, j] * b[i] * b[j] for i in range(4) for j in range(4))
        assert eval_form(qf, x) == pytest.approx(naive, rel=1e-12)

    def test_sos_nonnegative(self, rng):
        qf = QuadraticForm(BetaBasis.random(6, 2, rng), _random_psd(rng, 6))
        assert eval_form(qf, rng.uniform(1e-6, 1 - 1e-6, size=(100_000, 2))).min() >= -1e-12


class TestIntegrateForm:
    def test_constant(self):
        assert integrate_form(QuadraticForm(BetaBasis.constant(1, 2), [[1.0]])) == pytest.approx(1.0)

    def test_small_case(self):
        qf = QuadraticForm(BetaBasis([[1.0], [2.0]], [[1.0], [1.0]]), np.eye(2))
        assert integrate_form(qf) == pytest.approx(4 / 3, abs=1e-14)

    @pytest.mark.parametrize("d", [1, 2])
    def test_matches_quadrature(self, rng, d):
        qf = QuadraticForm(BetaBasis.random(4, d, rng, 1.0, 6.0), _random_psd(rng, 4))
        oracle = quadrature_oracle(lambda p: eval_form(qf, p), d, 14, levels=16)
        assert integrate_form(qf) == pytest.approx(oracle, abs=1e-9)


class TestIntegrateOutDependent:
    def test_constant_psi_returns_q(self, rng):
        L = PsdFactor(rng.normal(size=(3, 3)))
        out = integrate_out_dependent(L, BetaBasis.random(3, 1, rng), BetaBasis.constant(3, 1))
        np.testing.assert_allclose(out.coeff, L.Q, rtol=1e-14)

    def test_scalar_case(self):
        out = integrate_out_dependent(PsdFactor([[np.sqrt(3.0)]]), BetaBasis.constant(1, 1), BetaBasis([[2.0]], [[1.0]]))
        assert eval_form(out, [0.3]) == pytest.approx(1.0, abs=1e-14)

    def test_schur_product_psd(self, rng):
        for _ in range(50):
            n, d = int(rng.integers(2, 7)), int(rng.integers(1, 3))
            out = integrate_out_dependent(PsdFactor(rng.normal(size=(n, n))), BetaBasis.random(n, d, rng),
                                          BetaBasis.random(n, d, rng))
            assert np.linalg.eigvalsh(out.coeff)[0] >= -1e-10

    def test_joint_double_integral(self, rng):
        """Integrating the reduced form equals the 2-D integral of the joint form (d = 1)."""
        phi, psi = BetaBasis.random(3, 1, rng, 1.0, 5.0), BetaBasis.random(3, 1, rng, 1.0, 5.0)
        L = PsdFactor(rng.normal(size=(3, 3)))

        def joint(p):
            b = phi.eval(p[:, :1]) * psi.eval(p[:, 1:])
            return np.einsum("ni,ij,nj->n", b, L.Q, b)

        oracle = quadrature_oracle(joint, 2, 14, levels=16)
        assert integrate_form(integrate_out_dependent(L, phi, psi)) == pytest.approx(oracle, abs=1e-8)

    def test_mismatch(self, rng):
        with pytest.raises(ValueError):
            integrate_out_dependent(PsdFactor(np.eye(2)), BetaBasis.random(3, 1, rng), BetaBasis.random(3, 1, rng))


class TestPsdFactor:
    def test_q_psd(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 12))
            assert np.linalg.eigvalsh(PsdFactor(rng.normal(size=(n, n)) * 10).Q)[0] >= -1e-10

    def test_copies_input(self):
        L = np.eye(2)
        f = PsdFactor(L)
        L[0, 0] = 5.0
        assert f.L[0, 0] == 1.0

    def test_non_square(self):
        with pytest.raises(ValueError):
            PsdFactor(np.ones((2, 3)))


class TestSymmetricEigen:
    def test_identity(self):
        w, _ = symmetric_eigen(np.eye(4))
        np.testing.assert_allclose(w, 1.0)

    def test_diagonal(self):
        w, v = symmetric_eigen(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(w, [1, 2, 3])
        np.testing.assert_allclose(np.abs(v), np.eye(3)[:, [1, 2, 0]])

    def test_random_bounds(self, rng):
        for _ in range(100):
            A = rng.normal(size=(8, 8))
            M = A + A.T
            w, V = symmetric_eigen(M)
            nm = np.linalg.norm(M, 2)
            assert np.linalg.norm(M @ V - V * w) <= 1e-9 * nm
            assert np.linalg.norm(V.T @ V - np.eye(8)) <= 1e-10
            assert np.linalg.norm(V @ np.diag(w) @ V.T - M) <= 1e-9 * max(nm, 1)
            assert np.all(np.diff(w) >= 0)

    def test_non_symmetric_refused(self):
        with pytest.raises(ValueError):
            symmetric_eigen([[1.0, 2.0], [0.0, 1.0]])


class TestGeneralEigen:
    def test_identity(self):
        w, _ = general_real_eigen(np.eye(3))
        np.testing.assert_allclose(w, 1.0)

    def test_diagonal(self):
        w, _ = general_real_eigen(np.diag([2.0, -1.0]))
        assert sorted(w.real) == [-1.0, 2.0]

    def test_random_residual(self, rng):
        for _ in range(100):
            M = rng.normal(size=(9, 9))
            w, V = general_real_eigen(M)
            nm = np.linalg.norm(M, 2)
            for lam, v in zip(w, V.T):
                assert np.linalg.norm(M @ v - lam * v) <= 1e-8 * nm * np.linalg.norm(v)
            np.testing.assert_allclose(np.linalg.norm(V, axis=0), 1.0, atol=1e-12)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            general_real_eigen(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestLogDet:
    def test_identity(self):
        assert log_det_pd(np.eye(3)) == 0.0

    def test_diag_e(self):
        assert log_det_pd(np.diag([np.e, np.e])) == pytest.approx(2.0)

    def test_matches_eigen(self, rng):
        M = _random_psd(rng, 6) + 0.1 * np.eye(6)
        assert log_det_pd(M) == pytest.approx(np.sum(np.log(symmetric_eigen(M)[0])), abs=1e-9)

    def test_not_pd_signalled(self):
        assert log_det_pd(np.diag([1.0, -1.0])) is None


def test_log_form_values_consistent(rng):
    basis = BetaBasis.random(5, 2, rng, 1.0, 300.0)
    C = _random_psd(rng, 5)
    x = rng.uniform(0.01, 0.99, size=(50, 2))
    lv, _, _ = log_form_values(basis.log_eval(x), C)
    direct = eval_form(QuadraticForm(basis, C), x)
    ok = direct > 1e-250
    np.testing.assert_allclose(lv[ok], np.log(direct[ok]), rtol=1e-10)
    assert np.all(np.isfinite(lv))
