import numpy as np
import pytest

from cleot.errors import NumericError, ShapeError, StateError
from cleot.ot import (
    SinkhornConfig, assignment_coupling, check_measure, exact_assignment, marginal_error,
    sinkhorn, sinkhorn_backward, sinkhorn_unrolled, uniform, write_coupling_csv,
)

from _oracles import brute_force_assignment, central_difference, rel_error

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


class TestSinkhorn:
    @pytest.mark.parametrize("lam", [0.5, 100, 1000])
    def test_swap_cost_closed_form(self, lam):
        # cross-ratio optimality: (x / (1/2 - x))^2 = exp(2 / lam)
        x = 0.5 / (1 + np.exp(-1 / lam))
        res = sinkhorn(SWAP, lam=lam)
        np.testing.assert_allclose(res.matrix, [[x, 0.5 - x], [0.5 - x, x]], atol=1e-12)

    def test_large_lambda_gives_product_measure(self):
        res = sinkhorn(SWAP, lam=1000)
        np.testing.assert_allclose(res.matrix, np.full((2, 2), 0.25), atol=1e-3)
        assert np.abs(sinkhorn(SWAP, lam=100).matrix - 0.25).max() < 1.3e-3

    def test_small_lambda_gives_zero_cost_permutation(self):
        res = sinkhorn(SWAP, lam=0.01)
        np.testing.assert_allclose(res.matrix, np.diag([0.5, 0.5]), atol=1e-3)
        assert res.value == pytest.approx(0, abs=1e-3)

    def test_value_is_linear_term_only(self):
        rng = np.random.default_rng(0)
        C = rng.uniform(size=(4, 5))
        res = sinkhorn(C, lam=0.5)
        assert res.value == pytest.approx(float(np.sum(res.matrix * C)), abs=1e-15)

    def test_marginals_and_nonnegativity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n1, n2 = rng.integers(2, 12, size=2)
            a = rng.dirichlet(np.ones(n1))
            b = rng.dirichlet(np.ones(n2))
            res = sinkhorn(rng.uniform(0, 3, size=(n1, n2)), a, b, lam=0.1)
            assert res.converged
            assert np.all(res.matrix >= 0)
            assert marginal_error(res.matrix, a, b) <= res.marginal_error + 1e-15
            assert res.marginal_error < 1e-9

    def test_config_object(self):
        cfg = SinkhornConfig(lam=0.5, max_iter=3, tol=1e-12)
        res = sinkhorn(np.random.default_rng(2).uniform(size=(6, 6)), cfg=cfg, newton_steps=0)
        assert res.n_iter == 3
        assert not res.converged
        assert res.marginal_error > 0

    def test_non_convergence_is_flagged_not_raised(self):
        C = np.random.default_rng(3).uniform(size=(8, 8))
        res = sinkhorn(C, lam=0.002, max_iter=1, newton_steps=0)
        assert not res.converged
        assert np.isfinite(res.marginal_error)

    @pytest.mark.parametrize("kw", [dict(lam=0), dict(lam=-1), dict(lam=None)])
    def test_bad_lambda(self, kw):
        with pytest.raises(ValueError):
            sinkhorn(SWAP, **kw)

    @pytest.mark.parametrize("kw", [dict(lam=0), dict(lam=1, max_iter=0), dict(lam=1, tol=0)])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            SinkhornConfig(**kw)

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            sinkhorn(SWAP, uniform(3), uniform(2), lam=1)
        with pytest.raises(ValueError):
            sinkhorn(-SWAP, lam=1)
        with pytest.raises(NumericError):
            sinkhorn(np.array([[0, np.nan], [1, 0]]), lam=1)
        with pytest.raises(ValueError):
            sinkhorn(SWAP, np.array([1.0, 0.0]), uniform(2), lam=1)

    def test_measure_must_sum_to_one(self):
        with pytest.raises(ValueError):
            check_measure(np.array([0.5, 0.5 + 1e-9]))
        check_measure(np.array([0.5, 0.5 + 1e-13]))

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            C = rng.uniform(size=(5, 7))
            a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(7))
            fwd = sinkhorn(C, a, b, lam=0.1)
            back = sinkhorn(C.T, b, a, lam=0.1)
            np.testing.assert_allclose(back.matrix, fwd.matrix.T, atol=1e-9, rtol=0)

    def test_entropy_grows_with_lambda(self):
        rng = np.random.default_rng(5)
        lams = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0]
        for _ in range(20):
            C = rng.uniform(size=(6, 6))
            ent = [sinkhorn(C, lam=l).entropy() for l in lams]
            assert all(x <= y + 1e-9 for x, y in zip(ent, ent[1:]))

    def test_small_lambda_approaches_assignment(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            C = rng.uniform(size=(8, 8))
            res = sinkhorn(C, lam=0.002)
            assert res.marginal_error < 1e-9
            assert abs(res.value - assignment_coupling(C).value) < 1e-2

    def test_unrolled_matches_solver_after_many_iterations(self):
        C = np.random.default_rng(7).uniform(size=(5, 5))
        res, _ = sinkhorn_unrolled(C, lam=0.5, n_iter=500)
        np.testing.assert_allclose(res.matrix, sinkhorn(C, lam=0.5).matrix, atol=1e-10)


class TestAssignment:
    def test_identity_favoring(self):
        perm, total = exact_assignment(1 - np.eye(5))
        np.testing.assert_array_equal(perm, np.arange(5))
        assert total == 0

    def test_anti_diagonal(self):
        perm, total = exact_assignment([[2, 1], [1, 2]])
        np.testing.assert_array_equal(perm, [1, 0])
        assert total == 2

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            C = rng.uniform(size=(6, 6))
            perm, total = exact_assignment(C)
            bperm, btotal = brute_force_assignment(C.tolist())
            assert total == pytest.approx(btotal, abs=1e-12)
            np.testing.assert_array_equal(perm, bperm)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            exact_assignment(np.zeros((2, 3)))

    def test_assignment_coupling_is_scaled_permutation(self):
        C = np.random.default_rng(9).uniform(size=(4, 4))
        cp = assignment_coupling(C)
        np.testing.assert_allclose(cp.matrix.sum(axis=0), 0.25)
        np.testing.assert_allclose(cp.matrix.sum(axis=1), 0.25)
        assert cp.value == pytest.approx(exact_assignment(C)[1] / 4)


class TestBackward:
    def _fd(self, C, a, b, lam, n_iter, M, coords, h=1e-6):
        def loss():
            return float(np.sum(sinkhorn_unrolled(C, a, b, lam, n_iter)[0].matrix * M))

        _, tape = sinkhorn_unrolled(C, a, b, lam, n_iter)
        grad = sinkhorn_backward(tape, M)
        return max(rel_error(grad[idx], central_difference(loss, C, idx, h), floor=1e-7)
                   for idx in coords)

    @pytest.mark.parametrize("n_iter", [10, 50, 200])
    def test_finite_differences(self, n_iter):
        rng = np.random.default_rng(n_iter)
        C = rng.uniform(size=(8, 8))
        M = rng.normal(size=(8, 8))
        coords = [tuple(rng.integers(8, size=2)) for _ in range(50)]
        assert self._fd(C, uniform(8), uniform(8), 0.3, n_iter, M, coords) < 1e-4

    def test_random_5x5_nonuniform(self):
        rng = np.random.default_rng(11)
        C = rng.uniform(size=(5, 5))
        a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        coords = [(i, j) for i in range(5) for j in range(5)]
        assert self._fd(C, a, b, 0.2, 30, rng.normal(size=(5, 5)), coords) < 1e-4

    def test_large_lambda_single_iteration(self):
        rng = np.random.default_rng(12)
        C = rng.uniform(size=(4, 4))
        M = rng.normal(size=(4, 4))
        coords = [(i, j) for i in range(4) for j in range(4)]
        norms = []
        for lam in (1.0, 10.0, 100.0):
            assert self._fd(C, uniform(4), uniform(4), lam, 1, M, coords, h=1e-5) < 1e-4
            _, tape = sinkhorn_unrolled(C, lam=lam, n_iter=1)
            norms.append(np.abs(sinkhorn_backward(tape, M)).max())
        assert norms[0] > norms[1] > norms[2]

    def test_total_mass_has_zero_gradient(self):
        C = np.random.default_rng(13).uniform(size=(6, 6))
        _, tape = sinkhorn_unrolled(C, lam=0.5, n_iter=200)
        assert np.abs(sinkhorn_backward(tape, np.ones((6, 6)))).max() < 1e-8

    def test_tape_mismatch(self):
        _, tape = sinkhorn_unrolled(SWAP, lam=1, n_iter=3)
        with pytest.raises(StateError):
            sinkhorn_backward(tape, np.ones((3, 3)))
        with pytest.raises(StateError):
            sinkhorn_backward(None, np.ones((2, 2)))


def test_coupling_csv(tmp_path):
    gamma = np.array([[0.5, 1e-9], [0.0, 0.5]])
    write_coupling_csv(gamma, tmp_path / "c.csv", threshold=1e-6)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["row,col,mass", "0,0,0.5", "1,1,0.5"]
