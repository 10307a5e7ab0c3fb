import numpy as np
import pytest

from fedlab.errors import NumericError
from fedlab.linalg import frobenius_norm, l1_norm
from fedlab.rpca import RPCAConfig, default_lambda, default_mu, robust_pca


def planted_instance(seed, rows=200, cols=100, rank=5, sparse_fraction=0.05,
                     sparse_range=(-10.0, 10.0)):
    """Ground-truth low-rank + sparse pair used as the recovery oracle."""
    rng = np.random.default_rng([seed, 77])
    low_rank = rng.standard_normal((rows, rank)) @ rng.standard_normal((cols, rank)).T
    sparse = np.zeros(rows * cols)
    count = int(round(sparse_fraction * rows * cols))
    positions = rng.choice(rows * cols, size=count, replace=False)
    sparse[positions] = rng.uniform(*sparse_range, size=count)
    return low_rank, sparse.reshape(rows, cols)


class TestDefaults:
    def test_lambda_formula(self):
        assert default_lambda(100, 50) == pytest.approx(0.1)
        assert default_lambda(50, 100) == pytest.approx(0.1)
        assert default_lambda(1, 1) == pytest.approx(1.0)

    def test_mu_formula(self):
        m = np.full((100, 50), 0.2)  # l1 norm = 1000
        assert l1_norm(m) == pytest.approx(1000.0)
        assert default_mu(m) == pytest.approx(1.25)
        assert default_mu(np.array([[1.0]])) == pytest.approx(0.25)
        assert default_mu(np.full((2, 2), 2.0)) == pytest.approx(0.125)

    def test_mu_rejects_zero_matrix(self):
        with pytest.raises(ZeroDivisionError):
            default_mu(np.zeros((3, 3)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RPCAConfig(mu=-1.0)
        with pytest.raises(ValueError):
            RPCAConfig(lam=0.0)
        with pytest.raises(ValueError):
            RPCAConfig(tol=0.0)
        with pytest.raises(ValueError):
            RPCAConfig(max_iter=0)


class TestRobustPCA:
    def test_zero_matrix_short_circuits(self):
        dec = robust_pca(np.zeros((3, 3)))
        assert dec.converged and dec.iterations == 0
        np.testing.assert_array_equal(dec.low_rank, np.zeros((3, 3)))
        np.testing.assert_array_equal(dec.sparse, np.zeros((3, 3)))

    def test_rank_one_input_lands_in_low_rank_part(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal(200)
        v = rng.standard_normal(100)
        m = 10.0 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
        dec = robust_pca(m)
        assert dec.converged
        assert l1_norm(dec.sparse) <= 0.05 * l1_norm(m)
        assert frobenius_norm(m - dec.low_rank) <= 1e-3 * frobenius_norm(m)

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_recovery(self, seed):
        low_rank, sparse = planted_instance(seed)
        dec = robust_pca(low_rank + sparse)
        assert dec.converged
        assert frobenius_norm(dec.low_rank - low_rank) <= 1e-3 * frobenius_norm(low_rank)
        assert frobenius_norm(dec.sparse - sparse) <= 1e-3 * frobenius_norm(sparse)

    def test_reconstruction_bound_on_convergence(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((50, 20))
        cfg = RPCAConfig()
        dec = robust_pca(m, cfg)
        assert dec.converged
        assert frobenius_norm(m - dec.low_rank - dec.sparse) <= cfg.tol * frobenius_norm(m)
        assert dec.residual == frobenius_norm(m - dec.low_rank - dec.sparse)

    def test_termination_at_max_iter_is_not_an_error(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((30, 10))
        dec = robust_pca(m, RPCAConfig(max_iter=2))
        assert not dec.converged
        assert dec.iterations == 2

    def test_decomposition_idempotent_within_tolerance(self):
        low_rank, sparse = planted_instance(0)
        cfg = RPCAConfig()
        first = robust_pca(low_rank + sparse, cfg)
        second = robust_pca(first.low_rank + first.sparse, cfg)
        assert second.converged
        bound = 10 * cfg.tol
        assert frobenius_norm(second.low_rank - first.low_rank) <= bound * frobenius_norm(first.low_rank)
        assert frobenius_norm(second.sparse - first.sparse) <= bound * frobenius_norm(first.sparse)

    def test_scaling_equivariance_of_stopping_rule(self):
        low_rank, sparse = planted_instance(2, rows=60, cols=30, rank=3)
        m = low_rank + sparse
        cfg = RPCAConfig()
        for c in (1e-3, 1.0, 1e4):
            dec = robust_pca(c * m, cfg)
            assert dec.converged
            assert frobenius_norm(c * m - dec.low_rank - dec.sparse) <= cfg.tol * frobenius_norm(c * m)

    def test_deterministic(self):
        m = np.random.default_rng(9).standard_normal((40, 15))
        a = robust_pca(m)
        b = robust_pca(m)
        np.testing.assert_array_equal(a.low_rank, b.low_rank)
        np.testing.assert_array_equal(a.sparse, b.sparse)
        assert a.iterations == b.iterations and a.residual == b.residual

    def test_rejects_non_finite_input(self):
        m = np.ones((3, 3))
        m[0, 0] = np.nan
        with pytest.raises(ValueError):
            robust_pca(m)

    def test_explicit_hyperparameters_respected(self):
        m = np.random.default_rng(13).standard_normal((20, 10))
        loose = robust_pca(m, RPCAConfig(lam=100.0, max_iter=200))
        # an enormous sparsity weight forces S to zero
        assert l1_norm(loose.sparse) == 0.0

    def test_non_finite_iterate_raises_numeric_error(self):
        m = np.random.default_rng(1).standard_normal((10, 5))
        # absurd mu makes rho*Y explode within a few iterations
        with np.errstate(all="ignore"), pytest.raises(NumericError) as err:
            robust_pca(m, RPCAConfig(mu=1e-320, max_iter=50))
        assert "iteration" in str(err.value)
