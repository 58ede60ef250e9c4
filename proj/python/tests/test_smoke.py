import json

import numpy as np
import pytest

import kronfisher as kf


def random_stats(rng, m=12, d_in=3, d_out=2):
    abar = np.hstack([np.ones((m, 1)), rng.standard_normal((m, d_in))])
    return abar, rng.standard_normal((m, d_out))


def test_zigzag_of_kronecker_product_is_rank_one():
    rng = np.random.default_rng(0)
    R, S = rng.standard_normal((3, 3)), rng.standard_normal((2, 2))
    Z = kf.zigzag(kf.kron(R, S), 3, 2)
    np.testing.assert_allclose(Z, np.outer(R.flatten("F"), S.flatten("F")), atol=1e-14)
    np.testing.assert_allclose(kf.kron(R, S), np.kron(R, S))


def test_matrix_free_products_match_dense():
    rng = np.random.default_rng(1)
    abar, g = random_stats(rng)
    Z = kf.zigzag(kf.exact_fim_block(abar, g), 4, 2)
    v, u = rng.standard_normal(4), rng.standard_normal(16)
    np.testing.assert_allclose(kf.zf_matvec(abar, g, v), Z @ v, atol=1e-12)
    np.testing.assert_allclose(kf.zf_rmatvec(abar, g, u), Z.T @ u, atol=1e-12)


def test_kpsvd_beats_kfac():
    rng = np.random.default_rng(2)
    abar, g = random_stats(rng)
    F = kf.exact_fim_block(abar, g)
    A, G = kf.kfac_factors(abar, g)
    R, S, sigma, converged = kf.kpsvd_factors(abar, g, eps=1e-10, k_max=10000)
    assert converged and sigma > 0
    assert np.linalg.norm(F - np.kron(R, S)) <= np.linalg.norm(F - np.kron(A, G)) + 1e-9
    rank2 = kf.deflation_factors(abar, g, eps=1e-10, k_max=10000)
    C, D = rank2["second"]
    assert np.linalg.norm(F - np.kron(R, S) - np.kron(C, D)) <= np.linalg.norm(F - np.kron(R, S)) + 1e-9


def test_kron_sum_solve():
    rng = np.random.default_rng(3)
    A = np.eye(3) * 2 + 0.1 * np.ones((3, 3))
    B = np.eye(2) * 3
    C = 0.2 * np.eye(3)
    D = 0.1 * np.array([[1.0, 0.5], [0.5, -1.0]])
    V = rng.standard_normal((2, 3))
    U, safeguarded = kf.kron_sum_solve(A, B, C, D, V)
    K = np.kron(A, B) + np.kron(C, D)
    np.testing.assert_allclose(U.flatten("F"), np.linalg.solve(K, V.flatten("F")), rtol=1e-10)
    assert safeguarded == 0


def test_formulas():
    assert kf.damping_pi(np.eye(3), 4 * np.eye(2)) == 0.5
    assert kf.ema_weight(1, 0.95) == 0.0
    nu, scaled = kf.kl_clip([np.array([[0.04]])], [np.array([[1.0]])], 0.01)
    assert nu == 0.5
    np.testing.assert_allclose(scaled[0], [[0.02]])


def test_errors_are_python_exceptions():
    with pytest.raises(ValueError):
        kf.zigzag(np.zeros((6, 6)), 4, 2)
    with pytest.raises(ArithmeticError):
        kf.apply_rank1_inverse(-np.eye(2), np.eye(2), np.ones((2, 2)))


def test_data_and_presets(tmp_path):
    X = kf.gen_synthetic_curves(20, 5)
    assert X.shape == (20, 784) and X.min() >= 0 and X.max() <= 1
    path = str(tmp_path / "x.idx")
    kf.save_idx_images(path, X, 28, 28)
    assert np.abs(kf.load_idx(path) - X).max() <= 0.5 / 255 + 1e-12
    layers, acts, loss = kf.preset_architecture("faces")
    assert layers[0] == 625 and acts[-1] == "Linear" and loss == "mean_squared_error"


def test_short_experiment_is_reproducible():
    cfg = json.dumps({"schema_version": 1, "n_train": 128, "n_val": 32, "epochs": 2,
                      "optimizer": {"method": "kfac", "batch_size": 32, "lr": 0.1, "t1": 2, "t2": 2}})
    a = kf.run_experiment(cfg)
    b = kf.run_experiment(cfg)
    assert a["epoch_train_loss"] == b["epoch_train_loss"]
    assert a["final_train_loss"] < a["initial_train_loss"]
    assert json.loads(kf.normalize_config(cfg))["optimizer"]["t1"] == 2
