import json
import math

import numpy as np
import pandas as pd
import pytest

from src.errors import DiagnosticsError
from src.logic import diagnostics_engine as de
from src.logic import koopman_engine
from src.logic.edmd_engine import Dictionary, edmd_fit
from src.logic.numerics import make_rng


class _Lifted:
    def __init__(self, B):
        self.B = np.asarray(B, dtype=float)


def _white_noise(samples, n, seed=0):
    rng = make_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return rng.standard_normal((samples, n)) @ Q


def test_gram_condition_of_white_noise_is_near_one():
    kappa, lam_min = de.gram_condition_from_embeddings(_white_noise(100_000, 4))
    assert kappa == pytest.approx(1.0, rel=0.1)
    assert lam_min > 0


def test_gram_condition_scale_and_shift_invariance():
    Z = make_rng(1).standard_normal((200, 3)) @ np.diag([1.0, 2.0, 5.0])
    kappa, _ = de.gram_condition_from_embeddings(Z)
    assert de.gram_condition_from_embeddings(3.0 * Z)[0] == pytest.approx(kappa, rel=1e-9)
    assert de.gram_condition_from_embeddings(Z + 7.0)[0] == pytest.approx(kappa, rel=1e-6)


def test_duplicate_or_constant_feature_is_infinite():
    Z = make_rng(2).standard_normal((50, 2))
    assert de.gram_condition_from_embeddings(np.hstack([Z, Z[:, :1]]))[0] == math.inf
    assert de.gram_condition_from_embeddings(np.hstack([Z, np.ones((50, 1))]))[0] == math.inf
    assert de.degenerate_coordinates(np.hstack([Z, np.ones((50, 1))])) == [2]


def test_control_condition_examples():
    Q, _ = np.linalg.qr(make_rng(3).standard_normal((4, 2)))
    assert de.control_condition(_Lifted(Q)) == pytest.approx(1.0)
    assert de.control_condition(_Lifted([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])) == pytest.approx(4.0)
    scaled = Q * np.array([3.0, 1.0])
    assert de.control_condition(_Lifted(scaled)) == pytest.approx(9.0)
    assert de.control_condition(_Lifted([[1.0, 2.0], [2.0, 4.0]])) == math.inf
    with pytest.raises(ValueError):
        de.control_condition(_Lifted(np.zeros((3, 0))))


def test_correlation_of_independent_noise():
    corr, mean_abs, excluded = de.feature_correlation_from_embeddings(make_rng(4).standard_normal((100_000, 4)))
    assert mean_abs < 0.02
    assert excluded == []
    assert np.allclose(corr, corr.T)
    assert np.allclose(np.diag(corr), 1.0, atol=1e-9)


def test_correlation_of_duplicate_pair():
    Z = make_rng(5).standard_normal((100, 2))
    corr, _, _ = de.feature_correlation_from_embeddings(np.hstack([Z, 2.0 * Z[:, :1]]))
    assert corr[0, 2] == pytest.approx(1.0)


def test_constant_coordinates_are_excluded():
    Z = np.hstack([make_rng(6).standard_normal((30, 2)), np.full((30, 1), 4.0)])
    corr, mean_abs, excluded = de.feature_correlation_from_embeddings(Z)
    assert excluded == [2]
    assert np.isnan(corr[0, 2]) and corr[2, 2] == 1.0
    assert 0.0 <= mean_abs <= 1.0
    with pytest.raises(DiagnosticsError):
        de.feature_correlation_from_embeddings(np.ones((10, 3)))


def test_too_few_samples():
    with pytest.raises(ValueError):
        de.centered_covariance(np.ones((1, 3)))


def test_diagnose_koopman_model(pendulum_data):
    model = koopman_engine.init_model(2, 1, 2, seed=0, hidden_width=8)
    report = de.diagnose(model, pendulum_data)
    assert report.kappa_G >= 1.0
    assert report.kappa_BtB is not None and report.kappa_BtB >= 1.0
    assert len(report.correlation) == model.n
    kappa, lam = de.gram_condition(model, pendulum_data)
    assert report.kappa_G == kappa and report.lambda_min_G == lam
    _, mean_abs = de.feature_correlation(model, pendulum_data)
    assert report.mean_abs_offdiag_corr == mean_abs


def test_diagnose_autonomous_edmd_model(polynomial_data):
    model = edmd_fit(polynomial_data, Dictionary.identity(3))
    report = de.diagnose(model, polynomial_data)
    assert report.kappa_BtB is None


def test_diagnose_accepts_raw_states():
    model = koopman_engine.init_model(1, 1, 1, seed=0, hidden_width=4)
    states = np.linspace(-1.0, 1.0, 20).reshape(-1, 1)
    assert de.diagnose(model, states).kappa_G >= 1.0


def test_save_report(tmp_path, pendulum_data):
    model = koopman_engine.init_model(2, 1, 1, seed=0, hidden_width=8)
    report = de.diagnose(model, pendulum_data)
    path = de.save_report(report, str(tmp_path / "diag" / "diagnostics.json"), str(tmp_path / "corr.csv"))
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    assert set(doc) >= {"kappa_G", "lambda_min_G", "kappa_BtB", "mean_abs_offdiag_corr", "correlation"}
    corr = pd.read_csv(tmp_path / "corr.csv", index_col=0)
    assert corr.shape == (model.n, model.n)
    assert list(corr.columns) == [f"z{i}" for i in range(model.n)]
