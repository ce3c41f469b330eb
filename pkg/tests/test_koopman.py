import numpy as np
import pytest

from src.errors import TrainingError
from src.logic import koopman_engine as ke
from src.logic.numerics import finite_diff_grad, make_rng
from src.models.base import TrainConfig
from tests.builders import lifted_scalar_model, scalar_windows


def _block_errors(model, analytic, numeric):
    """Relative error per parameter block: ‖g_num - g‖ / max(‖g_num‖, ‖g‖)."""
    out, offset = {}, 0
    for name in ke.PARAM_ORDER:
        size = int(np.prod(model.shapes()[name]))
        a, n = analytic[offset:offset + size], numeric[offset:offset + size]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        diff = float(np.linalg.norm(a - n))
        # blocks with a vanishing gradient are compared in absolute terms
        out[name] = 0.0 if diff <= 1e-8 else diff / scale
        offset += size
    return out


def _random_batch(n_x, n_u, b, T, seed):
    rng = make_rng(seed, 9)
    return rng.uniform(-1, 1, size=(b, T + 1, n_x)), rng.uniform(-1, 1, size=(b, T, n_u))


def _zero_encoder(n_x, n_u, A, B, H=3):
    n = np.asarray(A).shape[0]
    return ke.KoopmanModel(
        n_x=n_x, n_u=n_u, n_mult=n // n_x - 1, hidden_width=H,
        W1=np.zeros((H, n_x)), b1=np.zeros(H), W2=np.zeros((H, H)), b2=np.zeros(H),
        W3=np.zeros((n - n_x, H)), A=np.asarray(A, dtype=float), B=np.asarray(B, dtype=float),
    )


# ---------------------------------------------------------------- init and encoder

def test_init_shapes_and_orthogonality():
    model = ke.init_model(2, 1, 3, seed=0, hidden_width=16)
    assert model.n == 8 and model.n_enc == 6
    assert np.allclose(np.linalg.svd(model.A, compute_uv=False), 0.99, atol=1e-9)
    assert np.allclose(model.W3 @ model.W3.T, np.eye(6), atol=1e-9)
    assert model.param_count == model.to_vector().size


def test_init_is_deterministic():
    a = ke.init_model(2, 1, 2, seed=5, hidden_width=8)
    b = ke.init_model(2, 1, 2, seed=5, hidden_width=8)
    c = ke.init_model(2, 1, 2, seed=6, hidden_width=8)
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert not np.array_equal(a.to_vector(), c.to_vector())
    with pytest.raises(ValueError):
        ke.init_model(2, 1, 0, seed=0)


def test_state_augmentation_identity():
    model = ke.init_model(3, 0, 2, seed=1, hidden_width=8)
    X = make_rng(1).uniform(-2, 2, size=(100, 3))
    Z = ke.encode(model, X)
    assert np.array_equal(Z[:, :3], X)
    assert np.array_equal(Z @ model.P.T, X)


def test_zero_output_layer_gives_zero_features():
    model = ke.init_model(2, 1, 1, seed=0, hidden_width=4).model_copy(update={"W3": np.zeros((2, 4))})
    assert np.array_equal(ke.encode(model, np.array([0.4, -0.1])), [0.4, -0.1, 0.0, 0.0])


def test_encode_jacobian_matches_finite_differences():
    model = ke.init_model(2, 1, 2, seed=2, hidden_width=8)
    x = np.array([0.3, -0.7])
    analytic = ke.encode_jacobian(model, x)
    for i in range(model.n):
        numeric = finite_diff_grad(lambda v: ke.encode(model, v)[i], x, h=1e-6)
        assert np.linalg.norm(numeric - analytic[i]) <= 1e-5 * max(np.linalg.norm(analytic[i]), 1.0)


def test_with_vector_round_trip_and_size_check():
    model = ke.init_model(1, 1, 1, seed=0, hidden_width=3)
    vec = model.to_vector()
    assert np.array_equal(model.with_vector(vec).to_vector(), vec)
    with pytest.raises(ValueError):
        model.with_vector(vec[:-1])


def test_shape_validation():
    with pytest.raises(ValueError):
        _zero_encoder(1, 1, np.eye(2), np.zeros((3, 1)))


# ---------------------------------------------------------------- rollout and losses

def test_rollout_identity_dynamics():
    model = _zero_encoder(1, 1, np.eye(2), np.zeros((2, 1)))
    _, X_hat, blown = ke.rollout_latent(model, np.array([1.5]), np.zeros((4, 1)))
    assert np.allclose(X_hat[:, 0], 1.5) and not blown


def test_rollout_hand_recursion():
    model = _zero_encoder(1, 1, 0.5 * np.eye(2), [[1.0], [0.0]])
    Z_hat, X_hat, _ = ke.rollout_latent(model, np.array([2.0]), np.array([[1.0], [1.0]]))
    assert np.allclose(X_hat[:, 0], [2.0, 2.0])
    one, _, _ = ke.rollout_latent(model, np.array([2.0]), np.array([[1.0]]))
    assert np.allclose(one[0], model.A @ ke.encode(model, np.array([2.0])) + model.B @ [1.0])


def test_rollout_blow_up_flag():
    model = _zero_encoder(1, 1, 1e7 * np.eye(2), np.zeros((2, 1)))
    _, X_hat, blown = ke.rollout_latent(model, np.array([1.0]), np.zeros((3, 1)))
    assert blown and np.isnan(X_hat[-1, 0])


def test_loss_pred_discount_example():
    model = _zero_encoder(1, 1, [[1.0, 0.0], [0.0, 0.0]], np.zeros((2, 1)))
    cfg = TrainConfig(T=2, beta=0.5)
    window = (np.array([[0.0], [1.0], [2.0]]), np.zeros((2, 1)))
    assert ke.loss_pred(model, window, cfg) == pytest.approx(2.0)

    one_step = TrainConfig(T=1, beta=0.3)
    assert ke.loss_pred(model, window, one_step) == pytest.approx(1.0)


def test_loss_pred_zero_on_exact_model():
    model = lifted_scalar_model()
    S, U = scalar_windows(0.8, 0.5, 3, 4)
    cfg = TrainConfig(T=4)
    for s, u in zip(S, U):
        assert ke.loss_pred(model, (s, u), cfg) < 1e-20


def test_loss_cov_examples():
    assert ke.loss_cov(np.array([[0.0, 0.0], [1.0, 1.0]])) == pytest.approx(0.25)
    diagonal = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert ke.loss_cov(diagonal) == pytest.approx(0.0, abs=1e-15)
    Z = make_rng(4).standard_normal((9, 3))
    assert ke.loss_cov(Z[::-1]) == pytest.approx(ke.loss_cov(Z), rel=1e-12)
    with pytest.raises(ValueError):
        ke.loss_cov(np.ones((1, 3)))


def test_loss_cov_gradient():
    Z = make_rng(8).standard_normal((6, 4))
    _, grad = ke._cov_loss_and_grad(Z)
    numeric = finite_diff_grad(lambda v: ke.loss_cov(v), Z, h=1e-6)
    assert np.linalg.norm(numeric - grad) <= 1e-4 * np.linalg.norm(grad)


def test_inverse_control_examples():
    model = _zero_encoder(1, 1, np.zeros((2, 2)), [[1.0], [0.0]])
    u = ke.inverse_control(model, np.zeros(2), np.array([3.0, -8.0]), 0.0)
    assert u[0, 0] == pytest.approx(3.0)

    for c in (0.5, 2.0):
        scaled = model.model_copy(update={"B": np.array([[c], [0.0]])})
        u = ke.inverse_control(scaled, np.zeros(2), np.array([3.0, 0.0]), 1e-2)
        assert u[0, 0] == pytest.approx(3.0 * c / (c * c + 1e-2))


def test_loss_ctrl_vanishes_on_consistent_data():
    model = lifted_scalar_model()
    cfg = TrainConfig(T=3, eps_B=0.0)
    S, U = scalar_windows(0.8, 0.5, 4, 3)
    for s, u in zip(S, U):
        assert ke.loss_ctrl(model, (s, u), cfg) < 1e-10
    with pytest.raises(ValueError):
        ke.loss_ctrl(_zero_encoder(1, 0, np.eye(2), np.zeros((2, 0))), (S[0], U[0][:, :0]), cfg)


def test_composite_reduces_to_pred_without_weights():
    model = ke.init_model(2, 1, 1, seed=3, hidden_width=6)
    cfg = TrainConfig(T=2, w_cov=0.0, w_ctrl=0.0)
    S, U = _random_batch(2, 1, 4, 2, seed=1)
    out = ke.composite_loss(model, (S, U), cfg)
    expected = np.mean([ke.loss_pred(model, (s, u), cfg) for s, u in zip(S, U)])
    assert out.total == pytest.approx(expected, rel=1e-12)
    assert out.total == out.pred


def test_composite_matches_term_functions():
    model = ke.init_model(2, 1, 1, seed=3, hidden_width=6)
    cfg = TrainConfig(T=2, w_cov=0.7, w_ctrl=0.3)
    S, U = _random_batch(2, 1, 5, 2, seed=2)
    out = ke.composite_loss(model, (S, U), cfg)
    assert out.cov == pytest.approx(ke.loss_cov(ke.encode(model, S[:, 0])), rel=1e-12)
    assert out.ctrl == pytest.approx(np.mean([ke.loss_ctrl(model, (s, u), cfg) for s, u in zip(S, U)]), rel=1e-10)
    assert out.total == pytest.approx(out.pred + 0.7 * out.cov + 0.3 * out.ctrl)


@pytest.mark.parametrize("point", range(20))
def test_total_gradient_matches_finite_differences(point):
    n_x, n_u = (1, 1) if point % 2 == 0 else (2, 2)
    model = ke.init_model(n_x, n_u, 1 + point % 3, seed=point, hidden_width=5)
    model = model.model_copy(update={"B": 10.0 * model.B})
    cfg = TrainConfig(T=2, beta=0.8, w_cov=0.5, w_ctrl=0.2, eps_B=1e-3)
    S, U = _random_batch(n_x, n_u, 4, 2, seed=point)
    _, analytic = ke.total_loss_and_grads(model, (S, U), cfg)
    f = lambda vec: ke.total_loss_and_grads(model.with_vector(vec), (S, U), cfg)[0]
    numeric = finite_diff_grad(f, model.to_vector(), h=1e-6)
    errors = _block_errors(model, analytic, numeric)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("term", ["pred", "cov", "ctrl"])
@pytest.mark.parametrize("point", range(20))
def test_each_loss_term_gradient_matches_finite_differences(term, point):
    n_x, n_u = (1, 1) if point % 2 == 0 else (2, 2)
    model = ke.init_model(n_x, n_u, 1 + point % 3, seed=100 + point, hidden_width=5)
    model = model.model_copy(update={"B": 10.0 * model.B})
    S, U = _random_batch(n_x, n_u, 4, 2, seed=100 + point)
    off = TrainConfig(T=2, beta=0.8, w_cov=0.0, w_ctrl=0.0, eps_B=1e-3)
    analytic = ke.composite_loss(model, (S, U), off).grad
    if term != "pred":
        # unit weight on one term, the unweighted run removes L_pred
        on = off.model_copy(update={f"w_{term}": 1.0})
        analytic = ke.composite_loss(model, (S, U), on).grad - analytic
    f = lambda vec: getattr(ke.composite_loss(model.with_vector(vec), (S, U), off), term)
    numeric = finite_diff_grad(f, model.to_vector(), h=1e-6)
    errors = _block_errors(model, analytic, numeric)
    assert max(errors.values()) < 1e-4, errors
    grads = model.with_vector(analytic)
    # every term reaches the encoder; L_cov never touches the dynamics
    assert np.any(grads.W3)
    if term == "cov":
        assert not np.any(grads.A) and not np.any(grads.B)


def test_pred_gradient_on_toy_batch():
    model = ke.init_model(1, 1, 1, seed=11, hidden_width=4)
    cfg = TrainConfig(T=2, w_cov=0.0, w_ctrl=0.0)
    S, U = _random_batch(1, 1, 4, 2, seed=11)
    _, analytic = ke.total_loss_and_grads(model, (S, U), cfg)
    numeric = finite_diff_grad(lambda v: ke.total_loss_and_grads(model.with_vector(v), (S, U), cfg)[0],
                               model.to_vector(), h=1e-6)
    assert max(_block_errors(model, analytic, numeric).values()) < 1e-4


def test_duplicated_batch_gives_same_gradient():
    model = ke.init_model(2, 1, 1, seed=4, hidden_width=6)
    cfg = TrainConfig(T=2, w_cov=0.0, w_ctrl=0.5)
    S, U = _random_batch(2, 1, 3, 2, seed=4)
    total, grad = ke.total_loss_and_grads(model, (S, U), cfg)
    total2, grad2 = ke.total_loss_and_grads(model, (np.concatenate([S, S]), np.concatenate([U, U])), cfg)
    assert total2 == pytest.approx(total, rel=1e-12)
    assert np.allclose(grad2, grad, rtol=1e-10, atol=1e-14)


def test_window_list_and_array_batches_agree():
    model = ke.init_model(2, 1, 1, seed=4, hidden_width=6)
    cfg = TrainConfig(T=2)
    S, U = _random_batch(2, 1, 3, 2, seed=5)
    a = ke.composite_loss(model, (S, U), cfg)
    b = ke.composite_loss(model, list(zip(S, U)), cfg)
    assert a.total == b.total and np.array_equal(a.grad, b.grad)


def test_blow_up_clips_loss():
    model = _zero_encoder(1, 1, 1e7 * np.eye(2), np.zeros((2, 1)))
    S, U = np.ones((3, 3, 1)), np.zeros((3, 2, 1))
    out = ke.composite_loss(model, (S, U), TrainConfig(T=2))
    assert out.blown and out.total == ke.LOSS_CLIP
    assert not np.any(out.grad)


def test_non_finite_window_is_named():
    model = ke.init_model(1, 1, 1, seed=0, hidden_width=3)
    S, U = _random_batch(1, 1, 3, 2, seed=0)
    S[1, 2, 0] = np.nan
    with pytest.raises(TrainingError, match="window 1"):
        ke.total_loss_and_grads(model, (S, U), TrainConfig(T=2))


def test_prediction_error_exact_model_and_blow_up():
    S, U = scalar_windows(0.8, 0.5, 6, 3)
    assert ke.prediction_error(lifted_scalar_model(), S, U) < 1e-20
    unstable = _zero_encoder(1, 1, 1e7 * np.eye(2), np.zeros((2, 1)))
    assert ke.prediction_error(unstable, np.ones_like(S), U) == ke.LOSS_CLIP
