import numpy as np
import pytest

from src.core.errors import ShapeError, TrainingError
from src.core.nn import (Mlp, OptimizerState, backward, check_gradients, clip_grad_norm, cosine_lr, forward,
                         init_mlp, numerical_gradients, optimizer_step, relative_error, train_loop)
from src.core.rng import rng_stream


def _affine(w, b):
    return Mlp((1, 1), [np.array([[w]], dtype=np.float64)], [np.array([b], dtype=np.float64)])


def test_identity_layer_passes_input_through():
    assert forward(_affine(1.0, 0.0), np.array([3.0]))[0] == 3.0


def test_affine_layer():
    assert forward(_affine(2.0, 1.0), np.array([3.0]))[0] == 7.0


def test_affine_backward():
    grads, dx = backward(_affine(2.0, 1.0), np.array([3.0]), np.array([1.0]))
    assert grads.weights[0][0, 0] == 3.0
    assert grads.biases[0][0] == 1.0
    assert dx[0] == 2.0


def test_wrong_input_width_rejected():
    net = init_mlp((3, 4, 2), rng_stream(0, "mlp"))
    with pytest.raises(ShapeError):
        forward(net, np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradients_match_central_differences(seed):
    rng = rng_stream(seed, "grad-check")
    net = init_mlp((3, 5, 4, 2), rng)
    x = rng.standard_normal((6, 3))
    c = rng.standard_normal((6, 2))
    params = net.named_parameters("net")

    def loss():
        return float(np.sum(forward(net, x) * c))

    grads, _ = backward(net, x, c)
    assert check_gradients(loss, params, grads.named("net")) < 1e-6


def test_mlp_input_gradient_matches_central_differences():
    rng = rng_stream(2, "grad-check")
    net = init_mlp((3, 4, 2), rng)
    x = rng.standard_normal((2, 3))
    c = rng.standard_normal((2, 2))
    _, dx = backward(net, x, c)
    numeric = numerical_gradients(lambda: float(np.sum(forward(net, x) * c)), {"x": x})
    assert relative_error({"x": dx}, numeric) < 1e-6


def test_clip_halves_norm_sixty_at_thirty():
    grads = {"a": np.array([36.0, 48.0])}
    clipped, norm = clip_grad_norm(grads, 30.0)
    assert norm == pytest.approx(60.0)
    assert clipped["a"].tolist() == pytest.approx([18.0, 24.0])


def test_clip_leaves_small_gradients():
    clipped, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 30.0)
    assert norm == pytest.approx(5.0)
    assert clipped["a"].tolist() == [3.0, 4.0]


def test_first_adam_step_moves_by_learning_rate():
    params = {"p": np.array([0.0])}
    state = OptimizerState(learning_rate=0.1, weight_decay=0.0)
    optimizer_step(state, params, {"p": np.array([3.0])})
    assert params["p"][0] == pytest.approx(-0.1)
    assert state.step == 1


def test_non_finite_gradient_names_parameter():
    params = {"w": np.zeros(2)}
    with pytest.raises(TrainingError) as excinfo:
        optimizer_step(OptimizerState(), params, {"w": np.array([0.0, np.nan])})
    assert excinfo.value.param_name == "w"
    assert params["w"].tolist() == [0.0, 0.0]


def test_non_finite_loss_stops_training():
    params = {"w": np.zeros(1)}

    def objective(rng, step):
        return float("inf"), {"w": np.zeros(1)}, {}

    with pytest.raises(TrainingError):
        train_loop(params, objective, 3, OptimizerState(), seed=0, label="boom")


def test_cosine_schedule_with_warmup():
    assert cosine_lr(0, 10, 1.0, warmup_steps=2) == pytest.approx(0.5)
    assert cosine_lr(1, 10, 1.0, warmup_steps=2) == pytest.approx(1.0)
    assert cosine_lr(2, 10, 1.0, warmup_steps=2) == pytest.approx(1.0)
    assert cosine_lr(10, 10, 1.0, warmup_steps=2, min_ratio=0.1) == pytest.approx(0.1)


def _noisy_quadratic(params):
    target = np.array([1.0, -2.0])

    def objective(rng, step):
        diff = params["p"] - target
        grads = {"p": 2.0 * diff + 0.1 * rng.standard_normal(2)}
        return float(np.sum(diff * diff)), grads, {}

    return objective


def test_resumed_training_matches_uninterrupted_run():
    full = {"p": np.zeros(2)}
    history = train_loop(full, _noisy_quadratic(full), 10, OptimizerState(learning_rate=0.05),
                         seed=4, label="quad", warmup_steps=2)

    resumed = {"p": np.zeros(2)}
    optimizer = OptimizerState(learning_rate=0.05)
    first = train_loop(resumed, _noisy_quadratic(resumed), 10, optimizer,
                       seed=4, label="quad", warmup_steps=2, stop_step=4)
    restored = OptimizerState.from_dict(optimizer.to_dict())
    rest = train_loop(resumed, _noisy_quadratic(resumed), 10, restored,
                      seed=4, label="quad", warmup_steps=2, start_step=4)

    assert [r.step for r in first] == [0, 1, 2, 3]
    assert [r.loss for r in first + rest] == [r.loss for r in history]
    assert np.array_equal(resumed["p"], full["p"])


def test_training_reduces_loss():
    params = {"p": np.zeros(2)}
    history = train_loop(params, _noisy_quadratic(params), 200, OptimizerState(learning_rate=0.05, weight_decay=0.0),
                         seed=0, label="quad")
    assert history[-1].loss < 0.1 * history[0].loss


@pytest.mark.slow
def test_mlp_fits_sine():
    net = init_mlp((1, 32, 32, 1), rng_stream(0, "sine-init"))
    params = net.named_parameters("net")
    grid = np.linspace(-3.0, 3.0, 200)[:, None]

    def objective(rng, step):
        x = rng.uniform(-3.0, 3.0, size=(64, 1))
        diff = forward(net, x) - np.sin(x)
        grads, _ = backward(net, x, 2.0 * diff / len(x))
        return float(np.mean(diff * diff)), grads.named("net"), {}

    train_loop(params, objective, 5000, OptimizerState(learning_rate=0.01, weight_decay=0.0), seed=0,
               label="sine", warmup_steps=100)
    assert float(np.mean((forward(net, grid) - np.sin(grid)) ** 2)) < 1e-2
