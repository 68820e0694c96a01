"""Tests for app.mlp.network and app.mlp.optimizer."""

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ContractError, NumericError
from app.mlp.network import (
    STORAGE_DTYPE,
    Activation,
    NetworkSpec,
    backward,
    batch_forward,
    forward,
    init_network,
    weights_from_arrays,
)
from app.mlp.optimizer import OptimizerConfig, init_optimizer, optimizer_step


def numeric_grad(f, values: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(values)
    for idx in np.ndindex(values.shape):
        orig = values[idx]
        values[idx] = orig + eps
        up = f()
        values[idx] = orig - eps
        down = f()
        values[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def randomize_biases(net, rng: np.random.Generator) -> None:
    """Nonzero biases keep dead ReLU rows from pinning the next layer at z = 0."""
    for b in net.biases:
        b.values[:] = rng.uniform(0.1, 0.5, size=b.values.shape) * rng.choice([-1.0, 1.0], size=b.values.shape)


def assert_clear_of_kinks(tape, margin: float = 1e-4) -> None:
    """Central differences straddle the ReLU kink when a hidden pre-activation is within eps of 0."""
    for z in tape.pre_activations[:-1]:
        assert np.abs(z).min() > margin


def loop_forward(net, x: np.ndarray) -> np.ndarray:
    """Scalar triple-loop reference of the masked forward pass."""
    out = np.zeros((len(x), net.spec.out_dim))
    last = net.spec.n_layers - 1
    for r in range(len(x)):
        h = list(x[r])
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            inp = h + list(x[r]) if i == net.spec.skip_input_at else h
            rows, cols = w.values.shape
            z = [sum(inp[a] * w.values[a, c] * w.mask[a, c] for a in range(rows)) + b.values[c] for c in range(cols)]
            h = z if i == last else [max(v, 0.0) for v in z]
        out[r] = h
    return out


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray) -> None:
    err = np.abs(analytic - numeric)
    tol = np.maximum(1e-4 * np.abs(numeric), 1e-6)
    assert np.all(err <= tol), f"max error {err.max():.3g}"


class TestNetworkSpec:
    def test_layer_shapes_with_skip(self, tiny_spec):
        assert tiny_spec.n_layers == 3
        assert tiny_spec.layer_shape(0) == (5, 8)
        assert tiny_spec.layer_shape(2) == (8 + 5, 3)

    @pytest.mark.parametrize("kwargs", [
        dict(layer_widths=(4,)),
        dict(layer_widths=(4, 0, 2)),
        dict(layer_widths=(4, 8, 2), skip_input_at=0),
        dict(layer_widths=(4, 8, 2), skip_input_at=2),
    ])
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ValidationError):
            NetworkSpec(**kwargs)


class TestInit:
    def test_deterministic_for_seed(self, tiny_spec):
        a, b = init_network(tiny_spec), init_network(tiny_spec)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa.values, wb.values)

    def test_fan_in_bound_and_full_mask(self, tiny_spec):
        net = init_network(tiny_spec)
        for i, w in enumerate(net.weights):
            assert w.values.dtype == STORAGE_DTYPE
            assert np.abs(w.values).max() <= np.sqrt(6.0 / tiny_spec.layer_shape(i)[0])
            assert w.mask.all()
        assert all(not b.values.any() for b in net.biases)


class TestForward:
    def test_output_shape(self, tiny_network, rng):
        out = batch_forward(tiny_network, rng.normal(size=(7, 5)))
        assert out.shape == (7, 3)

    def test_wrong_input_width(self, tiny_network):
        with pytest.raises(ContractError):
            forward(tiny_network, np.zeros((2, 4)))

    def test_identity_network(self):
        spec = NetworkSpec(layer_widths=(2, 2), seed=0)
        net = weights_from_arrays(spec, [np.eye(2)], [np.zeros(2)])
        x = np.array([[1.5, -2.0]])
        assert np.allclose(batch_forward(net, x), x)

    def test_relu_output_activation(self):
        spec = NetworkSpec(layer_widths=(1, 1), output_activation=Activation.RELU)
        net = weights_from_arrays(spec, [np.array([[1.0]])], [np.array([0.0])])
        assert batch_forward(net, np.array([[-3.0]]))[0, 0] == 0.0

    def test_skip_layer_reads_input(self):
        spec = NetworkSpec(layer_widths=(1, 1, 1), skip_input_at=1)
        net = weights_from_arrays(spec, [np.array([[0.0]]), np.array([[0.0], [2.0]])], [np.zeros(1), np.zeros(1)])
        assert batch_forward(net, np.array([[3.0]]))[0, 0] == pytest.approx(6.0)

    def test_batch_equals_single_rows(self, tiny_network, rng):
        net = tiny_network.astype(np.float64)
        x = rng.normal(size=(9, 5))
        batch = batch_forward(net, x)
        rows = np.concatenate([batch_forward(net, x[i:i + 1]) for i in range(len(x))])
        assert np.allclose(batch, rows, rtol=1e-6, atol=1e-12)

    def test_matches_loop_matmul(self, tiny_spec, rng):
        net = init_network(tiny_spec).astype(np.float64)
        randomize_biases(net, rng)
        x = rng.normal(size=(4, 5))
        assert np.allclose(batch_forward(net, x), loop_forward(net, x), rtol=1e-6, atol=1e-12)


class TestBackward:
    def test_matches_finite_differences(self, tiny_spec, rng):
        net = init_network(tiny_spec).astype(np.float64)
        randomize_biases(net, rng)
        x = rng.normal(size=(6, 5))
        g = rng.normal(size=(6, 3))

        def loss() -> float:
            return float(np.sum(batch_forward(net, x) * g))

        _, tape = forward(net, x)
        assert_clear_of_kinks(tape)
        d_input = backward(net, tape, g)
        for p in net.parameters():
            assert_grad_close(p.grads, numeric_grad(loss, p.values))

        def loss_x() -> float:
            return float(np.sum(batch_forward(net, x) * g))
        assert_grad_close(d_input, numeric_grad(loss_x, x))

    def test_masked_gradients_are_zero(self, tiny_network, rng):
        w = tiny_network.weights[1]
        w.mask[0, :] = False
        w.apply_mask()
        x = rng.normal(size=(4, 5))
        _, tape = forward(tiny_network, x)
        backward(tiny_network, tape, np.ones((4, 3)))
        assert not w.grads[~w.mask].any()

    def test_gradients_accumulate(self, tiny_network, rng):
        x = rng.normal(size=(3, 5))
        _, tape = forward(tiny_network, x)
        backward(tiny_network, tape, np.ones((3, 3)))
        once = tiny_network.weights[0].grads.copy()
        backward(tiny_network, tape, np.ones((3, 3)))
        assert np.allclose(tiny_network.weights[0].grads, 2 * once)

    def test_stale_tape_rejected(self, tiny_network, rng):
        _, tape = forward(tiny_network, rng.normal(size=(2, 5)))
        tiny_network.touch()
        with pytest.raises(ContractError):
            backward(tiny_network, tape, np.zeros((2, 3)))

    def test_foreign_tape_rejected(self, tiny_network, tiny_spec, rng):
        _, tape = forward(tiny_network, rng.normal(size=(2, 5)))
        with pytest.raises(ContractError):
            backward(init_network(tiny_spec), tape, np.zeros((2, 3)))

    def test_out_grad_shape_checked(self, tiny_network, rng):
        _, tape = forward(tiny_network, rng.normal(size=(2, 5)))
        with pytest.raises(ContractError):
            backward(tiny_network, tape, np.zeros((3, 3)))


class TestOptimizer:
    def _step(self, net, x, cfg=None):
        opt = init_optimizer(net, cfg)
        _, tape = forward(net, x)
        backward(net, tape, np.ones((len(x), 3)))
        optimizer_step(net, opt)
        return opt

    def test_first_step_moves_every_live_weight_by_lr(self, tiny_network, rng):
        before = [w.values.copy() for w in tiny_network.weights]
        x = rng.normal(size=(8, 5))
        cfg = OptimizerConfig(lr=1e-3)
        _, tape = forward(tiny_network, x)
        backward(tiny_network, tape, np.ones((8, 3)))
        grads = [w.grads.copy() for w in tiny_network.weights]
        optimizer_step(tiny_network, init_optimizer(tiny_network, cfg))
        for b, w, g in zip(before, tiny_network.weights, grads):
            moved = np.abs(w.values - b)
            live = np.abs(g) > 1e-3
            assert np.allclose(moved[live], 1e-3, rtol=1e-2)

    def test_masked_weights_stay_zero(self, tiny_network, rng):
        w = tiny_network.weights[0]
        w.mask[:, :3] = False
        w.apply_mask()
        for _ in range(3):
            self._step(tiny_network, rng.normal(size=(4, 5)))
        assert np.all(w.values[:, :3] == 0.0)
        assert not np.signbit(w.values[:, :3]).any()

    def test_step_clears_grads_and_bumps_version(self, tiny_network, rng):
        version = tiny_network.version
        opt = self._step(tiny_network, rng.normal(size=(4, 5)))
        assert opt.step == 1
        assert tiny_network.version > version
        assert all(not p.grads.any() for p in tiny_network.parameters())

    def test_non_finite_gradient_raises(self, tiny_network):
        opt = init_optimizer(tiny_network)
        tiny_network.weights[0].grads[0, 0] = np.nan
        with pytest.raises(NumericError):
            optimizer_step(tiny_network, opt)

    def test_non_finite_update_leaves_model_and_state_untouched(self, tiny_network, rng):
        opt = self._step(tiny_network, rng.normal(size=(4, 5)))
        x = rng.normal(size=(4, 5))
        _, tape = forward(tiny_network, x)
        backward(tiny_network, tape, np.ones((4, 3)))
        tiny_network.parameters()[-1].grads[0] = np.inf
        values = [p.values.copy() for p in tiny_network.parameters()]
        grads = [p.grads.copy() for p in tiny_network.parameters()]
        first = [m.copy() for m in opt.first]
        second = [v.copy() for v in opt.second]
        with pytest.raises(NumericError):
            optimizer_step(tiny_network, opt)
        assert opt.step == 1
        for p, before, g in zip(tiny_network.parameters(), values, grads):
            assert np.array_equal(p.values, before)
            assert np.array_equal(p.grads, g)
        assert all(np.array_equal(a, b) for a, b in zip(opt.first, first))
        assert all(np.array_equal(a, b) for a, b in zip(opt.second, second))

    def test_state_must_match_model(self, tiny_network, tiny_field):
        with pytest.raises(ContractError):
            optimizer_step(tiny_field, init_optimizer(tiny_network))

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            OptimizerConfig(beta1=1.0)

    def test_zero_learning_rate_keeps_loss(self, tiny_network, rng):
        x = rng.normal(size=(6, 5))
        g = rng.normal(size=(6, 3))
        before = float(np.sum(batch_forward(tiny_network, x) * g))
        _, tape = forward(tiny_network, x)
        backward(tiny_network, tape, g)
        optimizer_step(tiny_network, init_optimizer(tiny_network, OptimizerConfig(lr=0.0)))
        assert float(np.sum(batch_forward(tiny_network, x) * g)) == before
