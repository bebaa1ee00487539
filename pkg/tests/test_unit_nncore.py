"""
Unit tests for the differentiable layer toolkit
"""

import numpy as np
import pytest

from modules.artifacts import read_json, write_json
from modules.errors import NonFiniteGradientError, ShapeError
from modules.nncore import (
    Adam,
    Dense,
    DenseParams,
    Embedding,
    LayerNorm,
    Module,
    OptimizerState,
    Sequential,
    TrainConfig,
    activate,
    activation_derivative,
    activation_second_derivative,
    adam_step,
    bce_logits_grad,
    config_digest,
    cross_entropy_logit_grad,
    dense_forward,
    grad_check,
    kl_grad_p,
    load_checkpoint,
    loss_bce_logits,
    loss_cross_entropy,
    loss_kl,
    loss_reconstruction,
    mlp,
    reconstruction_grad,
    save_checkpoint,
    softmax,
)

GRAD_TOL = 1e-4


def _squared_loss(model, x):
    out = model.forward(x)
    model.backward(out)
    return 0.5 * float((out**2).sum())


class TestActivations:
    """Test activations and their derivatives."""

    def test_unknown_activation(self):
        """Test that an unknown activation name raises ValueError."""
        with pytest.raises(ValueError, match="unknown activation"):
            activate("swish", np.zeros(2))

    @pytest.mark.parametrize("name", ["tanh", "sigmoid", "gelu", "identity"])
    def test_first_and_second_derivatives(self, name):
        """Test analytic derivatives against central differences."""
        z = np.linspace(-2.0, 2.0, 9)
        h = 1e-5
        a = activate(name, z)

        numeric = (activate(name, z + h) - activate(name, z - h)) / (2 * h)
        np.testing.assert_allclose(activation_derivative(name, z, a), numeric, atol=1e-7)

        d_plus = activation_derivative(name, z + h, activate(name, z + h))
        d_minus = activation_derivative(name, z - h, activate(name, z - h))
        np.testing.assert_allclose(
            activation_second_derivative(name, z, a), (d_plus - d_minus) / (2 * h), atol=1e-6
        )

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax is stable for large logits."""
        p = softmax(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))

        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        np.testing.assert_allclose(p[0], [0.5, 0.5])


class TestDense:
    """Test dense parameters and layers."""

    def test_dense_params_shape_check(self):
        """Test that a bias of the wrong length is rejected."""
        with pytest.raises(ShapeError):
            DenseParams(np.zeros((2, 3)), np.zeros(3))

    def test_dense_forward_width_check(self):
        """Test that a mismatched input width is rejected."""
        params = DenseParams(np.eye(2), np.zeros(2))

        with pytest.raises(ShapeError):
            dense_forward(params, np.ones((1, 3)))

    def test_dense_forward_values(self):
        """Test activation(Wx + b) on a hand-computed case."""
        params = DenseParams(np.array([[1.0, -1.0]]), np.array([0.5]))

        out = dense_forward(params, np.array([[2.0, 1.0]]), "relu")

        np.testing.assert_allclose(out, [[1.5]])

    def test_mlp_gradients(self):
        """Test that an MLP's backward pass matches finite differences."""
        rng = np.random.default_rng(0)
        model = mlp([4, 5, 3], "tanh", "sigmoid", rng)
        x = rng.normal(size=(6, 4))

        assert grad_check(model, _squared_loss, x) < GRAD_TOL

    def test_layer_norm_gradients(self):
        """Test layer normalisation backward against finite differences."""
        rng = np.random.default_rng(1)
        model = Sequential(Dense(3, 4, "gelu", rng), LayerNorm(4), Dense(4, 2, "identity", rng))
        x = rng.normal(size=(5, 3))

        assert grad_check(model, _squared_loss, x) < GRAD_TOL

    def test_embedding_cross_entropy_gradients(self):
        """Test embedding lookup with a softmax cross-entropy head."""
        rng = np.random.default_rng(2)

        class Tagger(Module):
            def __init__(self):
                super().__init__()
                self.embed = self.add_child("embed", Embedding(6, 3, rng))
                self.head = self.add_child("head", Dense(3, 4, "identity", rng))

            def forward(self, ids):
                return self.head.forward(self.embed.forward(ids))

        targets = np.eye(4)[[0, 1, 2, 3, 1]]
        ids = np.array([0, 5, 2, 2, 4])

        def loss_fn(model, ids):
            p = softmax(model.forward(ids))
            model.embed.backward(model.head.backward(cross_entropy_logit_grad(p, targets)))
            return loss_cross_entropy(p, targets)

        assert grad_check(Tagger(), loss_fn, ids) < GRAD_TOL

    def test_named_parameters_are_prefixed(self):
        """Test that nested modules expose dotted parameter names."""
        model = mlp([2, 3, 1], "relu", "identity", np.random.default_rng(0))

        assert set(model.named_parameters()) == {"0.W", "0.b", "1.W", "1.b"}
        assert model.n_parameters() == 2 * 3 + 3 + 3 + 1


class TestLosses:
    """Test losses and their gradients."""

    def test_reconstruction_modes(self):
        """Test mse and mae on a known difference."""
        X = np.zeros((2, 2))
        X_hat = np.array([[1.0, -1.0], [2.0, 0.0]])

        assert loss_reconstruction(X, X_hat, "mse") == pytest.approx(1.5)
        assert loss_reconstruction(X, X_hat, "mae") == pytest.approx(1.0)
        np.testing.assert_allclose(reconstruction_grad(X, X_hat, "mse"), X_hat / 2.0)

    def test_reconstruction_shape_mismatch(self):
        """Test that differing shapes raise ShapeError."""
        with pytest.raises(ShapeError):
            loss_reconstruction(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_cross_entropy_ignores_unmasked_rows(self):
        """Test that only masked positions contribute."""
        p = np.array([[0.5, 0.5], [0.01, 0.99]])
        y = np.array([[1.0, 0.0], [1.0, 0.0]])

        loss = loss_cross_entropy(p, y, mask=np.array([1.0, 0.0]))

        assert loss == pytest.approx(np.log(2.0))

    def test_cross_entropy_empty_mask(self, caplog):
        """Test that an empty mask warns and returns zero."""
        p = np.full((2, 2), 0.5)

        loss = loss_cross_entropy(p, np.eye(2), mask=np.zeros(2))

        assert loss == 0.0
        assert "empty mask" in caplog.text

    def test_kl(self):
        """Test KL is zero for equal distributions and its gradient matches differences."""
        p = np.array([[0.2, 0.8], [0.6, 0.4]])
        q = np.array([0.5, 0.5])
        assert loss_kl(q, q) == pytest.approx(0.0)

        h = 1e-6
        bumped = p.copy()
        bumped[0, 1] += h
        numeric = (loss_kl(bumped, q) - loss_kl(p, q)) / h
        assert kl_grad_p(p, q)[0, 1] == pytest.approx(numeric, rel=1e-4)

    def test_bce_logits(self):
        """Test BCE at zero logits and its gradient."""
        logits = np.array([0.0, 2.0, -1.0])
        y = np.array([1.0, 0.0, 1.0])

        assert loss_bce_logits(np.zeros(2), np.array([0, 1])) == pytest.approx(np.log(2.0))
        h = 1e-6
        numeric = [
            (loss_bce_logits(logits + h * e, y) - loss_bce_logits(logits - h * e, y)) / (2 * h)
            for e in np.eye(3)
        ]
        np.testing.assert_allclose(bce_logits_grad(logits, y), numeric, atol=1e-8)


class TestAdam:
    """Test the Adam optimiser."""

    def test_first_step_moves_by_learning_rate(self):
        """Test that the bias-corrected first step has magnitude lr."""
        params = {"w": np.array([3.0, -2.0])}
        grads = {"w": np.array([0.5, -4.0])}

        adam_step(params, grads, OptimizerState(lr=0.1))

        np.testing.assert_allclose(params["w"], [2.9, -1.9], atol=1e-6)

    def test_rejects_non_finite_gradient(self):
        """Test that NaN gradients raise before any update."""
        params = {"w": np.ones(2)}
        state = OptimizerState()

        with pytest.raises(NonFiniteGradientError):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, state)
        assert state.step == 0
        np.testing.assert_array_equal(params["w"], 1.0)

    def test_rejects_shape_mismatch(self):
        """Test that a gradient of the wrong shape raises ShapeError."""
        with pytest.raises(ShapeError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimizerState())

    def test_minimises_quadratic(self):
        """Test that Adam bound to a module drives a quadratic to its minimum."""
        module = Module()
        w = module.add_param("w", np.array([5.0, -3.0]))
        optimiser = Adam(module, lr=0.1)

        for _ in range(1000):
            optimiser.zero_grad()
            module.grads["w"] += 2.0 * w
            optimiser.step()

        np.testing.assert_allclose(w, 0.0, atol=5e-2)

    def test_train_config_validation(self):
        """Test that non-positive epochs are rejected."""
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestCheckpoint:
    """Test named-tensor checkpoints."""

    def test_round_trip(self, tmp_path):
        """Test that tensors and manifest survive a save and load."""
        config = TrainConfig(epochs=3)
        tensors = {"0.W": np.arange(6.0).reshape(2, 3), "0.b": np.zeros(2)}

        save_checkpoint(tmp_path / "model", tensors, seed=7, config=config, extra={"kind": "test"})
        loaded, manifest = load_checkpoint(tmp_path / "model")

        np.testing.assert_array_equal(loaded["0.W"], tensors["0.W"])
        assert manifest["seed"] == 7
        assert manifest["kind"] == "test"
        assert manifest["config"]["epochs"] == 3
        assert manifest["config_hash"] == config_digest(config)

    def test_manifest_shape_mismatch(self, tmp_path):
        """Test that a manifest disagreeing with the archive raises ShapeError."""
        save_checkpoint(tmp_path / "model", {"w": np.zeros(3)}, seed=0, config={})
        manifest = read_json(tmp_path / "model.json")
        manifest["tensors"][0]["shape"] = [4]
        write_json(tmp_path / "model.json", manifest)

        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "model")

    def test_dotted_names_keep_their_stem(self, tmp_path):
        """Test that a checkpoint name containing dots is not truncated."""
        save_checkpoint(tmp_path / "ae-beta0.5", {"w": np.ones(2)}, seed=0, config={})

        assert (tmp_path / "ae-beta0.5.npz").exists()
        assert (tmp_path / "ae-beta0.5.json").exists()
        loaded, _ = load_checkpoint(tmp_path / "ae-beta0.5")
        np.testing.assert_array_equal(loaded["w"], np.ones(2))
        again, _ = load_checkpoint(tmp_path / "ae-beta0.5.npz")
        np.testing.assert_array_equal(again["w"], np.ones(2))

    def test_load_parameters_checks_names(self):
        """Test that loading into a module requires every parameter."""
        model = mlp([2, 2], "identity", "identity", np.random.default_rng(0))

        with pytest.raises(KeyError):
            model.load_parameters({"0.W": np.zeros((2, 2))})
