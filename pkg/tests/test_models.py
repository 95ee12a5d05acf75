import numpy as np
import pytest

from orpdkit import fixtures
from orpdkit.grid import parse_grid
from orpdkit.nn.autodiff import Tensor, backward
from orpdkit.nn.models import (
    Model,
    ModelConfig,
    build_model,
    build_shift_operator,
    forward,
    load_checkpoint,
    masked_loss,
    save_checkpoint,
)
from orpdkit.powerflow import control_mask


@pytest.fixture(scope="module")
def grid():
    return parse_grid(fixtures.small14_document())


class TestShiftOperator:
    def test_single_edge_normalizes_to_hop_matrix(self):
        g = parse_grid(fixtures.two_bus_document(r=0.0, x=0.1))
        s = build_shift_operator(g)
        np.testing.assert_allclose(s, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)

    def test_symmetric_exactly(self, grid):
        s = build_shift_operator(grid)
        assert np.array_equal(s, s.T)
        assert np.all(np.diag(s) == 0.0)

    def test_path_graph_spectrum_within_unit_interval(self):
        doc = fixtures.bf2_document()
        for ln in doc["lines"]:  # equal weights
            ln["y_series"] = {"g": 0.0, "b": -8.0}
        g = parse_grid(doc)
        s = build_shift_operator(g)
        eigenvalues = np.linalg.eigvalsh(s)
        assert np.all(eigenvalues >= -1.0 - 1e-12)
        assert np.all(eigenvalues <= 1.0 + 1e-12)

    def test_parallel_lines_accumulate(self):
        doc = fixtures.two_bus_document(r=0.0, x=0.1)
        doc["lines"].append(dict(doc["lines"][0]))
        g = parse_grid(doc)
        s = build_shift_operator(g)
        np.testing.assert_allclose(s, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)


class TestForward:
    def test_zero_parameters_give_zero_output(self, grid):
        for family in ("fcnn", "gnn"):
            model = build_model(ModelConfig(family=family, hidden=(8,)), grid, seed=0)
            for p in model.params.values():
                p.value[...] = 0.0
            x = np.random.default_rng(0).uniform(size=(3, grid.n_buses, 5))
            out = forward(model, x)
            np.testing.assert_array_equal(out.value, np.zeros((3, grid.n_buses, 2)))

    def test_single_tap_gnn_is_local(self, grid):
        model = build_model(ModelConfig(family="gnn", hidden=(6,), taps=1), grid, seed=1)
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(grid.n_buses, 5))
        base = forward(model, x).value
        bumped = x.copy()
        bumped[9] += 1.0  # perturb one node
        out = forward(model, bumped).value
        changed = np.any(out != base, axis=1)
        assert changed[9]
        assert not changed[np.arange(grid.n_buses) != 9].any()

    def test_single_linear_fcnn_matches_naive_product(self, grid):
        model = build_model(ModelConfig(family="fcnn", hidden=(4,)), grid, seed=3)
        n = grid.n_buses
        x = np.random.default_rng(4).uniform(size=(n, 5))
        flat = x.reshape(1, 5 * n)
        h = flat @ model.params["w0"].value + model.params["b0"].value
        h = np.maximum(h, 0.0)
        expected = (h @ model.params["w1"].value + model.params["b1"].value).reshape(n, 2)
        np.testing.assert_allclose(forward(model, x).value, expected, rtol=1e-12)

    def test_dropout_only_active_in_train_mode(self, grid):
        model = build_model(ModelConfig(family="fcnn", hidden=(16,), dropout=0.5), grid, seed=5)
        x = np.random.default_rng(6).uniform(size=(2, grid.n_buses, 5))
        eval_a = forward(model, x, mode="eval").value
        eval_b = forward(model, x, mode="eval").value
        np.testing.assert_array_equal(eval_a, eval_b)
        rng = np.random.default_rng(7)
        train_a = forward(model, x, mode="train", rng=rng).value
        assert not np.array_equal(train_a, eval_a)

    def test_train_mode_dropout_requires_rng(self, grid):
        model = build_model(ModelConfig(family="fcnn", hidden=(8,), dropout=0.3), grid, seed=0)
        x = np.zeros((1, grid.n_buses, 5))
        with pytest.raises(ValueError):
            forward(model, x, mode="train")

    def test_shape_mismatch_rejected(self, grid):
        model = build_model(ModelConfig(), grid, seed=0)
        with pytest.raises(ValueError):
            forward(model, np.zeros((grid.n_buses, 4)))


class TestPermutationEquivariance:
    def test_exact_under_random_permutations(self, grid):
        model = build_model(
            ModelConfig(family="gnn", hidden=(8, 8), taps=3, nonlinearity="tanh"), grid, seed=8
        )
        rng = np.random.default_rng(9)
        n = grid.n_buses
        x = rng.uniform(size=(n, 5))
        base = forward(model, x).value
        for _ in range(8):
            perm = rng.permutation(n)
            s_perm = model.shift[np.ix_(perm, perm)]
            out = forward(model, x[perm], shift=s_perm).value
            assert np.array_equal(out, base[perm])


class TestMaskedLoss:
    def test_zero_when_prediction_matches(self, grid):
        mask = control_mask(grid)
        y = np.random.default_rng(0).uniform(size=(grid.n_buses, 2))
        loss = masked_loss(Tensor(y), y, mask)
        assert float(loss.value) == 0.0

    def test_single_masked_entry(self):
        yhat = Tensor(np.array([[2.0, 0.0]]))
        ystar = np.array([[0.0, 0.0]])
        mask = np.array([[True, False]])
        loss = masked_loss(yhat, ystar, mask)
        assert float(loss.value) == pytest.approx(4.0)

    def test_masked_out_entries_have_zero_gradient(self, grid):
        mask = control_mask(grid)
        rng = np.random.default_rng(1)
        yhat = Tensor(rng.uniform(size=(grid.n_buses, 2)))
        ystar = rng.uniform(size=(grid.n_buses, 2))
        loss = masked_loss(yhat, ystar, mask)
        backward(loss)
        assert np.all(yhat.grad[~mask] == 0.0)
        assert np.any(yhat.grad[mask] != 0.0)

    def test_all_false_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))


class TestGradientChecks:
    """Finite-difference checks per layer type at <= 1e-5 relative error."""

    @staticmethod
    def _model_loss(model, x, ystar, mask, mode="train", dropout_rng=None):
        yhat = forward(model, x, mode=mode, rng=dropout_rng)
        return masked_loss(yhat, ystar, mask)

    def _check_model(self, grid, config, mode="train", seed=0):
        model = build_model(config, grid, seed=seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(size=(2, grid.n_buses, 5))
        mask = control_mask(grid)[None, :, :]
        ystar = rng.uniform(size=(2, grid.n_buses, 2))
        loss = self._model_loss(model, x, ystar, mask, mode=mode)
        backward(loss)
        grads = {k: p.grad.copy() for k, p in model.params.items()}
        h = 1e-6
        for name, p in model.params.items():
            fd = np.zeros_like(p.value)
            flat_fd = fd.ravel()
            flat_v = p.value.ravel()
            for i in range(flat_v.size):
                orig = flat_v[i]
                flat_v[i] = orig + h
                up = float(self._model_loss(model, x, ystar, mask, mode=mode).value)
                flat_v[i] = orig - h
                dn = float(self._model_loss(model, x, ystar, mask, mode=mode).value)
                flat_v[i] = orig
                flat_fd[i] = (up - dn) / (2 * h)
            scale = max(np.max(np.abs(grads[name])), np.max(np.abs(fd)), 1e-10)
            err = np.max(np.abs(grads[name] - fd)) / scale
            assert err <= 1e-5, f"{config.family}/{name}: relative error {err:.2e}"

    def test_dense_relu_layers(self, grid):
        self._check_model(grid, ModelConfig(family="fcnn", hidden=(6,), nonlinearity="relu"))

    def test_dense_tanh_layers(self, grid):
        self._check_model(grid, ModelConfig(family="fcnn", hidden=(5,), nonlinearity="tanh"))

    def test_graph_conv_layers(self, grid):
        self._check_model(grid, ModelConfig(family="gnn", hidden=(4,), taps=3, nonlinearity="tanh"))

    def test_dropout_in_eval_mode(self, grid):
        # Dropout configured but inactive in eval mode: gradients still exact.
        self._check_model(
            grid, ModelConfig(family="fcnn", hidden=(5,), dropout=0.4, nonlinearity="tanh"), mode="eval"
        )


class TestCheckpoint:
    def test_round_trip_preserves_forward(self, grid, tmp_path):
        for family in ("fcnn", "gnn"):
            model = build_model(ModelConfig(family=family, hidden=(8,)), grid, seed=11)
            model.norm_stats = {"vset": {"mean": 1.0, "std": 0.01}, "qr": {"mean": -0.2, "std": 0.05}}
            model.training_manifest = {"best_epoch": 3}
            path = tmp_path / f"{family}.json"
            save_checkpoint(model, path)
            back = load_checkpoint(path)
            assert back.config == model.config
            assert back.norm_stats == model.norm_stats
            assert back.training_manifest == model.training_manifest
            x = np.random.default_rng(12).uniform(size=(grid.n_buses, 5))
            np.testing.assert_array_equal(forward(back, x).value, forward(model, x).value)

    def test_checkpoint_bytes_deterministic(self, grid, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(build_model(ModelConfig(), grid, seed=1), a)
        save_checkpoint(build_model(ModelConfig(), grid, seed=1), b)
        assert a.read_bytes() == b.read_bytes()


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ModelConfig(family="transformer")
        with pytest.raises(ValueError):
            ModelConfig(hidden=())
        with pytest.raises(ValueError):
            ModelConfig(hidden=(0,))
        with pytest.raises(ValueError):
            ModelConfig(dropout=1.0)
        with pytest.raises(ValueError):
            ModelConfig(taps=0)
        with pytest.raises(ValueError):
            ModelConfig(nonlinearity="gelu")
