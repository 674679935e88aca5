"""
Tests unitarios para el clasificador, el SGD y la agregación FedAvg.

Incluye comprobaciones de gradiente por diferencias finitas centrales.
"""

import math
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
from scipy.special import softmax

from noisy_label_fl.config import LossKind, TrainConfig
from noisy_label_fl.credal import kl_divergence, loss_and_logit_grad, rcl_targets, ucl_targets
from noisy_label_fl.model import (LossContext, ModelParams, ShapeError, TrainingError, batch_loss_and_grad,
                                  fedavg_combine, init_params, load_params, lr_at, per_sample_ce_loss,
                                  predict_proba, save_params, sgd_step, squared_distance, train_local)

STEP = 1e-4


def linear_params(weights, biases):
    return ModelParams((np.asarray(weights, dtype=float),), (np.asarray(biases, dtype=float),))


def numeric_logit_grad(loss_fn, logits):
    grad = np.zeros_like(logits)
    for j in range(len(logits)):
        up, down = logits.copy(), logits.copy()
        up[j] += STEP
        down[j] -= STEP
        grad[j] = (loss_fn(up) - loss_fn(down)) / (2 * STEP)
    return grad


class TestPredict:
    """Tests para predict_proba y per_sample_ce_loss"""

    def test_zero_params_uniform(self):
        """Test parámetros nulos predicen uniforme"""
        params = linear_params(np.zeros((3, 4)), np.zeros(4))
        np.testing.assert_allclose(predict_proba(params, np.array([1.0, -2.0, 5.0])), np.full(4, 0.25))

    def test_softmax_arithmetic(self):
        """Test softmax calculado a mano"""
        params = linear_params(np.zeros((2, 3)), [math.log(2), 0.0, 0.0])
        np.testing.assert_allclose(predict_proba(params, np.array([0.3, 0.7])), [0.5, 0.25, 0.25])

    def test_rows_sum_to_one(self):
        """Test cada fila de probabilidades suma 1"""
        rng = np.random.default_rng(0)
        params = init_params(5, 4, hidden=(6,), rng=rng, scale=1.0)
        probs = predict_proba(params, rng.standard_normal((20, 5)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0)

    def test_dimension_mismatch(self):
        """Test dimensión de atributos incompatible"""
        params = init_params(3, 2)
        with pytest.raises(ShapeError):
            predict_proba(params, np.zeros((4, 5)))

    def test_uniform_loss_is_log_c(self):
        """Test pérdida log C con predicción uniforme"""
        params = linear_params(np.zeros((2, 10)), np.zeros(10))
        losses = per_sample_ce_loss(params, np.ones((5, 2)), np.arange(5))
        np.testing.assert_allclose(losses, math.log(10), rtol=1e-12)
        assert losses[0] == pytest.approx(2.302585, abs=1e-6)

    def test_quarter_probability_loss(self):
        """Test pérdida con probabilidad 1/4"""
        params = linear_params(np.zeros((2, 4)), np.zeros(4))
        assert per_sample_ce_loss(params, np.ones((1, 2)), [2])[0] == pytest.approx(1.386294, abs=1e-6)

    def test_perfect_prediction_loss_zero(self):
        """Test pérdida nula con predicción perfecta"""
        params = linear_params(np.zeros((2, 2)), [1000.0, 0.0])
        losses = per_sample_ce_loss(params, np.ones((1, 2)), [0])
        assert losses[0] == pytest.approx(0.0, abs=1e-12)
        # el suelo 1e-12 mantiene finita la pérdida de la clase imposible
        assert per_sample_ce_loss(params, np.ones((1, 2)), [1])[0] == pytest.approx(-math.log(1e-12))


class TestLogitGradients:
    """Gradientes respecto a los logits frente a diferencias finitas"""

    @pytest.mark.parametrize("seed", range(20))
    def test_ce_gradient(self, seed):
        """Test gradiente de CE respecto a los logits"""
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal(5) * 2
        label = int(rng.integers(0, 5))
        _, grad = loss_and_logit_grad(softmax(logits)[None, :], [label], LossKind.CE)
        numeric = numeric_logit_grad(lambda z: -math.log(softmax(z)[label]), logits)
        np.testing.assert_allclose(grad[0], numeric, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("kind", [LossKind.RCL, LossKind.UCL])
    def test_credal_gradient_fixed_target(self, seed, kind):
        """Con p^r fijo en el punto base, el gradiente analítico coincide con el numérico"""
        rng = np.random.default_rng(100 + seed)
        logits = rng.standard_normal(4) * 2
        label = int(rng.integers(0, 4))
        probs = softmax(logits)[None, :]
        beta, alpha = 0.75, 0.05

        builder = rcl_targets if kind is LossKind.RCL else ucl_targets
        targets, active = builder(probs, [label], beta, alpha)
        _, grad = loss_and_logit_grad(probs, [label], kind, beta, alpha)
        if not active[0]:
            np.testing.assert_array_equal(grad[0], 0.0)
            return

        numeric = numeric_logit_grad(lambda z: kl_divergence(targets, softmax(z)[None, :])[0], logits)
        np.testing.assert_allclose(grad[0], numeric, rtol=1e-5, atol=1e-8)


class TestParameterGradients:
    """Retropropagación completa frente a diferencias finitas"""

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("hidden", [(), (4,)])
    def test_ce_parameter_gradient(self, seed, hidden):
        """Test gradiente de parámetros frente a diferencias finitas"""
        rng = np.random.default_rng(seed)
        params = init_params(3, 4, hidden=hidden, rng=rng, scale=0.5)
        features = rng.standard_normal((6, 3))
        labels = rng.integers(0, 4, size=6)

        _, grads = batch_loss_and_grad(params, features, labels, LossKind.CE, LossContext())

        flat = params.flat()
        analytic = grads.flat()
        numeric = np.zeros_like(flat)
        for i in range(len(flat)):
            up, down = flat.copy(), flat.copy()
            up[i] += STEP
            down[i] -= STEP
            loss_up = per_sample_ce_loss(_unflatten(params, up), features, labels).mean()
            loss_down = per_sample_ce_loss(_unflatten(params, down), features, labels).mean()
            numeric[i] = (loss_up - loss_down) / (2 * STEP)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_single_sample_softmax_linear(self):
        """Gradiente de W igual a x ⊗ (p̂ - onehot(y))"""
        params = linear_params([[0.1, -0.2, 0.3], [0.0, 0.4, -0.1]], [0.0, 0.1, -0.1])
        x = np.array([[1.5, -0.5]])
        _, grads = batch_loss_and_grad(params, x, [1], LossKind.CE, LossContext())
        delta = predict_proba(params, x)[0] - np.eye(3)[1]
        np.testing.assert_allclose(grads.weights[0], np.outer(x[0], delta), atol=1e-12)
        np.testing.assert_allclose(grads.biases[0], delta, atol=1e-12)


def _unflatten(template: ModelParams, flat: np.ndarray) -> ModelParams:
    tensors, offset = [], 0
    for t in template.tensors():
        tensors.append(flat[offset:offset + t.size].reshape(t.shape))
        offset += t.size
    return ModelParams(tuple(tensors[0::2]), tuple(tensors[1::2]))


class TestSgd:
    """Tests para sgd_step, el calendario de learning rate y train_local"""

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.params = init_params(3, 3, rng=rng, scale=0.1)
        self.features = rng.standard_normal((8, 3))
        self.labels = rng.integers(0, 3, size=8)

    def test_zero_lr_unchanged(self):
        """Test learning rate 0 deja el modelo igual"""
        updated = sgd_step(self.params, self.features, self.labels, LossKind.RCL,
                           LossContext(0.75, 0.05), lr=0.0, weight_decay=1e-6)
        np.testing.assert_array_equal(updated.flat(), self.params.flat())

    def test_negative_lr_rejected(self):
        """Test learning rate negativo"""
        with pytest.raises(ValueError):
            sgd_step(self.params, self.features, self.labels, LossKind.CE, LossContext(), lr=-0.1)

    def test_weight_decay_term(self):
        """Test término de weight decay"""
        _, grads = batch_loss_and_grad(self.params, self.features, self.labels, LossKind.CE, LossContext())
        updated = sgd_step(self.params, self.features, self.labels, LossKind.CE, LossContext(),
                           lr=0.5, weight_decay=0.1)
        expected = self.params.flat() - 0.5 * (grads.flat() + 0.1 * self.params.flat())
        np.testing.assert_allclose(updated.flat(), expected, atol=1e-14)

    def test_non_finite_gradient_names_sample(self):
        """Test gradiente no finito nombra la muestra"""
        features = self.features.copy()
        features[2, 0] = np.inf
        with pytest.raises(TrainingError) as exc:
            sgd_step(self.params, features, self.labels, LossKind.CE, LossContext(), lr=0.1,
                     ids=np.arange(100, 108))
        assert exc.value.sample_id == 102

    @pytest.mark.parametrize("t,expected", [(0, 1e-2), (69, 1e-2), (70, 1e-3), (89, 1e-3), (90, 1e-4), (99, 1e-4)])
    def test_lr_schedule_drops(self, t, expected):
        """Test caídas del learning rate en 70% y 90% de las rondas"""
        assert lr_at(TrainConfig(), t, 100) == pytest.approx(expected)

    def test_lr_schedule_rounds_up(self):
        """Test las rondas de caída se redondean hacia arriba"""
        train = TrainConfig(base_learning_rate=1.0)
        assert [lr_at(train, t, 5) for t in range(5)] == [1.0, 1.0, 1.0, 1.0, pytest.approx(0.1)]

    def test_train_local_deterministic(self):
        """Test entrenamiento local reproducible con la misma semilla"""
        train = TrainConfig(local_epochs=3, batch_size=3)
        a = train_local(self.params, self.features, self.labels, train, 0.1, rng=np.random.default_rng(4))
        b = train_local(self.params, self.features, self.labels, train, 0.1, rng=np.random.default_rng(4))
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_train_local_empty_set(self):
        """Test D̂ vacío deja el modelo igual"""
        out = train_local(self.params, np.zeros((0, 3)), np.zeros(0, dtype=int), TrainConfig(), 0.1)
        assert out is self.params

    def test_rcl_without_relaxation_matches_ce(self):
        """RCL con alpha = 0 y beta = 1 sigue paso a paso la trayectoria de CE"""
        train = TrainConfig(local_epochs=4, batch_size=3, weight_decay=1e-6)
        ce = train_local(self.params, self.features, self.labels, train, 0.2, LossKind.CE,
                         rng=np.random.default_rng(9))
        rcl = train_local(self.params, self.features, self.labels, train, 0.2, LossKind.RCL,
                          LossContext(beta=1.0, alpha=0.0), rng=np.random.default_rng(9))
        np.testing.assert_allclose(rcl.flat(), ce.flat(), rtol=1e-12, atol=1e-12)


class TestFedAvg:
    """Tests para fedavg_combine y squared_distance"""

    def test_single_client_identity(self):
        """Test FedAvg de un solo modelo es la identidad"""
        params = init_params(3, 2, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(fedavg_combine([(params, 10)]).flat(), params.flat())

    def test_equal_weights_mean(self):
        """Test pesos iguales dan la media"""
        a = init_params(3, 2, rng=np.random.default_rng(1), scale=1.0)
        b = init_params(3, 2, rng=np.random.default_rng(2), scale=1.0)
        np.testing.assert_allclose(fedavg_combine([(a, 5), (b, 5)]).flat(), (a.flat() + b.flat()) / 2)

    def test_weighted_scalars(self):
        """Test promedio ponderado de escalares"""
        a = linear_params([[0.2]], [0.2])
        b = linear_params([[0.4]], [0.4])
        combined = fedavg_combine([(a, 100), (b, 300)])
        assert combined.weights[0][0, 0] == pytest.approx(0.35)

    def test_permutation_invariant(self):
        """Test el orden de los modelos no cambia el promedio"""
        models = [(init_params(2, 3, rng=np.random.default_rng(s), scale=1.0), n)
                  for s, n in [(1, 10), (2, 30), (3, 5)]]
        forward = fedavg_combine(models)
        backward = fedavg_combine(models[::-1])
        np.testing.assert_allclose(forward.flat(), backward.flat(), rtol=1e-13)

    def test_architecture_mismatch(self):
        """Test arquitecturas distintas rechazadas"""
        with pytest.raises(ShapeError):
            fedavg_combine([(init_params(3, 2), 1), (init_params(3, 2, hidden=(2,)), 1)])

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            fedavg_combine([])
        with pytest.raises(ValueError):
            fedavg_combine([(init_params(3, 2), 0)])

    def test_squared_distance_unit(self):
        """Test distancia cuadrada unitaria"""
        a = linear_params(np.zeros((2, 2)), np.zeros(2))
        b = linear_params([[0.0, 1.0], [0.0, 0.0]], np.zeros(2))
        assert squared_distance(a, b) == 1.0


class TestSerialization:
    """Tests para save_params / load_params"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    @pytest.mark.parametrize("hidden", [(), (5, 3)])
    def test_round_trip_exact(self, hidden):
        """Test guardar y cargar el modelo conserva los valores exactos"""
        params = init_params(4, 3, hidden=hidden, rng=np.random.default_rng(0), scale=0.7)
        path = Path(self.temp_dir) / "model.csv"

        assert save_params(params, path)
        loaded = load_params(path)

        assert loaded is not None
        assert loaded.architecture == params.architecture
        np.testing.assert_array_equal(loaded.flat(), params.flat())

    def test_load_missing(self):
        assert load_params(Path(self.temp_dir) / "missing.csv") is None
