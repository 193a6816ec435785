"""Tests for the linear likelihood and the split feed-forward classifier."""

import numpy as np
import pytest

from cf_utils.errors import SchemaError, TrainingDivergedError
from cf_utils.gaussian import rng_stream
from cf_utils.models import (
    DenseLayer,
    LinearLikelihood,
    SplitClassifier,
    TrainConfig,
    classifier_from_json,
    classifier_to_json,
    forward,
    grad_input,
    init_classifier,
    load_classifier,
    logit_jacobian,
    logits,
    loss_and_param_grads,
    nll,
    nll_and_grad,
    predict,
    representation,
    save_classifier,
    train,
)


def _blobs(n=200, seed=0, gap=3.0):
    rng = rng_stream(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 2)) * 0.6
    x[:, 0] += np.where(y == 1, gap / 2, -gap / 2)
    return x, y


def _identity_net(m=2):
    layer = DenseLayer(np.eye(2), np.zeros(2), "identity")
    return SplitClassifier((layer,), np.eye(m, 2), np.zeros(m))


def _fd_grad(f, x, step=1e-5):
    g = np.zeros_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2 * step)
    return g


class TestLinearLikelihood:
    def test_shapes(self):
        lik = LinearLikelihood([[2.0, -3.0]], [5.0], [[1.0]])
        assert (lik.n_in, lik.n_out) == (2, 1)

    def test_inconsistent_shapes_rejected(self):
        with pytest.raises(ValueError):
            LinearLikelihood([[2.0, -3.0]], [5.0, 1.0], [[1.0]])

    def test_indefinite_precision_rejected(self):
        with pytest.raises(ValueError):
            LinearLikelihood(np.eye(2), np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])


class TestForward:
    def test_zero_weights_uniform(self):
        clf = SplitClassifier((DenseLayer(np.zeros((4, 3)), np.zeros(4)),), np.zeros((3, 4)), np.zeros(3))
        assert forward(clf, [1.0, -2.0, 0.5]) == pytest.approx([1 / 3] * 3)

    def test_identity_net_at_origin(self):
        assert forward(_identity_net(), [0.0, 0.0]) == pytest.approx([0.5, 0.5])

    def test_rows_and_point_agree(self):
        clf = init_classifier(3, (5, 4), 3, seed=2)
        x = rng_stream(1).standard_normal((4, 3))
        batch = forward(clf, x)
        assert np.allclose(batch, np.vstack([forward(clf, r) for r in x]))
        assert np.allclose(batch.sum(axis=1), 1.0, atol=1e-9)

    def test_large_logits_stay_normalized(self):
        clf = SplitClassifier((), np.array([[500.0, 0.0], [-500.0, 0.0]]), np.zeros(2), n_in=2)
        p = forward(clf, [1.0, 0.0])
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.isfinite(p))

    def test_representation_is_pre_head_activation(self):
        clf = init_classifier(2, (3,), 2, seed=4)
        x = np.array([0.3, -0.7])
        r = representation(clf, x)
        assert logits(clf, x) == pytest.approx(clf.head_weight @ r + clf.head_bias)

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError):
            forward(_identity_net(), [1.0, 2.0, 3.0])


class TestGradients:
    def test_input_gradient_matches_finite_differences(self):
        rng = rng_stream(12)
        for trial in range(25):
            clf = init_classifier(3, (6, 4), 3, activation=["tanh", "identity"][trial % 2], seed=trial)
            x = rng.standard_normal(3)
            t = int(rng.integers(3))
            g = grad_input(clf, x, t)
            fd = _fd_grad(lambda z: nll(clf, z, t), x)
            assert np.linalg.norm(g - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))

    def test_nll_and_grad_is_one_pass_of_the_same(self):
        clf = init_classifier(2, (4,), 2, seed=1)
        x = np.array([0.2, 0.1])
        v, g = nll_and_grad(clf, x, 1)
        assert v == pytest.approx(nll(clf, x, 1))
        assert g == pytest.approx(grad_input(clf, x, 1))

    def test_symmetric_head_points_along_weight_difference(self):
        clf = SplitClassifier((), np.array([[1.0, 2.0], [-1.0, -2.0]]), np.zeros(2), n_in=2)
        g = grad_input(clf, [0.0, 0.0], 0)
        diff = clf.head_weight[0] - clf.head_weight[1]
        cos = g @ diff / (np.linalg.norm(g) * np.linalg.norm(diff))
        assert cos == pytest.approx(-1.0)

    def test_saturated_argmax_gradient_vanishes(self):
        clf = SplitClassifier((), np.array([[100.0, 0.0], [-100.0, 0.0]]), np.zeros(2), n_in=2)
        assert np.linalg.norm(grad_input(clf, [1.0, 0.0], 0)) <= 1e-6

    def test_parameter_gradients_match_finite_differences(self):
        clf = init_classifier(2, (3,), 2, seed=6)
        x, y = _blobs(12, seed=3)
        _, grads = loss_and_param_grads(clf, x, y)
        step = 1e-6
        for name, idx in (("W0", (1, 0)), ("b0", (2,)), ("HW", (0, 1)), ("Hb", (1,))):
            def loss_at(delta):
                layers = list(clf.layers)
                hw, hb = clf.head_weight.copy(), clf.head_bias.copy()
                if name == "W0":
                    w = layers[0].weight.copy()
                    w[idx] += delta
                    layers[0] = DenseLayer(w, layers[0].bias, layers[0].activation)
                elif name == "b0":
                    b = layers[0].bias.copy()
                    b[idx] += delta
                    layers[0] = DenseLayer(layers[0].weight, b, layers[0].activation)
                elif name == "HW":
                    hw[idx] += delta
                else:
                    hb[idx] += delta
                return loss_and_param_grads(SplitClassifier(tuple(layers), hw, hb), x, y)[0]
            fd = (loss_at(step) - loss_at(-step)) / (2 * step)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_logit_jacobian_rows(self):
        clf = init_classifier(3, (5,), 3, seed=8)
        x = np.array([0.1, -0.4, 0.9])
        jac = logit_jacobian(clf, x)
        for k in range(3):
            assert jac[k] == pytest.approx(_fd_grad(lambda z: logits(clf, z)[k], x), abs=1e-7)


class TestTrain:
    def test_separable_blobs(self):
        x, y = _blobs()
        res = train(init_classifier(2, (8,), 2, seed=0), x, y, TrainConfig(lr=0.05, steps=500))
        assert np.mean(predict(res.classifier, x) == y) >= 0.98
        assert forward(res.classifier, [1.5, 0.0])[1] >= 0.95

    def test_trace_is_non_increasing(self):
        x, y = _blobs(60)
        res = train(init_classifier(2, (4,), 2, seed=1), x, y, TrainConfig(steps=50))
        assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
        assert len(res.raw_losses) == 50

    def test_zero_steps_leaves_parameters(self):
        clf = init_classifier(2, (4,), 2, seed=1)
        x, y = _blobs(10)
        assert train(clf, x, y, TrainConfig(steps=0)).classifier is clf

    def test_duplicated_dataset_same_parameters(self):
        x, y = _blobs(40)
        clf = init_classifier(2, (4,), 2, seed=5)
        a = train(clf, x, y, TrainConfig(steps=30)).classifier
        b = train(clf, np.vstack([x, x]), np.concatenate([y, y]), TrainConfig(steps=30)).classifier
        assert np.allclose(a.head_weight, b.head_weight, atol=1e-8)
        assert np.allclose(a.layers[0].weight, b.layers[0].weight, atol=1e-8)

    def test_divergence_carries_trace(self):
        x, y = _blobs(20)
        x[3, 0] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train(init_classifier(2, (4,), 2), x, y, TrainConfig(steps=5))
        assert isinstance(err.value.trace, list)

    def test_bad_label_rejected(self):
        x, y = _blobs(10)
        y[0] = 4
        with pytest.raises(ValueError):
            train(init_classifier(2, (4,), 2), x, y, TrainConfig(steps=1))


class TestPersistence:
    def test_save_load_is_bit_exact(self, tmp_path):
        clf = init_classifier(3, (5, 4), 3, activation="relu", seed=9)
        path = str(tmp_path / "model.json")
        save_classifier(clf, path)
        back = load_classifier(path)
        x = rng_stream(2).standard_normal((5, 3))
        assert np.array_equal(forward(clf, x), forward(back, x))

    def test_headless_hidden_stack(self):
        clf = SplitClassifier((), np.eye(2), np.zeros(2), n_in=2)
        assert classifier_from_json(classifier_to_json(clf)).n_in == 2

    def test_malformed_file(self):
        with pytest.raises(SchemaError):
            classifier_from_json({"layers": []})
