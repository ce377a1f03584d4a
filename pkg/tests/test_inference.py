import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casa import inference
from casa.autodiff import Tensor
from casa.datasets import DomainDataset
from casa.errors import ContractError, DimensionError, LabelError
from casa.inference import EnsembleModel, accuracy, ensemble_predict, ensemble_probs, evaluate, predict_labels, write_predictions
from casa.models import CaFiLMParams, MLPParams, ModelBundle


def constant_bundle(probs, in_dim=3, adapter=None):
    """A model whose output is ``probs`` for every input."""
    classifier = MLPParams([(Tensor(np.zeros((2, len(probs)))), Tensor(np.log(probs)))])
    return ModelBundle(0, MLPParams.zeros([in_dim, 2]), classifier, adapter)


def random_bundle(seed, adapter=None, classes=3):
    rng = np.random.default_rng(seed)
    return ModelBundle(seed, MLPParams.init([3, 6, 4], rng), MLPParams.init([4, classes], rng), adapter)


class TestEnsemble:
    def test_hand_average(self):
        model = EnsembleModel([constant_bundle([0.6, 0.4]), constant_bundle([0.2, 0.8])], require_shared_adapter=False)
        x = np.zeros((1, 3))
        np.testing.assert_allclose(ensemble_probs(model, x), [[0.4, 0.6]], atol=1e-12)
        assert ensemble_predict(model, x).tolist() == [1]

    def test_exact_tie_goes_to_class_zero(self):
        single = EnsembleModel([constant_bundle([0.5, 0.5])], require_shared_adapter=False)
        assert ensemble_predict(single, np.zeros((4, 3))).tolist() == [0, 0, 0, 0]
        pair = EnsembleModel([constant_bundle([0.6, 0.4]), constant_bundle([0.4, 0.6])], require_shared_adapter=False)
        probs = ensemble_probs(pair, np.zeros((2, 3)))
        assert probs[0, 0] == probs[0, 1]
        assert ensemble_predict(pair, np.zeros((2, 3))).tolist() == [0, 0]

    def test_identical_members_match_single_model(self):
        adapter = CaFiLMParams(Tensor([[0.1, -0.3], [0.2, 0.0]]), Tensor([1.0, 0.1]))
        b = random_bundle(1, adapter)
        x = np.random.default_rng(0).normal(size=(50, 3))
        single, _ = predict_labels(b, x, 8)
        triple, _ = predict_labels(EnsembleModel([b, b, b]), x, 8)
        assert np.array_equal(single, triple)

    def test_members_must_share_adapter(self):
        with pytest.raises(ContractError):
            EnsembleModel([random_bundle(1, CaFiLMParams()), random_bundle(2, CaFiLMParams())])

    def test_members_must_agree_on_shape(self):
        with pytest.raises(DimensionError):
            EnsembleModel([random_bundle(1, classes=3), random_bundle(2, classes=2)], require_shared_adapter=False)

    def test_empty_ensemble(self):
        with pytest.raises(ContractError):
            EnsembleModel([])


class TestBatching:
    def test_single_sample_batches_use_own_features_as_context(self):
        adapter = CaFiLMParams(Tensor([[0.0, 0.0], [0.0, -1.0]]), Tensor([1.0, 0.0]))
        b = random_bundle(3, adapter)
        x = np.random.default_rng(1).normal(size=(5, 3))
        _, probs = predict_labels(b, x, 1)
        # z - mu is zero for a batch of one, so every sample gets the classifier's bias output
        expected = np.exp(b.classifier.layers[0][1].data)
        np.testing.assert_allclose(probs, np.tile(expected / expected.sum(), (5, 1)), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 40))
    def test_identity_adapter_is_batch_size_invariant(self, batch_size):
        b = random_bundle(4, CaFiLMParams.identity())
        x = np.random.default_rng(2).normal(size=(37, 3))
        y = np.random.default_rng(3).integers(0, 3, 37)
        assert accuracy(b, x, y, batch_size) == accuracy(b, x, y, 37)

    def test_short_last_batch(self):
        b = random_bundle(5, CaFiLMParams.identity())
        labels, probs = predict_labels(b, np.zeros((10, 3)), 4)
        assert labels.shape == (10,) and probs.shape == (10, 3)

    def test_feature_width_checked(self):
        with pytest.raises(DimensionError):
            predict_labels(random_bundle(5), np.zeros((4, 2)), 4)


class TestEvaluate:
    def test_all_correct(self):
        b = ModelBundle(0, MLPParams([(Tensor(np.eye(2)), Tensor(np.zeros(2)))]),
                        MLPParams([(Tensor(np.eye(2)), Tensor(np.zeros(2)))]))
        ds = DomainDataset(0, [[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]], [0, 1, 0])
        assert evaluate(b, ds) == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_constant_predictor_on_random_labels(self, seed):
        n = 2000
        labels = np.random.default_rng(seed).integers(0, 2, n)
        ds = DomainDataset(0, np.zeros((n, 3)), labels)
        acc = evaluate(constant_bundle([0.7, 0.3]), ds)
        assert abs(acc - 0.5) <= 3.5 * math.sqrt(0.25 / n)

    def test_constant_predictor_on_balanced_labels(self):
        ds = DomainDataset(0, np.zeros((100, 3)), np.arange(100) % 2)
        assert evaluate(constant_bundle([0.3, 0.7]), ds) == 0.5

    def test_label_beyond_model_classes(self):
        with pytest.raises(LabelError):
            evaluate(constant_bundle([0.5, 0.5]), DomainDataset(0, np.zeros((2, 3)), [0, 2]))

    def test_scoring_never_passes_labels_to_the_model(self, monkeypatch):
        seen = []
        original = inference.ensemble_probs

        def spy(model, x):
            seen.append(x.shape)
            return original(model, x)

        monkeypatch.setattr(inference, "ensemble_probs", spy)
        ds = DomainDataset(0, np.ones((10, 3)), np.arange(10) % 2)
        evaluate(constant_bundle([0.5, 0.5]), ds, batch_size=4)
        assert seen == [(4, 3), (4, 3), (2, 3)]

    def test_write_predictions(self, tmp_path):
        ds = DomainDataset(0, np.zeros((3, 3)), [1, 0, 1])
        acc = write_predictions(tmp_path / "p.csv", constant_bundle([0.25, 0.75]), ds)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "sample_index,true_label,pred_label,prob_0,prob_1"
        assert lines[1].startswith("0,1,1,0.25")
        assert acc == pytest.approx(2 / 3)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_argmax_ignores_uniform_positive_rescaling(scale):
    model = EnsembleModel([random_bundle(s) for s in range(3)], require_shared_adapter=False)
    x = np.random.default_rng(1).normal(size=(20, 3))
    probs = ensemble_probs(model, x)
    assert np.array_equal(np.argmax(probs * scale, axis=1), ensemble_predict(model, x))


def test_single_bundle_matches_its_own_argmax():
    b = random_bundle(9, CaFiLMParams(Tensor([[0.1, 0.1], [-0.2, 0.3]]), Tensor([1.2, 0.0])))
    x = np.random.default_rng(4).normal(size=(16, 3))
    assert np.array_equal(ensemble_predict(EnsembleModel([b]), x), np.argmax(inference.predict_batch(b, x), axis=1))


def test_evaluation_is_repeatable():
    b = random_bundle(10, CaFiLMParams(Tensor([[0.1, 0.1], [-0.2, 0.3]]), Tensor([1.2, 0.0])))
    ds = DomainDataset(0, np.random.default_rng(5).normal(size=(50, 3)), np.arange(50) % 3)
    assert evaluate(b, ds, 7) == evaluate(b, ds, 7)
