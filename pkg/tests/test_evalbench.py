"""
Tests for metrics, the SVM baseline and classification maps.
"""
import json
import math

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.evalbench import (
    PALETTE, compression_ratio, confusion, mean_reports, metrics, prediction_map, render_map, save_map,
    save_report, svm_decision, svm_predict, svm_train,
)
from models.eval_models import ConfusionMatrix, SvmConfig


def clouds(rng, centres, count=40, spread=0.5):
    features = np.concatenate([rng.normal(c, spread, size=(count, len(c))) for c in centres])
    labels = np.repeat(np.arange(1, len(centres) + 1), count)
    return features, labels


class TestMetrics:

    def test_two_class_example(self):
        report = metrics(ConfusionMatrix(np.array([[8, 2], [1, 9]])))
        assert report.oa == pytest.approx(0.85, abs=1e-12)
        assert report.aa == pytest.approx(0.85, abs=1e-12)
        assert report.kappa == pytest.approx(0.70, abs=1e-12)
        assert report.per_class == pytest.approx([0.8, 0.9], abs=1e-12)

    def test_confusion_counts(self):
        truth = [1] * 10 + [2] * 10
        pred = [1] * 8 + [2] * 2 + [1] + [2] * 9
        assert confusion(truth, pred).counts.tolist() == [[8, 2], [1, 9]]

    def test_perfect_classifier(self):
        report = metrics(confusion([1, 2, 3, 3], [1, 2, 3, 3]))
        assert (report.oa, report.aa, report.kappa) == (1.0, 1.0, 1.0)

    def test_single_class_agreement(self):
        report = metrics(ConfusionMatrix(np.array([[5, 0], [0, 0]])))
        assert report.kappa == 1.0
        assert report.aa == 1.0
        assert math.isnan(report.per_class[1])

    def test_chance_agreement_gives_zero_kappa(self):
        rng = np.random.default_rng(7)
        truth = rng.integers(1, 6, size=10_000)
        pred = rng.integers(1, 6, size=10_000)
        assert abs(metrics(confusion(truth, pred, classes=5)).kappa) < 0.05

    def test_kappa_ignores_class_order(self, rng):
        counts = rng.integers(0, 30, size=(4, 4)) + np.diag([20, 15, 10, 5])
        order = np.array([2, 0, 3, 1])
        base = metrics(ConfusionMatrix(counts))
        permuted = metrics(ConfusionMatrix(counts[np.ix_(order, order)]))
        assert permuted.kappa == pytest.approx(base.kappa, abs=1e-12)
        assert permuted.oa == pytest.approx(base.oa, abs=1e-12)

    def test_kappa_matches_closed_form(self, rng):
        counts = rng.integers(0, 20, size=(3, 3)) + 5 * np.eye(3, dtype=np.int64)
        total = counts.sum()
        po = np.trace(counts) / total
        pe = float(np.dot(counts.sum(axis=1), counts.sum(axis=0))) / total ** 2
        assert metrics(ConfusionMatrix(counts)).kappa == pytest.approx((po - pe) / (1 - pe), abs=1e-12)

    def test_absent_class_excluded_from_average(self):
        report = metrics(confusion([1, 1, 3, 3], [1, 2, 3, 3], classes=3))
        assert math.isnan(report.per_class[1])
        assert report.aa == pytest.approx(0.75)

    def test_label_range(self):
        with pytest.raises(InvalidArgumentError):
            confusion([1, 2], [1, 3], classes=2)
        with pytest.raises(InvalidArgumentError):
            confusion([1, 2], [1])

    def test_empty_matrix(self):
        with pytest.raises(InvalidArgumentError):
            metrics(ConfusionMatrix(np.zeros((2, 2))))

    @pytest.mark.parametrize("k, l, expected", [(5, 103, 0.0485), (10, 192, 0.0521)])
    def test_compression_ratio(self, k, l, expected):
        assert compression_ratio(k, l) == pytest.approx(expected, abs=5e-5)

    def test_report_json(self, tmp_path):
        report = metrics(confusion([1, 1, 3], [1, 2, 3], classes=3))
        path = tmp_path / "r.json"
        save_report(report, path)
        data = json.loads(path.read_text())
        assert data["per_class"][1] is None
        assert data["confusion"] == [[1, 1, 0], [0, 0, 0], [0, 0, 1]]

    def test_mean_reports(self):
        a = metrics(confusion([1, 2], [1, 2], classes=3))
        b = metrics(confusion([1, 3], [2, 3], classes=3))
        a.timing, b.timing = {"train": 1.0}, {"train": 3.0}
        mean = mean_reports([a, b])
        assert mean.oa == pytest.approx(0.75)
        assert mean.per_class[0] == pytest.approx(0.5)
        assert mean.per_class[1] == pytest.approx(1.0)
        assert mean.per_class[2] == pytest.approx(1.0)
        assert mean.timing["train"] == pytest.approx(2.0)
        assert mean.confusion.total == 4
        assert mean.extra["runs"] == 2


class TestSvm:

    def test_separated_clouds(self, rng):
        features, labels = clouds(rng, [(-3.0, 0.0), (3.0, 0.0), (0.0, 4.0)])
        model = svm_train(features, labels)
        assert model.classes == [1, 2, 3]
        assert np.mean(svm_predict(model, features) == labels) >= 0.95

    def test_minibatch_mode(self, rng):
        features, labels = clouds(rng, [(-3.0, -3.0), (3.0, 3.0)])
        model = svm_train(features, labels, SvmConfig(batch=16, seed=2))
        assert np.mean(svm_predict(model, features) == labels) >= 0.95

    def test_duplicated_data_gives_same_model(self, rng):
        features, labels = clouds(rng, [(-1.0, 0.0), (1.0, 0.5)], spread=1.0)
        once = svm_train(features, labels)
        twice = svm_train(np.concatenate([features, features]), np.concatenate([labels, labels]))
        assert np.allclose(once.weights, twice.weights, rtol=1e-9, atol=1e-9)
        assert np.allclose(once.biases, twice.biases, rtol=1e-9, atol=1e-9)

    def test_decision_shape(self, rng):
        features, labels = clouds(rng, [(-3.0,), (3.0,)], count=10)
        model = svm_train(features, labels, SvmConfig(epochs=20))
        assert svm_decision(model, features[0]).shape == (1, 2)

    def test_constant_feature_is_harmless(self, rng):
        features, labels = clouds(rng, [(-3.0, 1.0), (3.0, 1.0)])
        features[:, 1] = 1.0
        model = svm_train(features, labels)
        assert np.all(np.isfinite(model.weights))

    def test_single_class(self):
        with pytest.raises(InvalidArgumentError):
            svm_train(np.ones((4, 2)), [2, 2, 2, 2])

    def test_bad_settings(self, rng):
        features, labels = clouds(rng, [(-1.0,), (1.0,)], count=4)
        with pytest.raises(InvalidArgumentError):
            svm_train(features, labels, SvmConfig(c=0.0))


class TestMaps:

    def test_prediction_map(self):
        pred = prediction_map(3, 4, 2, [(0, 1), (2, 3)], [2, 1])
        assert pred.labels[0, 1] == 2 and pred.labels[2, 3] == 1
        assert pred.labeled_count == 2

    def test_unlabeled_is_black(self):
        rgb = render_map(prediction_map(2, 2, 2, [(0, 0)], [1]))
        assert rgb.shape == (2, 2, 3)
        assert not rgb[1, 1].any()
        assert rgb[0, 0].tolist() == PALETTE[0].tolist()

    def test_palette_cycles(self):
        rgb = render_map(prediction_map(1, 2, 17, [(0, 0), (0, 1)], [1, 17]))
        assert rgb[0, 0].tolist() == rgb[0, 1].tolist()

    def test_ppm_file(self, tmp_path):
        path = tmp_path / "map.ppm"
        save_map(render_map(prediction_map(4, 5, 3, [(1, 1)], [3])), path)
        assert path.read_bytes().startswith(b"P6")
