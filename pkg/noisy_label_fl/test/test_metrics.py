"""
Tests unitarios para las métricas de evaluación.
"""

import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from noisy_label_fl.metrics import (confusion_frame, macro_metrics, pseudo_accuracy, save_confusion,
                                    selection_quality)


class TestMacroMetrics:
    """Tests para macro_metrics"""

    def test_perfect_predictions(self):
        """Test predicciones perfectas dan métricas 1"""
        labels = np.array([0, 1, 2, 2, 1])
        record = macro_metrics(labels, labels, 3)
        assert record.macro_f1 == record.macro_recall == record.macro_precision == 1.0

    def test_binary_all_zero(self):
        """Test binario prediciendo siempre 0"""
        record = macro_metrics(np.zeros(4, dtype=int), np.array([0, 0, 1, 1]), 2)
        assert record.macro_recall == 0.5
        # la clase 1 nunca se predice: su precision vale 0
        assert record.macro_precision == pytest.approx(0.25)

    def test_precision_arithmetic(self):
        """Test precisión macro calculada a mano"""
        truth = np.array([0, 0, 1, 1, 2, 2])
        pred = np.array([0, 0, 0, 1, 2, 2])
        record = macro_metrics(pred, truth, 3)
        np.testing.assert_array_equal(record.confusion, [[2, 0, 0], [1, 1, 0], [0, 0, 2]])
        assert record.macro_precision == pytest.approx((2 / 3 + 1 + 1) / 3)
        assert record.macro_precision == pytest.approx(0.8889, abs=1e-4)

    def test_absent_class_counts_in_average(self):
        """Test una clase ausente cuenta con 0 en el promedio"""
        record = macro_metrics(np.array([0, 1]), np.array([0, 1]), 4)
        assert record.macro_f1 == 0.5
        assert record.confusion.shape == (4, 4)

    def test_invariant_under_relabeling(self):
        """Test métricas invariantes al renombrar clases"""
        rng = np.random.default_rng(0)
        truth = rng.integers(0, 4, 300)
        pred = np.where(rng.random(300) < 0.7, truth, rng.integers(0, 4, 300))
        perm = np.array([2, 0, 3, 1])

        original = macro_metrics(pred, truth, 4)
        relabeled = macro_metrics(perm[pred], perm[truth], 4)

        assert relabeled.macro_f1 == pytest.approx(original.macro_f1)
        assert relabeled.macro_precision == pytest.approx(original.macro_precision)
        assert relabeled.macro_recall == pytest.approx(original.macro_recall)

    def test_confusion_totals(self):
        """Test la matriz de confusión suma n"""
        truth = np.array([0, 1, 1, 2, 2, 2])
        record = macro_metrics(np.array([0, 0, 1, 2, 1, 2]), truth, 3)
        assert record.confusion.sum() == 6
        np.testing.assert_array_equal(record.confusion.sum(axis=1), [1, 2, 3])

    def test_misaligned_rejected(self):
        """Test predicciones y etiquetas de distinto largo"""
        with pytest.raises(ValueError):
            macro_metrics(np.array([0, 1]), np.array([0]), 2)


class TestSelectionQuality:
    """Tests para selection_quality y pseudo_accuracy"""

    def test_perfect_separation(self):
        """Test AUROC 1 con separación perfecta"""
        posteriors = np.array([0.9, 0.8, 0.1, 0.2])
        assert selection_quality(posteriors, np.array([False, False, True, True])) == 1.0

    def test_constant_posteriors_absent(self):
        """Test posteriores constantes no definen AUROC"""
        assert selection_quality(np.full(4, 0.5), np.array([True, False, True, False])) is None

    def test_single_class_mask_absent(self):
        """Test máscara de una sola clase no define AUROC"""
        assert selection_quality(np.array([0.1, 0.9]), np.array([False, False])) is None

    def test_random_posteriors_near_half(self):
        """Test posteriores aleatorias dan AUROC cercano a 0.5"""
        rng = np.random.default_rng(7)
        auroc = selection_quality(rng.random(10000), rng.random(10000) < 0.4)
        assert abs(auroc - 0.5) <= 0.02

    def test_ties_use_midrank(self):
        """Test empates con rango medio"""
        posteriors = np.array([0.5, 0.5, 0.5, 0.1])
        assert selection_quality(posteriors, np.array([False, True, False, True])) == pytest.approx(0.75)

    def test_pseudo_accuracy(self):
        assert pseudo_accuracy(np.array([1, 2, 0]), np.array([1, 2, 2])) == pytest.approx(2 / 3)
        assert pseudo_accuracy(np.array([]), np.array([])) is None


class TestConfusionExport:
    """Tests para la exportación de la matriz de confusión"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_frame_layout(self):
        """Test columnas de la matriz de confusión exportada"""
        frame = confusion_frame(np.array([[2, 0], [1, 3]]))
        assert list(frame.columns) == ["true_class", "pred_0", "pred_1"]
        assert frame["pred_0"].tolist() == [2, 1]

    def test_save(self):
        path = Path(self.temp_dir) / "confusion.csv"
        assert save_confusion(np.eye(3, dtype=int), path)
        assert pd.read_csv(path).shape == (3, 4)
