"""
Métricas de evaluación: macro F1/recall/precision, matriz de confusión y
calidad de la selección limpio/ruidoso frente a la máscara de volteo oculta.

Las métricas por clase con denominador nulo valen 0 (afecta a clases minoritarias
que el modelo nunca predice).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support, roc_auc_score

from .utils import DataUtils

logger = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    macro_f1: float
    macro_recall: float
    macro_precision: float
    confusion: np.ndarray
    selection_auroc: Optional[float] = None
    pseudo_accuracy: Optional[float] = None

    def to_summary(self) -> Dict[str, Any]:
        """Campos escalares para summary.json (None = no definido)."""
        return {
            "macro_f1": self.macro_f1,
            "macro_recall": self.macro_recall,
            "macro_precision": self.macro_precision,
            "selection_auroc": self.selection_auroc,
            "pseudo_accuracy": self.pseudo_accuracy,
        }


def macro_metrics(predictions: np.ndarray, true_labels: np.ndarray, num_classes: int) -> MetricsRecord:
    """
    Precision, recall y F1 por clase promediados sin pesos sobre las C clases.

    Args:
        predictions: Clases predichas
        true_labels: Clases verdaderas
        num_classes: C (las clases ausentes también cuentan en el promedio)

    Returns:
        MetricsRecord: Métricas macro y matriz de confusión C×C (filas = verdad)
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if predictions.shape != true_labels.shape:
        raise ValueError(f"Predicciones {predictions.shape} y etiquetas {true_labels.shape} no alineadas")

    labels = list(range(num_classes))
    precision, recall, f1, _ = precision_recall_fscore_support(
        true_labels, predictions, labels=labels, average=None, zero_division=0
    )
    return MetricsRecord(
        macro_f1=float(np.mean(f1)),
        macro_recall=float(np.mean(recall)),
        macro_precision=float(np.mean(precision)),
        confusion=confusion_matrix(true_labels, predictions, labels=labels),
    )


def selection_quality(posteriors: np.ndarray, flip_mask: np.ndarray) -> Optional[float]:
    """
    AUROC de (1 - posterior limpia) como puntuación de "etiqueta volteada".

    Returns:
        float or None: None si la máscara tiene una sola clase o las posteriores son constantes
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    flip_mask = np.asarray(flip_mask, dtype=bool)
    if posteriors.shape != flip_mask.shape:
        raise ValueError("Posteriores y máscara de volteo no alineadas")
    if flip_mask.all() or not flip_mask.any():
        return None
    if np.ptp(posteriors) == 0:
        return None
    return float(roc_auc_score(flip_mask, 1.0 - posteriors))


def pseudo_accuracy(pseudo_labels: np.ndarray, true_labels: np.ndarray) -> Optional[float]:
    """Fracción de pseudo-etiquetas que coinciden con la etiqueta verdadera; None si no hay."""
    pseudo_labels = np.asarray(pseudo_labels)
    if pseudo_labels.size == 0:
        return None
    return float(np.mean(pseudo_labels == np.asarray(true_labels)))


def confusion_frame(confusion: np.ndarray) -> pd.DataFrame:
    """Matriz de confusión en formato `true_class,pred_0,…,pred_{C-1}`."""
    confusion = np.asarray(confusion)
    df = pd.DataFrame(confusion, columns=[f"pred_{c}" for c in range(confusion.shape[1])])
    df.insert(0, "true_class", np.arange(confusion.shape[0]))
    return df


def save_confusion(confusion: np.ndarray, output_path: Union[str, Path]) -> bool:
    return DataUtils.save_to_csv(confusion_frame(confusion), output_path)
