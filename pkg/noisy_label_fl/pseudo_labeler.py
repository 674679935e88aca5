"""
Nivel de ruido, umbrales adaptativos por clase y pseudo-etiquetado.

Con el reparto limpio/ruidoso de un cliente se mide su nivel de ruido δ. Si
δ alcanza el umbral (0.1), las etiquetas de las muestras ruidosas se descartan
y se reemplazan por la predicción del modelo global cuando su confianza supera
el umbral de la clase predicha; el conjunto de entrenamiento pasa a ser
limpias ∪ pseudo-etiquetadas. En otro caso se entrena con el conjunto original.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import ProtocolDefaults
from .selector import CleanNoisySplit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassThresholds:
    """Confianzas medias por clase (None si no hay muestras limpias) y umbrales ζ_c."""
    avg_conf: Optional[np.ndarray]
    thresholds: np.ndarray
    zeta0: float

    def __post_init__(self):
        thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if np.any(thresholds > self.zeta0 + 1e-12):
            raise ValueError(f"Umbrales por encima de zeta0={self.zeta0}: {thresholds}")
        object.__setattr__(self, "thresholds", thresholds)


@dataclass
class DatasetSplit:
    """
    Resultado del paso de pseudo-etiquetado de un cliente.

    Todos los campos son índices locales del cliente (posiciones en su dataset).
    """
    clean: np.ndarray
    noisy: np.ndarray
    pseudo: np.ndarray
    pseudo_labels: np.ndarray
    train: np.ndarray
    train_labels: np.ndarray
    noise_level: float
    pseudo_branch: bool

    def __post_init__(self):
        if len(np.unique(self.train)) != len(self.train):
            raise ValueError("El conjunto de entrenamiento contiene muestras repetidas")
        if not np.all(np.isin(self.pseudo, self.noisy)):
            raise ValueError("Toda muestra pseudo-etiquetada debe provenir del subconjunto ruidoso")


def noise_level(split: CleanNoisySplit) -> float:
    """δ = |D_n| / (|D_c| + |D_n|)."""
    total = len(split.clean) + len(split.noisy)
    if total < 1:
        raise ValueError("El nivel de ruido requiere al menos una muestra")
    return len(split.noisy) / total


def class_confidences(clean_probs: np.ndarray, num_classes: int,
                      per_class_divisor: bool = False) -> Optional[np.ndarray]:
    """
    Confianza media Avg_c de las muestras limpias predichas como clase c.

    Por defecto el divisor es |D_c| (todas las limpias); con `per_class_divisor`
    se divide por el número de limpias predichas como c.

    Args:
        clean_probs: Predicciones del modelo global sobre las muestras limpias (n, C)
        num_classes: C
        per_class_divisor: Usa la media por clase en lugar del divisor global

    Returns:
        np.ndarray or None: Avg_c por clase, o None si no hay muestras limpias
    """
    clean_probs = np.asarray(clean_probs, dtype=np.float64).reshape(-1, num_classes)
    if len(clean_probs) == 0:
        return None
    predicted = clean_probs.argmax(axis=1)
    confidence = clean_probs.max(axis=1)
    sums = np.bincount(predicted, weights=confidence, minlength=num_classes)
    if not per_class_divisor:
        return sums / len(clean_probs)
    counts = np.bincount(predicted, minlength=num_classes)
    return np.divide(sums, counts, out=np.zeros(num_classes), where=counts > 0)


def adaptive_thresholds(avg_conf: Optional[np.ndarray], zeta0: float,
                        floor_ratio: float = ProtocolDefaults.ZETA_FLOOR_RATIO,
                        num_classes: Optional[int] = None) -> ClassThresholds:
    """
    ζ_c = ζ₀ · Avg_c / max(Avg).

    Las clases con Avg_c = 0 reciben el suelo floor_ratio·ζ₀; sin confianzas
    definidas (ninguna muestra limpia) todos los umbrales valen ζ₀.
    """
    if avg_conf is None or not np.any(np.asarray(avg_conf) > 0):
        if avg_conf is None and num_classes is None:
            raise ValueError("Sin confianzas hace falta `num_classes` para el umbral de respaldo")
        size = num_classes if avg_conf is None else len(avg_conf)
        return ClassThresholds(avg_conf, np.full(size, zeta0), zeta0)

    avg_conf = np.asarray(avg_conf, dtype=np.float64)
    thresholds = zeta0 * avg_conf / avg_conf.max()
    thresholds = np.where(avg_conf > 0, thresholds, floor_ratio * zeta0)
    return ClassThresholds(avg_conf, thresholds, zeta0)


def fixed_thresholds(num_classes: int, value: float = ProtocolDefaults.FIXED_THRESHOLD) -> ClassThresholds:
    return ClassThresholds(None, np.full(num_classes, value), value)


def generate_pseudo(noisy_probs: np.ndarray,
                    thresholds: ClassThresholds) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pseudo-etiquetas para las muestras ruidosas suficientemente confiadas.

    Args:
        noisy_probs: Predicciones del modelo global sobre D_n (m, C)

    Returns:
        tuple: (posiciones aceptadas dentro de D_n, pseudo-etiquetas ŷ)
    """
    noisy_probs = np.asarray(noisy_probs, dtype=np.float64)
    if noisy_probs.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    # argmax devuelve el primer máximo: los empates van a la clase de menor índice
    predicted = noisy_probs.argmax(axis=1)
    confidence = noisy_probs.max(axis=1)
    accepted = np.flatnonzero(confidence >= thresholds.thresholds[predicted])
    return accepted, predicted[accepted]


def build_train_set(observed_labels: np.ndarray, split: CleanNoisySplit,
                    pseudo: Tuple[np.ndarray, np.ndarray],
                    gate: float = ProtocolDefaults.NOISE_LEVEL_GATE) -> DatasetSplit:
    """
    Arma D̂ = D_c ∪ D_pseudo si δ >= gate; si no, D̂ = D con sus etiquetas observadas.

    Args:
        observed_labels: Etiquetas observadas de todo el dataset local
        split: Reparto limpio/ruidoso
        pseudo: (posiciones dentro de D_n, pseudo-etiquetas) de `generate_pseudo`
        gate: Umbral de nivel de ruido

    Returns:
        DatasetSplit: Reparto completo y conjunto de entrenamiento
    """
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    delta = noise_level(split)
    positions, labels = pseudo
    pseudo_idx = split.noisy[np.asarray(positions, dtype=np.int64)]
    pseudo_labels = np.asarray(labels, dtype=np.int64)

    if delta >= gate:
        train = np.concatenate([split.clean, pseudo_idx])
        train_labels = np.concatenate([observed_labels[split.clean], pseudo_labels])
        order = np.argsort(train, kind="stable")
        train, train_labels = train[order], train_labels[order]
    else:
        train = np.arange(len(observed_labels))
        train_labels = observed_labels.copy()

    return DatasetSplit(
        clean=split.clean,
        noisy=split.noisy,
        pseudo=pseudo_idx,
        pseudo_labels=pseudo_labels,
        train=train,
        train_labels=train_labels,
        noise_level=delta,
        pseudo_branch=delta >= gate,
    )
