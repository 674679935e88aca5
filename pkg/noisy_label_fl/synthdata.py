"""
Generador de datos sintéticos de clasificación para los clientes federados.

Cada clase es un bloque gaussiano de covarianza unitaria; las medias se colocan
en un símplex escalado (d >= C), en un círculo (2 <= d < C) o en una recta (d = 1)
de modo que la distancia entre medias sea al menos `cluster_separation`.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import DataSpec
from .utils import STREAM_DATA, STREAM_TEST, DataUtils, make_rng

logger = logging.getLogger(__name__)

# client_id del conjunto de prueba retenido
TEST_CLIENT_ID = -1


@dataclass
class ClientDataset:
    """
    Datos privados de un cliente en forma columnar.

    `true_labels` solo se usa para evaluación; el entrenamiento ve `observed_labels`.
    """
    client_id: int
    ids: np.ndarray
    features: np.ndarray
    observed_labels: np.ndarray
    true_labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)

        n = len(self.ids)
        if n < 1:
            raise ValueError(f"El cliente {self.client_id} necesita al menos una muestra")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"Atributos con forma {self.features.shape} no alineados con {n} muestras")
        if self.observed_labels.shape != (n,) or self.true_labels.shape != (n,):
            raise ValueError("Las etiquetas deben ser vectores alineados con las muestras")
        if len(np.unique(self.ids)) != n:
            raise ValueError(f"Identificadores repetidos en el cliente {self.client_id}")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def with_observed(self, observed_labels: np.ndarray) -> "ClientDataset":
        """Copia del cliente con las etiquetas observadas reemplazadas."""
        return ClientDataset(
            client_id=self.client_id,
            ids=self.ids.copy(),
            features=self.features.copy(),
            observed_labels=np.asarray(observed_labels, dtype=np.int64).copy(),
            true_labels=self.true_labels.copy(),
        )


def class_means(num_classes: int, feature_dim: int, separation: float) -> np.ndarray:
    """
    Coloca las medias de clase con distancias por pares >= `separation`.

    Returns:
        np.ndarray: Matriz (C, d) de medias
    """
    means = np.zeros((num_classes, feature_dim))
    if feature_dim >= num_classes:
        # vértices de un símplex escalado: todas las distancias son exactamente `separation`
        means[:, :num_classes] = np.eye(num_classes) * separation / np.sqrt(2.0)
    elif feature_dim >= 2:
        radius = separation / (2.0 * np.sin(np.pi / num_classes))
        angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    else:
        means[:, 0] = np.arange(num_classes) * separation
    return means


def class_counts(n: int, proportions: Sequence[float]) -> np.ndarray:
    """
    Reparte `n` muestras entre clases por el método del mayor residuo.

    Los empates en el residuo se resuelven hacia el índice de clase menor.
    """
    raw = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(raw + 1e-9).astype(np.int64)
    remainder = n - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def _draw_blobs(n: int, means: np.ndarray, proportions: Sequence[float],
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    counts = class_counts(n, proportions)
    labels = np.repeat(np.arange(len(counts)), counts)
    features = means[labels] + rng.standard_normal((n, means.shape[1]))
    order = rng.permutation(n)
    return features[order], labels[order]


def generate(spec: DataSpec) -> Tuple[List[ClientDataset], ClientDataset]:
    """
    Genera los conjuntos de los K clientes y el conjunto de prueba retenido.

    Las etiquetas observadas coinciden con las verdaderas; el ruido se inyecta
    después con `noisegen.corrupt`. Misma especificación implica salida idéntica.

    Args:
        spec: Especificación validada

    Returns:
        tuple: (lista de ClientDataset, ClientDataset de prueba)
    """
    means = class_means(spec.num_classes, spec.feature_dim, spec.cluster_separation)
    logger.info(f"🧪 Generando {spec.num_clients} clientes, C={spec.num_classes}, d={spec.feature_dim}")

    clients: List[ClientDataset] = []
    next_id = 0
    for k, n_k in enumerate(spec.samples_per_client):
        rng = make_rng(spec.seed, STREAM_DATA, k)
        features, labels = _draw_blobs(n_k, means, spec.class_proportions, rng)
        ids = np.arange(next_id, next_id + n_k)
        next_id += n_k
        clients.append(ClientDataset(k, ids, features, labels.copy(), labels))
        logger.debug(f"   cliente {k}: {n_k} muestras, conteos {np.bincount(labels, minlength=spec.num_classes)}")

    rng = make_rng(spec.seed, STREAM_TEST)
    features, labels = _draw_blobs(spec.test_samples, means, spec.class_proportions, rng)
    ids = np.arange(next_id, next_id + spec.test_samples)
    test = ClientDataset(TEST_CLIENT_ID, ids, features, labels.copy(), labels)

    logger.info(f"✅ Datos generados: {next_id} muestras de entrenamiento, {len(test)} de prueba")
    return clients, test


def to_frame(datasets: Sequence[ClientDataset]) -> pd.DataFrame:
    """Aplana los conjuntos al esquema `id,client,true_label,observed_label,f0..f{d-1}`."""
    frames = []
    for ds in datasets:
        frame = pd.DataFrame({
            "id": ds.ids,
            "client": np.full(len(ds), ds.client_id, dtype=np.int64),
            "true_label": ds.true_labels,
            "observed_label": ds.observed_labels,
        })
        feats = pd.DataFrame(ds.features, columns=[f"f{j}" for j in range(ds.feature_dim)])
        frames.append(pd.concat([frame, feats], axis=1))
    return pd.concat(frames, ignore_index=True)


def save_datasets(datasets: Sequence[ClientDataset], output_path: Union[str, Path]) -> bool:
    """Guarda los conjuntos en CSV con precisión completa de flotantes."""
    return DataUtils.save_to_csv(to_frame(datasets), output_path, float_format=None)


def load_datasets(file_path: Union[str, Path]) -> Optional[List[ClientDataset]]:
    """
    Recarga los conjuntos guardados con `save_datasets`.

    Returns:
        list or None: Un ClientDataset por cliente (ordenados por client_id) o None si hay error
    """
    df = DataUtils.load_csv(file_path)
    if df is None:
        return None
    if not DataUtils.validate_columns(df, ["id", "client", "true_label", "observed_label"]):
        return None

    feature_cols = sorted((c for c in df.columns if c.startswith("f")), key=lambda c: int(c[1:]))
    datasets = []
    for client_id, group in df.groupby("client", sort=True):
        datasets.append(ClientDataset(
            client_id=int(client_id),
            ids=group["id"].to_numpy(),
            features=group[feature_cols].to_numpy(dtype=np.float64),
            observed_labels=group["observed_label"].to_numpy(),
            true_labels=group["true_label"].to_numpy(),
        ))
    return datasets
