"""
Inyección de ruido de etiquetas por cliente.

Soporta ruido simétrico, pairflip y asimétrico basado en conocimiento clínico
(CK-Asymm) con tasas y tipos heterogéneos entre clientes. Cada muestra se
corrompe de forma independiente con probabilidad igual a la tasa del cliente.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import RANDOM_CHOICE, NoiseKind, NoiseSpec
from .synthdata import ClientDataset
from .utils import STREAM_NOISE, DataUtils, make_rng

logger = logging.getLogger(__name__)


def _symmetric_labels(true_labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    # uniforme sobre las C-1 clases distintas de la verdadera
    draws = rng.integers(0, num_classes - 1, size=len(true_labels))
    return draws + (draws >= true_labels)


def _ck_asymm_labels(true_labels: np.ndarray, spec: NoiseSpec, num_classes: int,
                     rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(true_labels)
    for i, y in enumerate(true_labels):
        candidates = spec.confusion_map[int(y)]
        if candidates == RANDOM_CHOICE:
            r = int(rng.integers(0, num_classes - 1))
            out[i] = r + (r >= y)
        else:
            out[i] = candidates[int(rng.integers(0, len(candidates)))]
    return out


def corrupt(datasets: Sequence[ClientDataset], spec: NoiseSpec,
            num_classes: int) -> Tuple[List[ClientDataset], List[np.ndarray]]:
    """
    Reescribe las etiquetas observadas según el ruido configurado por cliente.

    Args:
        datasets: Conjuntos limpios, uno por cliente
        spec: Especificación del ruido (una entrada por cliente)
        num_classes: Número de clases C

    Returns:
        tuple: (conjuntos con etiquetas observadas corrompidas, máscaras de volteo por cliente)

    Raises:
        ConfigError: Si el mapa de confusión es inválido para C
        ValueError: Si el número de entradas de ruido no coincide con los clientes
    """
    spec.validate_for(num_classes)
    if len(spec.per_client) != len(datasets):
        raise ValueError(f"Hay {len(spec.per_client)} entradas de ruido para {len(datasets)} clientes")

    noisy: List[ClientDataset] = []
    masks: List[np.ndarray] = []
    for ds, noise in zip(datasets, spec.per_client):
        rng = make_rng(spec.seed, STREAM_NOISE, ds.client_id)
        flip = rng.random(len(ds)) < noise.rate
        observed = ds.true_labels.copy()
        targets = ds.true_labels[flip]

        if noise.kind is NoiseKind.SYMMETRIC:
            observed[flip] = _symmetric_labels(targets, num_classes, rng)
        elif noise.kind is NoiseKind.PAIRFLIP:
            observed[flip] = (targets + 1) % num_classes
        else:
            observed[flip] = _ck_asymm_labels(targets, spec, num_classes, rng)

        noisy.append(ds.with_observed(observed))
        masks.append(flip)
        logger.info(
            f"🔀 Cliente {ds.client_id}: ruido {noise.kind.value} {noise.rate:.0%} "
            f"→ {int(flip.sum())}/{len(ds)} etiquetas volteadas"
        )
    return noisy, masks


def flip_mask_frame(datasets: Sequence[ClientDataset], masks: Sequence[np.ndarray]) -> pd.DataFrame:
    """Tabla `client,id,flipped` para uniones en la evaluación."""
    return pd.DataFrame({
        "client": np.concatenate([np.full(len(ds), ds.client_id) for ds in datasets]),
        "id": np.concatenate([ds.ids for ds in datasets]),
        "flipped": np.concatenate([np.asarray(m, dtype=np.int64) for m in masks]),
    })


def save_flip_mask(datasets: Sequence[ClientDataset], masks: Sequence[np.ndarray],
                   output_path: Union[str, Path]) -> bool:
    return DataUtils.save_to_csv(flip_mask_frame(datasets, masks), output_path)
