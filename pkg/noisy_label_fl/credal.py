"""
Pérdida de etiquetado credal robusto (RCL) y su variante uniforme (UCL).

Cada muestra recibe una distribución de posibilidad con valores en {alpha, 1}:
la etiqueta de entrenamiento y toda clase con probabilidad predicha >= beta son
plenamente plausibles. El conjunto credal contiene las distribuciones cuya masa
en clases no plausibles es a lo sumo alpha. La pérdida es cero dentro del
conjunto y, fuera, la divergencia KL desde la proyección sobre su frontera.

La proyección se trata como objetivo fijo: el gradiente respecto a los logits
es p̂ - p^r cuando la pérdida está activa y cero dentro del conjunto.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import BetaSchedule, CredalConfig, LossKind, ProtocolDefaults

PROB_FLOOR = ProtocolDefaults.PROB_FLOOR
MEMBERSHIP_SLACK = 1e-12


@dataclass(frozen=True)
class PossibilityVector:
    """Valores de posibilidad por clase, cada uno exactamente alpha o 1."""
    values: np.ndarray
    alpha: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.all((values == 1.0) | (values == self.alpha)):
            raise ValueError("Cada valor de posibilidad debe ser exactamente alpha o 1")
        if not np.any(values == 1.0):
            raise ValueError("Al menos una clase debe ser plenamente plausible")
        object.__setattr__(self, "values", values)

    @property
    def plausible(self) -> np.ndarray:
        return self.values == 1.0


def beta_at(cfg: CredalConfig, t: float) -> float:
    """
    Umbral beta en la ronda global `t` según el calendario configurado.

    Coseno: beta_end + (beta_start - beta_end) * (1 + cos(pi * t / T)) / 2.
    """
    progress = min(max(float(t) / cfg.total_rounds, 0.0), 1.0)
    if cfg.schedule is BetaSchedule.CONSTANT:
        return cfg.beta_start
    if cfg.schedule is BetaSchedule.LINEAR:
        return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * progress
    return cfg.beta_end + (cfg.beta_start - cfg.beta_end) * (1.0 + math.cos(math.pi * progress)) / 2.0


def plausible_mask(probs: np.ndarray, labels: np.ndarray, beta: float) -> np.ndarray:
    """Máscara (n, C) de clases plenamente plausibles: la etiqueta y toda clase con p̂ >= beta."""
    probs = np.atleast_2d(probs)
    mask = probs >= beta
    mask[np.arange(len(probs)), np.asarray(labels, dtype=np.int64)] = True
    return mask


def build_possibility(label: int, probs: np.ndarray, beta: float, alpha: float) -> PossibilityVector:
    mask = plausible_mask(np.asarray(probs)[None, :], np.array([label]), beta)[0]
    return PossibilityVector(np.where(mask, 1.0, alpha), alpha)


def implausible_mass(probs: np.ndarray, plausible: np.ndarray) -> np.ndarray:
    return np.where(plausible, 0.0, np.atleast_2d(probs)).sum(axis=1)


def in_credal_set(probs: np.ndarray, pi: PossibilityVector, alpha: float) -> bool:
    # Para π con valores {alpha, 1} basta la restricción sobre el conjunto no plausible completo
    mass = float(np.asarray(probs)[~pi.plausible].sum())
    return mass <= alpha + MEMBERSHIP_SLACK


def project_batch(probs: np.ndarray, plausible: np.ndarray, alpha: float) -> np.ndarray:
    """
    Proyecta cada fila de `probs` sobre la frontera de su conjunto credal.

    Las clases plausibles comparten la masa 1 - alpha y las no plausibles la masa
    alpha, proporcionalmente a p̂ dentro de cada grupo; un grupo con masa nula
    reparte su cuota uniformemente. Sin clases no plausibles la fila queda igual.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    plausible = np.atleast_2d(plausible)
    implausible = ~plausible

    n_plaus = plausible.sum(axis=1, keepdims=True)
    n_implaus = implausible.sum(axis=1, keepdims=True)
    plaus_probs = np.where(plausible, probs, 0.0)
    implaus_probs = np.where(implausible, probs, 0.0)
    plaus_sum = plaus_probs.sum(axis=1, keepdims=True)
    implaus_sum = implaus_probs.sum(axis=1, keepdims=True)

    plaus_share = np.where(
        plaus_sum > 0, plaus_probs / np.where(plaus_sum > 0, plaus_sum, 1.0),
        plausible / np.maximum(n_plaus, 1),
    )
    implaus_share = np.where(
        implaus_sum > 0, implaus_probs / np.where(implaus_sum > 0, implaus_sum, 1.0),
        implausible / np.maximum(n_implaus, 1),
    )
    projected = (1.0 - alpha) * plaus_share + alpha * implaus_share
    return np.where(n_implaus == 0, probs, projected)


def project(probs: np.ndarray, pi: PossibilityVector, alpha: float) -> np.ndarray:
    return project_batch(np.asarray(probs)[None, :], pi.plausible[None, :], alpha)[0]


def kl_divergence(target: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """KL(target || probs) por fila con suelos 1e-12; los términos con target = 0 valen 0."""
    target = np.atleast_2d(target)
    probs = np.atleast_2d(probs)
    terms = np.where(
        target > 0,
        target * (np.log(np.maximum(target, PROB_FLOOR)) - np.log(np.maximum(probs, PROB_FLOOR))),
        0.0,
    )
    return terms.sum(axis=1)


def rcl_targets(probs: np.ndarray, labels: np.ndarray, beta: float,
                alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Objetivos p^r y máscara de actividad de la pérdida RCL para un lote.

    Returns:
        tuple: (objetivos (n, C), activo (n,) True fuera del conjunto credal)
    """
    probs = np.atleast_2d(probs)
    plausible = plausible_mask(probs, labels, beta)
    active = implausible_mass(probs, plausible) > alpha + MEMBERSHIP_SLACK
    return project_batch(probs, plausible, alpha), active


def ucl_targets(probs: np.ndarray, labels: np.ndarray, beta: float,
                alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Como `rcl_targets`, pero las muestras cuya confianza fuera de la etiqueta
    alcanza beta se ignoran por completo (etiqueta totalmente incierta).
    """
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(probs))
    off_label = probs.copy()
    off_label[rows, labels] = -np.inf
    ignored = off_label.max(axis=1) >= beta

    plausible = np.zeros_like(probs, dtype=bool)
    plausible[rows, labels] = True
    active = (implausible_mass(probs, plausible) > alpha + MEMBERSHIP_SLACK) & ~ignored
    return project_batch(probs, plausible, alpha), active


def rcl_loss(probs: np.ndarray, pi: PossibilityVector, alpha: float) -> Tuple[float, Optional[np.ndarray]]:
    """
    Pérdida RCL de una muestra.

    Returns:
        tuple: (pérdida, objetivo p^r o None si la predicción está en el conjunto credal)
    """
    probs = np.asarray(probs, dtype=np.float64)
    if in_credal_set(probs, pi, alpha):
        return 0.0, None
    target = project(probs, pi, alpha)
    return float(kl_divergence(target, probs)[0]), target


def ucl_loss(probs: np.ndarray, label: int, beta: float,
             alpha: float = ProtocolDefaults.ALPHA) -> Tuple[float, Optional[np.ndarray]]:
    """Pérdida UCL: 0 si otra clase alcanza beta; si no, RCL con π construida solo desde la etiqueta."""
    probs = np.asarray(probs, dtype=np.float64)
    others = np.delete(probs, label)
    if others.size and others.max() >= beta:
        return 0.0, None
    values = np.full(len(probs), alpha)
    values[label] = 1.0
    return rcl_loss(probs, PossibilityVector(values, alpha), alpha)


def loss_and_logit_grad(probs: np.ndarray, labels: np.ndarray, kind: LossKind,
                        beta: float = 1.0, alpha: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pérdidas por muestra y gradientes respecto a los logits para un lote.

    Args:
        probs: Predicciones softmax (n, C)
        labels: Etiquetas de entrenamiento (n,)
        kind: CE, RCL o UCL
        beta: Umbral de plausibilidad (RCL/UCL)
        alpha: Relajación de etiqueta (RCL/UCL)

    Returns:
        tuple: (pérdidas (n,), gradientes (n, C))
    """
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(probs))

    if kind is LossKind.CE:
        losses = -np.log(np.maximum(probs[rows, labels], PROB_FLOOR))
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return losses, grad

    if kind is LossKind.RCL:
        targets, active = rcl_targets(probs, labels, beta, alpha)
    else:
        targets, active = ucl_targets(probs, labels, beta, alpha)
    losses = np.where(active, kl_divergence(targets, probs), 0.0)
    grad = np.where(active[:, None], probs - targets, 0.0)
    return losses, grad
