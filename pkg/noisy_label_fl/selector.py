"""
Selector de muestras: mezcla gaussiana de dos componentes sobre las pérdidas.

Cada cliente ajusta por EM su selector local (CSS) sobre las pérdidas de
entropía cruzada por muestra; el servidor promedia los parámetros de todos los
clientes en el selector global (GSS), que se usa al inicio de la ronda siguiente
para separar las muestras limpias (componente de menor media) de las ruidosas.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import norm

from .config import ProtocolDefaults

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = ProtocolDefaults.VARIANCE_FLOOR
PRIOR_CLIP = 1e-12
# log de la menor densidad normal representable
LOG_DENSITY_UNDERFLOW = float(np.log(np.finfo(np.float64).tiny))


@dataclass(frozen=True)
class SelectorParams:
    """
    Parámetros de la mezcla: medias, varianzas y priors (componente 0 = limpio).

    Se construye con `SelectorParams.ordered` para garantizar mu[0] <= mu[1].
    """
    mu: np.ndarray
    sigma2: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma2", "pi"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != (2,):
                raise ValueError(f"{name} debe tener 2 componentes, no {value.shape}")
            object.__setattr__(self, name, value)
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("Las medias del selector deben ser finitas")
        if np.any(self.sigma2 < VARIANCE_FLOOR * (1 - 1e-9)):
            raise ValueError(f"Varianzas por debajo del suelo {VARIANCE_FLOOR}: {self.sigma2}")
        if np.any(self.pi <= 0) or np.any(self.pi >= 1) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"Priors inválidos: {self.pi}")
        if self.mu[0] > self.mu[1]:
            raise ValueError("Convención violada: la componente limpia debe tener la menor media")

    @classmethod
    def ordered(cls, mu, sigma2, pi) -> "SelectorParams":
        """Normaliza priors, aplica el suelo de varianza y ordena por media."""
        mu = np.asarray(mu, dtype=np.float64)
        sigma2 = np.maximum(np.asarray(sigma2, dtype=np.float64), VARIANCE_FLOOR)
        pi = np.clip(np.asarray(pi, dtype=np.float64), PRIOR_CLIP, None)
        pi = pi / pi.sum()
        order = np.argsort(mu, kind="stable")
        return cls(mu[order], sigma2[order], pi[order])

    def to_record(self) -> Dict[str, float]:
        """Las 3 matrices que sube cada cliente, aplanadas en 6 números."""
        return {
            "mu_clean": float(self.mu[0]), "mu_noisy": float(self.mu[1]),
            "sigma2_clean": float(self.sigma2[0]), "sigma2_noisy": float(self.sigma2[1]),
            "pi_clean": float(self.pi[0]), "pi_noisy": float(self.pi[1]),
        }


@dataclass(frozen=True)
class ClientLossStats:
    mean: float
    stddev: float
    epsilon: float = ProtocolDefaults.SELECTOR_EPSILON

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("La desviación estándar no puede ser negativa")


@dataclass
class EMResult:
    """Resultado de un ajuste EM."""
    params: SelectorParams
    degenerate: bool
    iterations: int
    log_likelihoods: List[float] = field(default_factory=list)


@dataclass
class CleanNoisySplit:
    """Índices de las muestras limpias y ruidosas y las posteriores de limpieza."""
    clean: np.ndarray
    noisy: np.ndarray
    posteriors: np.ndarray


def gaussian_pdf(loss, mu: float, sigma2: float):
    """Densidad N(loss; mu, sigma2)."""
    return norm.pdf(loss, loc=mu, scale=np.sqrt(sigma2))


def _log_density(losses: np.ndarray, mu: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    return norm.logpdf(losses[:, None], loc=mu[None, :], scale=np.sqrt(sigma2)[None, :])


def _log_weighted(losses: np.ndarray, mu: np.ndarray, sigma2: np.ndarray, pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    return log_pi[None, :] + _log_density(losses, mu, sigma2)


def responsibilities(losses, sel: SelectorParams) -> np.ndarray:
    """
    Posteriores (n, 2) de cada componente; cada fila suma 1.

    Si ambas densidades se anulan en punto flotante la pérdida se asigna entera
    a la componente de media más cercana (empate: limpia).
    """
    losses = np.atleast_1d(np.asarray(losses, dtype=np.float64))
    log_density = _log_density(losses, sel.mu, sel.sigma2)
    with np.errstate(divide="ignore"):
        log_w = np.log(sel.pi)[None, :] + log_density
    clean = expit(log_w[:, 0] - log_w[:, 1])

    underflow = np.all(log_density < LOG_DENSITY_UNDERFLOW, axis=1)
    if np.any(underflow):
        nearer_clean = np.abs(losses - sel.mu[0]) <= np.abs(losses - sel.mu[1])
        clean = np.where(underflow, nearer_clean.astype(np.float64), clean)
    return np.column_stack([clean, 1.0 - clean])


def posterior_clean(loss, sel: SelectorParams):
    """
    Probabilidad posterior de la componente limpia.

    Se evalúa en espacio logarítmico; cuando las dos densidades son
    irrepresentables decide la media más cercana.
    """
    scalar = np.ndim(loss) == 0
    clean = responsibilities(loss, sel)[:, 0]
    return float(clean[0]) if scalar else clean


def initial_selector(losses: np.ndarray) -> SelectorParams:
    """
    Selector inicial partiendo las pérdidas por la mediana.

    Medias y varianzas de cada mitad, priors (0.5, 0.5).
    """
    losses = np.asarray(losses, dtype=np.float64)
    median = np.median(losses)
    low = losses[losses <= median]
    high = losses[losses > median]
    if high.size == 0:
        high = low
    return SelectorParams.ordered(
        mu=[low.mean(), high.mean()],
        sigma2=[low.var(), high.var()],
        pi=[0.5, 0.5],
    )


def em_variance_floor(losses: np.ndarray, reg_covar: float = ProtocolDefaults.EM_REG_COVAR) -> float:
    """
    Suelo de varianza de un ajuste: reg_covar en la escala min-max de las pérdidas.

    Equivale a ajustar sobre (l - min) / (max - min) con ese suelo y devolver
    los parámetros en unidades de pérdida.
    """
    losses = np.asarray(losses, dtype=np.float64)
    spread = float(losses.max() - losses.min())
    return max(VARIANCE_FLOOR, reg_covar * spread ** 2)


def fit_em(losses: np.ndarray, init: SelectorParams,
           max_iters: int = ProtocolDefaults.EM_MAX_ITERS,
           tol: float = ProtocolDefaults.EM_TOL,
           reg_covar: float = ProtocolDefaults.EM_REG_COVAR) -> EMResult:
    """
    Ajusta la mezcla de dos gaussianas por EM partiendo de `init`.

    Paso E: responsabilidades; paso M: medias y varianzas ponderadas por
    responsabilidad y priors como responsabilidad media. Las varianzas (también
    las de `init`) no bajan de `em_variance_floor`, así que cada paso M es el
    máximo exacto restringido y la log-verosimilitud no decrece.
    Se detiene cuando el mayor cambio absoluto de parámetros es < tol.

    Args:
        losses: Pérdidas por muestra (al menos 2)
        init: Parámetros iniciales (el GSS vigente o el selector inicial)
        max_iters: Máximo de iteraciones
        tol: Tolerancia sobre el cambio de parámetros
        reg_covar: Suelo relativo de varianza (0 deja solo el suelo absoluto)

    Returns:
        EMResult: Parámetros ordenados, bandera de degeneración y traza de log-verosimilitud
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.size < 2:
        raise ValueError("EM necesita al menos 2 pérdidas")
    if reg_covar < 0:
        raise ValueError(f"reg_covar no puede ser negativo: {reg_covar}")

    floor = em_variance_floor(x, reg_covar)
    mu, sigma2, pi = init.mu.copy(), np.maximum(init.sigma2, floor), init.pi.copy()
    trace: List[float] = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        log_w = _log_weighted(x, mu, sigma2, pi)
        log_norm = logsumexp(log_w, axis=1, keepdims=True)
        trace.append(float(log_norm.sum()))
        resp = np.exp(log_w - log_norm)

        nk = resp.sum(axis=0)
        safe_nk = np.maximum(nk, np.finfo(float).tiny)
        new_mu = (resp * x[:, None]).sum(axis=0) / safe_nk
        new_sigma2 = np.maximum((resp * (x[:, None] - new_mu) ** 2).sum(axis=0) / safe_nk, floor)
        new_pi = nk / x.size

        change = max(np.abs(new_mu - mu).max(), np.abs(new_sigma2 - sigma2).max(), np.abs(new_pi - pi).max())
        mu, sigma2, pi = new_mu, new_sigma2, new_pi
        if change < tol:
            break

    trace.append(float(logsumexp(_log_weighted(x, mu, sigma2, pi), axis=1).sum()))
    degenerate = bool(pi.min() < ProtocolDefaults.DEGENERATE_PRIOR or abs(mu[0] - mu[1]) < tol)
    params = SelectorParams.ordered(mu, sigma2, pi)
    if degenerate:
        logger.debug(f"   EM degenerado tras {iterations} iteraciones: {params.to_record()}")
    return EMResult(params=params, degenerate=degenerate, iterations=iterations, log_likelihoods=trace)


def client_loss_stats(losses: np.ndarray) -> ClientLossStats:
    losses = np.asarray(losses, dtype=np.float64)
    return ClientLossStats(mean=float(losses.mean()), stddev=float(losses.std()))


def selector_coefficient(stats: ClientLossStats) -> float:
    """τ = min(0.5·(1 + σ/(μ + ε)), 0.8): más estricto cuanto más dispersas las pérdidas."""
    raw = ProtocolDefaults.SELECTOR_TAU_BASE * (1.0 + stats.stddev / (stats.mean + stats.epsilon))
    return min(raw, ProtocolDefaults.SELECTOR_TAU_CAP)


def split_clean_noisy(losses: np.ndarray, gss: Optional[SelectorParams], tau: float) -> CleanNoisySplit:
    """
    Separa las muestras: limpia si la posterior limpia es >= τ, ruidosa en otro caso.

    Sin selector (ajuste degenerado o ronda inicial) todas las muestras son limpias.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if gss is None:
        posteriors = np.ones_like(losses)
    else:
        posteriors = posterior_clean(losses, gss)
    clean_mask = posteriors >= tau
    return CleanNoisySplit(
        clean=np.flatnonzero(clean_mask),
        noisy=np.flatnonzero(~clean_mask),
        posteriors=posteriors,
    )


def aggregate_selectors(sels: Sequence[Tuple[SelectorParams, float]]) -> SelectorParams:
    """
    Promedio ponderado (n_k / Σ n_k) de medias, varianzas y priors de los CSS.

    Raises:
        ValueError: Si no hay selectores que agregar
    """
    if not sels:
        raise ValueError("No hay selectores que agregar")
    weights = np.array([float(n) for _, n in sels])
    if np.any(weights <= 0):
        raise ValueError("Los pesos de agregación deben ser positivos")
    weights = weights / weights.sum()
    mu = sum(w * s.mu for w, (s, _) in zip(weights, sels))
    sigma2 = sum(w * s.sigma2 for w, (s, _) in zip(weights, sels))
    pi = sum(w * s.pi for w, (s, _) in zip(weights, sels))
    return SelectorParams.ordered(mu, sigma2, pi)
