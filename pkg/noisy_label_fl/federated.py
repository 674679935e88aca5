"""
Simulador federado: bucle de rondas servidor/clientes con selección de muestras,
pseudo-etiquetado adaptativo y pérdida credal, más la línea base FedAvg.

En cada ronda todos los clientes reciben el mismo modelo global θ y el mismo
selector global S, ejecutan su actualización local y el servidor agrega los
modelos (FedAvg) y los selectores (promedio ponderado) en orden de cliente.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import FedConfig, LossKind
from .credal import beta_at
from .metrics import MetricsRecord, macro_metrics, pseudo_accuracy, selection_quality
from .model import (LossContext, ModelParams, TrainingError, fedavg_combine, init_params, lr_at,
                    per_sample_ce_loss, predict_proba, squared_distance, train_local)
from .pseudo_labeler import (DatasetSplit, adaptive_thresholds, build_train_set, class_confidences,
                             fixed_thresholds, generate_pseudo, noise_level)
from .selector import (CleanNoisySplit, SelectorParams, aggregate_selectors, client_loss_stats,
                       fit_em, initial_selector, selector_coefficient, split_clean_noisy)
from .synthdata import ClientDataset
from .utils import STREAM_BATCHES, STREAM_INIT, make_rng

logger = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "round", "method", "macro_f1", "macro_recall", "macro_precision", "stability",
    "mean_delta", "mean_tau", "selection_auroc", "pseudo_acc",
]

CLIENT_COLUMNS = [
    "round", "client", "n_samples", "n_train", "delta", "tau", "n_clean", "n_noisy", "n_pseudo",
    "pseudo_acc", "pseudo_branch", "degenerate", "selection_auroc",
    "mu_clean", "mu_noisy", "sigma2_clean", "sigma2_noisy", "pi_clean", "pi_noisy",
]


@dataclass
class ClientRoundRecord:
    """Registro de un cliente en una ronda; los campos de selección son None sin selector."""
    round: int
    client: int
    n_samples: int
    n_train: int
    delta: Optional[float] = None
    tau: Optional[float] = None
    n_clean: Optional[int] = None
    n_noisy: Optional[int] = None
    n_pseudo: Optional[int] = None
    pseudo_acc: Optional[float] = None
    pseudo_branch: Optional[bool] = None
    degenerate: Optional[bool] = None
    selection_auroc: Optional[float] = None
    selector: Optional[Dict[str, float]] = None

    def to_row(self) -> Dict[str, Any]:
        row = {k: getattr(self, k) for k in CLIENT_COLUMNS if hasattr(self, k)}
        selector = self.selector or {}
        for key in ("mu_clean", "mu_noisy", "sigma2_clean", "sigma2_noisy", "pi_clean", "pi_noisy"):
            row[key] = selector.get(key)
        for key in ("pseudo_branch", "degenerate"):
            if row[key] is not None:
                row[key] = int(row[key])
        return row


@dataclass
class LocalResult:
    """Salida de `local_update` para un cliente."""
    params: ModelParams
    selector: Optional[SelectorParams]
    degenerate: bool
    record: ClientRoundRecord
    split: Optional[CleanNoisySplit] = None
    train_split: Optional[DatasetSplit] = None
    selected: bool = False


@dataclass
class RoundLog:
    round: int
    method: str
    macro_f1: float
    macro_recall: float
    macro_precision: float
    stability: float
    mean_delta: Optional[float]
    mean_tau: Optional[float]
    selection_auroc: Optional[float]
    pseudo_acc: Optional[float]

    def to_row(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in ROUND_COLUMNS}


@dataclass
class RoundState:
    """Estado del servidor al inicio de una ronda."""
    round: int
    params: ModelParams
    gss: Optional[SelectorParams] = None
    client_selectors: List[Optional[SelectorParams]] = field(default_factory=list)


@dataclass
class RunResult:
    rounds: List[RoundLog]
    clients: List[ClientRoundRecord]
    params: ModelParams
    gss: Optional[SelectorParams]
    metrics: MetricsRecord


RoundCallback = Callable[[RoundLog, List[ClientRoundRecord]], None]


def stability_metric(local_params: Sequence[ModelParams], global_params: ModelParams) -> float:
    """(1/K) Σ_k ‖θ_k - θ‖² respecto al modelo global difundido en la ronda."""
    if not local_params:
        raise ValueError("Se requiere al menos un modelo local")
    return float(np.mean([squared_distance(p, global_params) for p in local_params]))


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


class FederatedSimulator:
    """
    Orquestador de la simulación federada.

    Los clientes son actores en proceso; la agregación es la única barrera de
    sincronización y recorre los clientes en orden de índice, de modo que el
    resultado no depende del orden de ejecución.
    """

    def __init__(self, config: FedConfig, clients: Sequence[ClientDataset], test: ClientDataset,
                 num_classes: int, flip_masks: Optional[Sequence[np.ndarray]] = None):
        """
        Args:
            config: Configuración del protocolo
            clients: Un dataset por cliente (etiquetas observadas ya corrompidas)
            test: Conjunto de prueba limpio para las métricas por ronda
            num_classes: C
            flip_masks: Máscaras de volteo ocultas, solo para evaluar la selección
        """
        if len(clients) != config.num_clients:
            raise ValueError(f"Se esperaban {config.num_clients} clientes, hay {len(clients)}")
        if flip_masks is not None and len(flip_masks) != len(clients):
            raise ValueError("Debe haber una máscara de volteo por cliente")
        self.config = config
        self.clients = list(clients)
        self.test = test
        self.num_classes = num_classes
        self.flip_masks = list(flip_masks) if flip_masks is not None else None
        self.flags = config.flags
        logger.info(
            f"🚀 Simulador inicializado: {config.method.value}, K={config.num_clients}, T={config.rounds}"
        )

    def initial_state(self) -> RoundState:
        train = self.config.train
        params = init_params(
            self.clients[0].feature_dim, self.num_classes, train.hidden_units,
            rng=make_rng(self.config.seed, STREAM_INIT), scale=train.init_scale,
        )
        return RoundState(round=0, params=params, client_selectors=[None] * len(self.clients))

    def _thresholds(self, clean_probs: np.ndarray):
        if not self.flags.adaptive_threshold:
            return fixed_thresholds(self.num_classes, self.config.fixed_threshold)
        avg = class_confidences(clean_probs, self.num_classes, self.config.per_class_confidence)
        return adaptive_thresholds(avg, self.config.zeta0, self.config.zeta_floor_ratio, self.num_classes)

    def local_update(self, t: int, k: int, theta: ModelParams,
                     selector: Optional[SelectorParams]) -> LocalResult:
        """
        Actualización local del cliente k en la ronda t.

        Con selector: pérdidas bajo θ, τ, reparto limpio/ruidoso con S, δ,
        pseudo-etiquetado si δ >= umbral, E épocas sobre D̂ y reajuste del
        selector local por EM desde S. En la ronda 0 se entrena CE sobre D_k y
        el selector local parte de la división por la mediana.
        """
        cfg = self.config
        ds = self.clients[k]
        rng = make_rng(cfg.seed, STREAM_BATCHES, t, k)
        lr = lr_at(cfg.train, t, cfg.rounds)
        record = ClientRoundRecord(round=t, client=ds.client_id, n_samples=len(ds), n_train=len(ds))

        if not self.flags.use_selector:
            params = train_local(theta, ds.features, ds.observed_labels, cfg.train, lr,
                                 LossKind.CE, ids=ds.ids, rng=rng)
            return LocalResult(params=params, selector=None, degenerate=False, record=record)

        split: Optional[CleanNoisySplit] = None
        train_split: Optional[DatasetSplit] = None
        features, labels, ids = ds.features, ds.observed_labels, ds.ids
        loss_kind = LossKind.CE if t == 0 else self.flags.loss_kind

        if t > 0:
            losses = per_sample_ce_loss(theta, ds.features, ds.observed_labels)
            tau = selector_coefficient(client_loss_stats(losses))
            split = split_clean_noisy(losses, selector, tau)
            delta = noise_level(split)

            pseudo = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
            if delta >= cfg.noise_level_gate:
                probs = predict_proba(theta, ds.features)
                thresholds = self._thresholds(probs[split.clean])
                pseudo = generate_pseudo(probs[split.noisy], thresholds)
            train_split = build_train_set(ds.observed_labels, split, pseudo, cfg.noise_level_gate)

            features = ds.features[train_split.train]
            labels = train_split.train_labels
            ids = ds.ids[train_split.train]
            record.delta = delta
            record.tau = tau
            record.n_clean = len(split.clean)
            record.n_noisy = len(split.noisy)
            record.n_pseudo = len(train_split.pseudo)
            record.n_train = len(train_split.train)
            record.pseudo_branch = train_split.pseudo_branch
            record.pseudo_acc = pseudo_accuracy(train_split.pseudo_labels, ds.true_labels[train_split.pseudo])
            if selector is not None and self.flip_masks is not None:
                record.selection_auroc = selection_quality(split.posteriors, self.flip_masks[k])

        loss_ctx = LossContext(beta=beta_at(cfg.credal, t), alpha=cfg.credal.alpha)
        params = train_local(theta, features, labels, cfg.train, lr, loss_kind, loss_ctx, ids=ids, rng=rng)

        refit_losses = per_sample_ce_loss(params, ds.features, ds.observed_labels)
        init = selector if selector is not None else initial_selector(refit_losses)
        em = fit_em(refit_losses, init, cfg.em_max_iters, cfg.em_tol, cfg.em_reg_covar)
        record.degenerate = em.degenerate
        record.selector = em.params.to_record()
        logger.debug(
            f"   Cliente {ds.client_id}: δ={record.delta}, τ={record.tau}, "
            f"|D̂|={record.n_train}, EM {em.iterations} iteraciones"
        )
        return LocalResult(params=params, selector=em.params, degenerate=em.degenerate,
                           record=record, split=split, train_split=train_split,
                           selected=split is not None and selector is not None)

    def _guarded_update(self, t: int, k: int, theta: ModelParams,
                        selector: Optional[SelectorParams]) -> LocalResult:
        client_id = self.clients[k].client_id
        try:
            result = self.local_update(t, k, theta, selector)
        except TrainingError as e:
            raise TrainingError(f"Ronda {t}, cliente {client_id}: {e}", sample_id=e.sample_id,
                                round_index=t, client=client_id) from e
        if not result.params.is_finite():
            raise TrainingError(f"Ronda {t}, cliente {client_id}: parámetros no finitos",
                                round_index=t, client=client_id)
        return result

    def _broadcast_selector(self, state: RoundState, k: int) -> Optional[SelectorParams]:
        if not self.flags.use_selector:
            return None
        if self.flags.use_gss:
            return state.gss
        return state.client_selectors[k]

    def _run_clients(self, state: RoundState) -> List[LocalResult]:
        indices = range(len(self.clients))
        if self.config.parallel_clients and len(self.clients) > 1:
            workers = min(len(self.clients), os.cpu_count() or 1)
            with ThreadPoolExecutor(max_workers=workers) as executor:
                return list(executor.map(
                    lambda k: self._guarded_update(state.round, k, state.params, self._broadcast_selector(state, k)),
                    indices,
                ))
        return [self._guarded_update(state.round, k, state.params, self._broadcast_selector(state, k))
                for k in indices]

    def _aggregate_models(self, state: RoundState, results: List[LocalResult]) -> ModelParams:
        if self.config.weight_by_train_size:
            weighted = [(r.params, r.record.n_train) for r in results if r.record.n_train > 0]
            if not weighted:
                return state.params
            return fedavg_combine(weighted)
        return fedavg_combine([(r.params, len(ds)) for r, ds in zip(results, self.clients)])

    def _aggregate_selectors(self, state: RoundState, results: List[LocalResult]) -> RoundState:
        """
        Selectores para la ronda siguiente.

        Un ajuste degenerado se sustituye por el selector previo que recibió el
        cliente; sin selector previo el cliente queda fuera de la agregación.
        """
        uploads: List[Optional[SelectorParams]] = []
        for k, result in enumerate(results):
            if result.selector is None:
                uploads.append(None)
            elif result.degenerate:
                prior = self._broadcast_selector(state, k)
                logger.warning(
                    f"⚠️ Ronda {state.round}, cliente {self.clients[k].client_id}: EM degenerado, "
                    f"{'se usa el selector previo' if prior is not None else 'queda fuera de la agregación'}"
                )
                uploads.append(prior)
            else:
                uploads.append(result.selector)

        if not self.flags.use_selector:
            return RoundState(state.round + 1, state.params, None, state.client_selectors)
        if not self.flags.use_gss:
            return RoundState(state.round + 1, state.params, None, uploads)

        weighted = [(sel, len(ds)) for sel, ds in zip(uploads, self.clients) if sel is not None]
        gss = aggregate_selectors(weighted) if weighted else state.gss
        return RoundState(state.round + 1, state.params, gss, state.client_selectors)

    def evaluate(self, params: ModelParams) -> MetricsRecord:
        predictions = predict_proba(params, self.test.features).argmax(axis=1)
        return macro_metrics(predictions, self.test.true_labels, self.num_classes)

    def _pooled_auroc(self, results: List[LocalResult]) -> Optional[float]:
        if self.flip_masks is None:
            return None
        pairs = [(r.split.posteriors, m) for r, m in zip(results, self.flip_masks)
                 if r.selected]
        if not pairs:
            return None
        return selection_quality(np.concatenate([p for p, _ in pairs]), np.concatenate([m for _, m in pairs]))

    def _pooled_pseudo_accuracy(self, results: List[LocalResult]) -> Optional[float]:
        labels, truths = [], []
        for r, ds in zip(results, self.clients):
            if r.train_split is not None and len(r.train_split.pseudo):
                labels.append(r.train_split.pseudo_labels)
                truths.append(ds.true_labels[r.train_split.pseudo])
        if not labels:
            return None
        return pseudo_accuracy(np.concatenate(labels), np.concatenate(truths))

    def run_round(self, state: RoundState) -> Tuple[RoundState, RoundLog, List[ClientRoundRecord], MetricsRecord]:
        """
        Ejecuta una ronda completa.

        Returns:
            tuple: (estado de la ronda siguiente, RoundLog, registros por cliente, métricas)
        """
        results = self._run_clients(state)
        new_params = self._aggregate_models(state, results)
        next_state = self._aggregate_selectors(state, results)
        next_state.params = new_params

        metrics = self.evaluate(new_params)
        metrics.selection_auroc = self._pooled_auroc(results)
        metrics.pseudo_accuracy = self._pooled_pseudo_accuracy(results)
        records = [r.record for r in results]
        log = RoundLog(
            round=state.round,
            method=self.config.method.value,
            macro_f1=metrics.macro_f1,
            macro_recall=metrics.macro_recall,
            macro_precision=metrics.macro_precision,
            stability=stability_metric([r.params for r in results], state.params),
            mean_delta=_mean_or_none([r.delta for r in records]),
            mean_tau=_mean_or_none([r.tau for r in records]),
            selection_auroc=metrics.selection_auroc,
            pseudo_acc=metrics.pseudo_accuracy,
        )
        return next_state, log, records, metrics

    def run(self, on_round: Optional[RoundCallback] = None) -> RunResult:
        """
        Ejecuta las T rondas.

        Args:
            on_round: Se invoca tras cada ronda (p.ej. para escribir los CSV de forma incremental)

        Returns:
            RunResult: Registros por ronda y cliente, modelo y selector finales, métricas finales

        Raises:
            TrainingError: Si algún cliente produce parámetros no finitos
        """
        state = self.initial_state()
        logs: List[RoundLog] = []
        client_records: List[ClientRoundRecord] = []
        metrics: Optional[MetricsRecord] = None

        for t in range(self.config.rounds):
            state, log, records, metrics = self.run_round(state)
            logs.append(log)
            client_records.extend(records)
            if on_round is not None:
                on_round(log, records)
            logger.info(
                f"🔄 Ronda {t + 1}/{self.config.rounds}: macro-F1={log.macro_f1:.4f}, "
                f"estabilidad={log.stability:.4g}"
                + (f", δ medio={log.mean_delta:.3f}" if log.mean_delta is not None else "")
            )

        assert metrics is not None
        logger.info(f"✅ Simulación completada: macro-F1 final={metrics.macro_f1:.4f}")
        return RunResult(rounds=logs, clients=client_records, params=state.params,
                         gss=state.gss, metrics=metrics)


def simulate(config: FedConfig, clients: Sequence[ClientDataset], test: ClientDataset,
             num_classes: int, flip_masks: Optional[Sequence[np.ndarray]] = None,
             on_round: Optional[RoundCallback] = None) -> RunResult:
    """Atajo: construye el simulador y ejecuta todas las rondas."""
    return FederatedSimulator(config, clients, test, num_classes, flip_masks).run(on_round)

