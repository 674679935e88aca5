"""
Clasificador diferenciable pequeño con gradientes analíticos.

Softmax lineal por defecto; con `hidden_units` se convierte en un MLP con
activación tanh. Incluye pérdida por muestra, paso de SGD para las pérdidas
CE / RCL / UCL, el calendario de learning rate por rondas, el promedio FedAvg
y la serialización de parámetros.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from .config import LossKind, ProtocolDefaults, TrainConfig
from .credal import loss_and_logit_grad

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Dimensiones o arquitecturas incompatibles."""


class TrainingError(RuntimeError):
    """Gradiente o parámetros no finitos durante el entrenamiento."""

    def __init__(self, message: str, sample_id: Optional[int] = None,
                 round_index: Optional[int] = None, client: Optional[int] = None):
        self.sample_id = sample_id
        self.round_index = round_index
        self.client = client
        super().__init__(message)


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: Tuple[int, ...]
    num_classes: int

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.num_classes)


@dataclass(frozen=True)
class ModelParams:
    """
    Matrices de pesos y vectores de sesgo de cada capa.

    Valor inmutable: las operaciones devuelven nuevas instancias.
    """
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("Se requiere el mismo número (>= 1) de matrices de pesos y sesgos")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"Capa {i}: pesos {w.shape} y sesgos {b.shape} incompatibles")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"Capa {i}: entrada {w.shape[0]} no coincide con la salida anterior")

    @property
    def architecture(self) -> Architecture:
        return Architecture(
            input_dim=self.weights[0].shape[0],
            hidden=tuple(w.shape[1] for w in self.weights[:-1]),
            num_classes=self.weights[-1].shape[1],
        )

    def tensors(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def combine(self, other: "ModelParams", a: float, b: float) -> "ModelParams":
        """Combinación lineal elemento a elemento a·self + b·other."""
        check_same_architecture(self, other)
        return ModelParams(
            tuple(a * x + b * y for x, y in zip(self.weights, other.weights)),
            tuple(a * x + b * y for x, y in zip(self.biases, other.biases)),
        )


def check_same_architecture(a: ModelParams, b: ModelParams) -> None:
    if a.architecture != b.architecture:
        raise ShapeError(f"Arquitecturas distintas: {a.architecture} vs {b.architecture}")


def init_params(input_dim: int, num_classes: int, hidden: Sequence[int] = (),
                rng: Optional[np.random.Generator] = None, scale: float = 0.01) -> ModelParams:
    """
    Inicializa pesos gaussianos de escala `scale` y sesgos nulos.

    Con `scale = 0` todas las entradas son cero (predictor uniforme).
    """
    rng = rng or np.random.default_rng(0)
    sizes = (input_dim, *hidden, num_classes)
    weights = tuple(scale * rng.standard_normal((sizes[i], sizes[i + 1])) for i in range(len(sizes) - 1))
    biases = tuple(np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1))
    return ModelParams(weights, biases)


def _check_input(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    expected = params.architecture.input_dim
    if features.ndim != 2 or features.shape[1] != expected:
        raise ShapeError(f"Se esperaban atributos de dimensión {expected}, no {features.shape}")
    return features


def forward(params: ModelParams, features: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Propagación hacia adelante.

    Returns:
        tuple: (logits (n, C), activaciones de entrada de cada capa)
    """
    h = _check_input(params, features)
    activations = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == last:
            return z, activations
        h = np.tanh(z)
        activations.append(h)
    raise AssertionError("inalcanzable")


def predict_proba(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Probabilidades softmax sobre C clases; devuelve 1-D si la entrada es un único vector."""
    single = np.asarray(features).ndim == 1
    logits, _ = forward(params, features)
    probs = softmax(logits, axis=1)
    return probs[0] if single else probs


def per_sample_ce_loss(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Entropía cruzada por muestra, -ln p̂(y|x), con la probabilidad acotada en 1e-12."""
    probs = predict_proba(params, _check_input(params, features))
    labels = np.asarray(labels, dtype=np.int64)
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], ProtocolDefaults.PROB_FLOOR))


def backward(params: ModelParams, activations: List[np.ndarray], grad_logits: np.ndarray) -> ModelParams:
    """Retropropaga el gradiente de los logits hasta todos los parámetros."""
    n_layers = len(params.weights)
    grad_w: List[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: List[np.ndarray] = [np.empty(0)] * n_layers
    delta = grad_logits
    for layer in reversed(range(n_layers)):
        a_in = activations[layer]
        grad_w[layer] = a_in.T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (1.0 - a_in ** 2)
    return ModelParams(tuple(grad_w), tuple(grad_b))


@dataclass(frozen=True)
class LossContext:
    """Parámetros de la pérdida para un paso: beta vigente y alpha."""
    beta: float = 1.0
    alpha: float = 0.0


def batch_loss_and_grad(params: ModelParams, features: np.ndarray, labels: np.ndarray,
                        loss_kind: LossKind, loss_ctx: LossContext,
                        ids: Optional[np.ndarray] = None) -> Tuple[float, ModelParams]:
    """
    Pérdida media del lote y su gradiente respecto a los parámetros.

    Raises:
        TrainingError: Si el gradiente de alguna muestra no es finito
    """
    logits, activations = forward(params, features)
    probs = softmax(logits, axis=1)
    losses, grad_logits = loss_and_logit_grad(probs, labels, loss_kind, loss_ctx.beta, loss_ctx.alpha)

    bad = ~np.all(np.isfinite(grad_logits), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        sample_id = int(ids[row]) if ids is not None else row
        raise TrainingError(f"Gradiente no finito en la muestra {sample_id}", sample_id=sample_id)

    n = len(losses)
    grads = backward(params, activations, grad_logits / n)
    if not grads.is_finite():
        sample_id = int(ids[0]) if ids is not None else 0
        raise TrainingError(f"Gradiente no finito en el lote que empieza en la muestra {sample_id}",
                            sample_id=sample_id)
    return float(losses.mean()), grads


def sgd_step(params: ModelParams, features: np.ndarray, labels: np.ndarray,
             loss_kind: LossKind, loss_ctx: LossContext, lr: float,
             weight_decay: float = 0.0, ids: Optional[np.ndarray] = None) -> ModelParams:
    """
    Un paso de SGD: θ ← θ - lr·(∇ pérdida media del lote + weight_decay·θ).

    Las posibilidades de RCL/UCL se reconstruyen con las predicciones actuales del lote.
    """
    if lr < 0:
        raise ValueError(f"El learning rate no puede ser negativo: {lr}")
    _, grads = batch_loss_and_grad(params, features, labels, loss_kind, loss_ctx, ids)
    return params.combine(grads.combine(params, 1.0, weight_decay), 1.0, -lr)


def lr_at(train: TrainConfig, t: int, total_rounds: int) -> float:
    """Learning rate de la ronda `t`: se divide por `lr_drop_factor` al alcanzar cada ⌈p·T⌉."""
    drops = sum(1 for p in train.lr_drop_points if t >= math.ceil(p * total_rounds - 1e-9))
    return train.base_learning_rate / (train.lr_drop_factor ** drops)


def train_local(params: ModelParams, features: np.ndarray, labels: np.ndarray,
                train: TrainConfig, lr: float, loss_kind: LossKind = LossKind.CE,
                loss_ctx: LossContext = LossContext(), ids: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None) -> ModelParams:
    """
    E épocas de SGD por mini-lotes sobre un conjunto local.

    Args:
        params: Parámetros iniciales (el modelo global descargado)
        features: Atributos del conjunto de entrenamiento
        labels: Etiquetas de entrenamiento (observadas o pseudo-etiquetas)
        train: Configuración de entrenamiento
        lr: Learning rate de la ronda
        loss_kind: Pérdida a minimizar
        loss_ctx: beta y alpha de la ronda (RCL/UCL)
        ids: Identificadores de muestra para diagnósticos
        rng: Flujo aleatorio de los lotes; por defecto uno derivado de `train.seed`

    Returns:
        ModelParams: Parámetros locales actualizados
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(labels)) if ids is None else np.asarray(ids)
    rng = rng or np.random.default_rng(train.seed)
    n = len(labels)
    if n == 0:
        return params

    for _ in range(train.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, train.batch_size):
            batch = order[start:start + train.batch_size]
            params = sgd_step(params, features[batch], labels[batch], loss_kind, loss_ctx,
                              lr, train.weight_decay, ids[batch])
    return params


def fedavg_combine(models: Sequence[Tuple[ModelParams, float]]) -> ModelParams:
    """
    Promedio ponderado elemento a elemento con pesos n_k / Σ n_k.

    Raises:
        ValueError: Si la lista está vacía o algún peso no es positivo
        ShapeError: Si las arquitecturas difieren
    """
    if not models:
        raise ValueError("No hay modelos para combinar")
    reference = models[0][0]
    for params, weight in models:
        check_same_architecture(reference, params)
        if not weight > 0:
            raise ValueError(f"Los pesos de agregación deben ser positivos, no {weight}")

    weights = np.array([float(w) for _, w in models])
    weights = weights / weights.sum()

    def average(tensors: Sequence[np.ndarray]) -> np.ndarray:
        return np.tensordot(weights, np.stack(tensors), axes=1)

    n_layers = len(reference.weights)
    return ModelParams(
        tuple(average([m.weights[i] for m, _ in models]) for i in range(n_layers)),
        tuple(average([m.biases[i] for m, _ in models]) for i in range(n_layers)),
    )


def squared_distance(a: ModelParams, b: ModelParams) -> float:
    """Norma euclídea al cuadrado de a - b sobre todos los parámetros."""
    check_same_architecture(a, b)
    return float(sum(np.sum((x - y) ** 2) for x, y in zip(a.tensors(), b.tensors())))


def save_params(params: ModelParams, output_path: Union[str, Path]) -> bool:
    """
    Vuelca los tensores a CSV `tensor,row,col,value` precedido de una cabecera de arquitectura.

    Returns:
        bool: True si se guardó correctamente
    """
    try:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        arch = params.architecture
        hidden = ";".join(str(h) for h in arch.hidden)
        rows = []
        for name, tensor in _named_tensors(params):
            matrix = np.atleast_2d(tensor)
            for r in range(matrix.shape[0]):
                for c in range(matrix.shape[1]):
                    rows.append((name, r, c, float(matrix[r, c])))
        df = pd.DataFrame(rows, columns=["tensor", "row", "col", "value"])
        with open(output_path, "w", encoding="utf-8") as f:
            f.write(f"# input_dim={arch.input_dim},hidden={hidden},num_classes={arch.num_classes}\n")
            df.to_csv(f, index=False, lineterminator="\n")
        logger.info(f"✅ Parámetros guardados: {output_path}")
        return True
    except Exception as e:
        logger.error(f"❌ Error guardando parámetros en {output_path}: {e}")
        return False


def _named_tensors(params: ModelParams):
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        yield f"W{i}", w
        yield f"b{i}", b


def load_params(file_path: Union[str, Path]) -> Optional[ModelParams]:
    """Recarga parámetros guardados con `save_params`; None si el archivo es inválido."""
    try:
        file_path = Path(file_path)
        with open(file_path, "r", encoding="utf-8") as f:
            header = f.readline().lstrip("#").strip()
        fields = dict(item.split("=", 1) for item in header.split(","))
        hidden = tuple(int(h) for h in fields["hidden"].split(";") if h)
        arch = Architecture(int(fields["input_dim"]), hidden, int(fields["num_classes"]))

        df = pd.read_csv(file_path, skiprows=1, float_precision="round_trip")
        sizes = arch.layer_sizes
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            w = np.zeros((sizes[i], sizes[i + 1]))
            b = np.zeros((1, sizes[i + 1]))
            for name, target in ((f"W{i}", w), (f"b{i}", b)):
                part = df[df["tensor"] == name]
                target[part["row"].to_numpy(), part["col"].to_numpy()] = part["value"].to_numpy()
            weights.append(w)
            biases.append(b[0])
        return ModelParams(tuple(weights), tuple(biases))
    except Exception as e:
        logger.error(f"❌ Error cargando parámetros desde {file_path}: {e}")
        return None
