"""
Configuración del simulador de aprendizaje federado con etiquetas ruidosas.

Define los registros de configuración (datos sintéticos, ruido, entrenamiento,
pérdida credal, protocolo federado y manifiesto de ejecución) y la carga de
manifiestos JSON con validación por campo.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Marcador de "elección aleatoria" en los mapas de confusión CK-Asymm
RANDOM_CHOICE = "random"


class ConfigError(ValueError):
    """Error de validación que nombra el campo inválido (ruta con puntos)."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}")

    def prefixed(self, prefix: str) -> "ConfigError":
        """Devuelve el mismo error con la ruta anidada bajo `prefix`."""
        if not prefix:
            return self
        joined = f"{prefix}{self.field}" if self.field.startswith("[") else f"{prefix}.{self.field}"
        return ConfigError(joined, self.message)


class ProtocolDefaults:
    """
    Constantes centralizadas del protocolo.

    Valores por defecto de los hiperparámetros del selector, el pseudo-etiquetado
    y la pérdida credal.
    """

    # Selector de muestras
    SELECTOR_EPSILON = 1e-6
    SELECTOR_TAU_CAP = 0.8
    SELECTOR_TAU_BASE = 0.5
    VARIANCE_FLOOR = 1e-8
    EM_MAX_ITERS = 100
    EM_TOL = 1e-6
    EM_REG_COVAR = 5e-4
    DEGENERATE_PRIOR = 0.01

    # Utilización dinámica de datos
    NOISE_LEVEL_GATE = 0.1
    ZETA0 = 0.8
    ZETA_FLOOR_RATIO = 0.5
    FIXED_THRESHOLD = 0.7

    # Pérdida credal
    ALPHA = 0.05
    BETA_START = 0.75
    BETA_END = 0.55

    # Entrenamiento local
    LOCAL_EPOCHS = 5
    BATCH_SIZE = 128
    LEARNING_RATE = 1e-2
    LR_DROP_POINTS = (0.7, 0.9)
    LR_DROP_FACTOR = 10.0
    WEIGHT_DECAY = 1e-6

    # Suelo de probabilidad dentro de logaritmos
    PROB_FLOOR = 1e-12

    @classmethod
    def validate_config(cls) -> bool:
        """Valida la coherencia de las constantes."""
        if not 0 < cls.SELECTOR_TAU_BASE <= cls.SELECTOR_TAU_CAP <= 1:
            raise ValueError("El coeficiente del selector debe cumplir 0 < base <= tope <= 1")
        if not 0 <= cls.BETA_END <= cls.BETA_START <= 1:
            raise ValueError("El calendario de beta debe cumplir 0 <= beta_end <= beta_start <= 1")
        if not 0 <= cls.ALPHA < 1:
            raise ValueError("alpha debe estar en [0, 1)")
        if not 0 < cls.ZETA0 <= 1:
            raise ValueError("zeta0 debe estar en (0, 1]")
        if not all(0 < p <= 1 for p in cls.LR_DROP_POINTS):
            raise ValueError("Los puntos de caída del learning rate deben estar en (0, 1]")
        return True


class NoiseKind(str, Enum):
    SYMMETRIC = "Symmetric"
    PAIRFLIP = "Pairflip"
    CK_ASYMM = "CkAsymm"


class BetaSchedule(str, Enum):
    COSINE = "Cosine"
    LINEAR = "Linear"
    CONSTANT = "Constant"


class LossKind(str, Enum):
    CE = "CE"
    RCL = "RCL"
    UCL = "UCL"


class Method(str, Enum):
    FEDGSCA = "FedGSCA"
    FEDAVG = "FedAvgBaseline"
    NO_GSS = "FedGSCA-noGSS"
    NO_RCL = "FedGSCA-noRCL"
    FIXED_THRESHOLD = "FedGSCA-fixed-threshold"
    UCL = "FedGSCA-UCL"


@dataclass(frozen=True)
class MethodFlags:
    """Combinación de mecanismos activos para un método."""
    use_selector: bool
    use_gss: bool
    loss_kind: LossKind
    adaptive_threshold: bool


# Las variantes de ablación son acumulativas: sin RCL; sin RCL ni ATP;
# sin RCL, ATP ni GSS (solo CSS).
METHOD_FLAGS: Dict[Method, MethodFlags] = {
    Method.FEDGSCA: MethodFlags(True, True, LossKind.RCL, True),
    Method.FEDAVG: MethodFlags(False, False, LossKind.CE, False),
    Method.NO_RCL: MethodFlags(True, True, LossKind.CE, True),
    Method.FIXED_THRESHOLD: MethodFlags(True, True, LossKind.CE, False),
    Method.NO_GSS: MethodFlags(True, False, LossKind.CE, False),
    Method.UCL: MethodFlags(True, True, LossKind.UCL, True),
}


def _coerce_enum(enum_cls, value, name: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        valid = ", ".join(member.value for member in enum_cls)
        raise ConfigError(name, f"valor '{value}' inválido (opciones: {valid})")


@dataclass
class DataSpec:
    """Especificación del generador de datos sintéticos por bloques gaussianos."""
    num_classes: int
    feature_dim: int
    samples_per_client: Tuple[int, ...]
    class_proportions: Tuple[float, ...]
    cluster_separation: float = 6.0
    seed: int = 0
    test_samples: int = 1000

    def __post_init__(self):
        self.samples_per_client = tuple(int(n) for n in self.samples_per_client)
        self.class_proportions = tuple(float(p) for p in self.class_proportions)

        if self.num_classes < 2:
            raise ConfigError("num_classes", f"se requieren al menos 2 clases, no {self.num_classes}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim", f"la dimensión debe ser >= 1, no {self.feature_dim}")
        if not self.samples_per_client:
            raise ConfigError("samples_per_client", "debe haber al menos un cliente")
        for i, n in enumerate(self.samples_per_client):
            if n < 1:
                raise ConfigError(f"samples_per_client[{i}]", f"cada cliente necesita >= 1 muestra, no {n}")
        if len(self.class_proportions) != self.num_classes:
            raise ConfigError(
                "class_proportions",
                f"se esperaban {self.num_classes} proporciones, hay {len(self.class_proportions)}",
            )
        if any(p < 0 for p in self.class_proportions):
            raise ConfigError("class_proportions", "las proporciones deben ser no negativas")
        if abs(sum(self.class_proportions) - 1.0) > 1e-9:
            raise ConfigError(
                "class_proportions", f"las proporciones deben sumar 1 (suman {sum(self.class_proportions)})"
            )
        if not self.cluster_separation > 0:
            raise ConfigError("cluster_separation", "la separación debe ser positiva")
        if self.test_samples < 1:
            raise ConfigError("test_samples", "el conjunto de prueba necesita >= 1 muestra")

    @property
    def num_clients(self) -> int:
        return len(self.samples_per_client)


@dataclass
class ClientNoise:
    """Tipo y tasa de ruido de un cliente."""
    kind: NoiseKind = NoiseKind.SYMMETRIC
    rate: float = 0.0

    def __post_init__(self):
        self.kind = _coerce_enum(NoiseKind, self.kind, "kind")
        self.rate = float(self.rate)
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("rate", f"la tasa debe estar en [0, 1], no {self.rate}")


@dataclass
class NoiseSpec:
    """Especificación del ruido de etiquetas por cliente."""
    per_client: Tuple[ClientNoise, ...]
    confusion_map: Dict[int, Union[str, Tuple[int, ...]]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.per_client = tuple(self.per_client)
        normalized: Dict[int, Union[str, Tuple[int, ...]]] = {}
        for key, candidates in self.confusion_map.items():
            source = int(key)
            name = f"confusion_map[{source}]"
            if candidates == RANDOM_CHOICE:
                normalized[source] = RANDOM_CHOICE
                continue
            candidates = tuple(int(c) for c in candidates)
            if not candidates:
                raise ConfigError(name, "el conjunto de candidatos está vacío")
            if source in candidates:
                raise ConfigError(name, "el conjunto de candidatos no puede incluir la clase origen")
            normalized[source] = candidates
        self.confusion_map = normalized

    def validate_for(self, num_classes: int) -> None:
        """
        Valida los índices de clase del mapa de confusión contra C.

        Raises:
            ConfigError: Si algún índice está fuera de rango o falta una clase
                requerida por un cliente CK-Asymm.
        """
        for source, candidates in self.confusion_map.items():
            name = f"confusion_map[{source}]"
            if not 0 <= source < num_classes:
                raise ConfigError(name, f"clase origen fuera de rango para C={num_classes}")
            if candidates != RANDOM_CHOICE and any(not 0 <= c < num_classes for c in candidates):
                raise ConfigError(name, f"candidato fuera de rango para C={num_classes}")

        if any(noise.kind is NoiseKind.CK_ASYMM and noise.rate > 0 for noise in self.per_client):
            for c in range(num_classes):
                if c not in self.confusion_map:
                    raise ConfigError(f"confusion_map[{c}]", "falta el conjunto de candidatos (vacío)")


@dataclass
class TrainConfig:
    """Hiperparámetros del entrenamiento local por SGD."""
    local_epochs: int = ProtocolDefaults.LOCAL_EPOCHS
    batch_size: int = ProtocolDefaults.BATCH_SIZE
    base_learning_rate: float = ProtocolDefaults.LEARNING_RATE
    lr_drop_points: Tuple[float, ...] = ProtocolDefaults.LR_DROP_POINTS
    lr_drop_factor: float = ProtocolDefaults.LR_DROP_FACTOR
    weight_decay: float = ProtocolDefaults.WEIGHT_DECAY
    seed: int = 0
    hidden_units: Tuple[int, ...] = ()
    init_scale: float = 0.01

    def __post_init__(self):
        self.lr_drop_points = tuple(float(p) for p in self.lr_drop_points)
        self.hidden_units = tuple(int(h) for h in self.hidden_units)
        if self.local_epochs < 1:
            raise ConfigError("local_epochs", "se requiere al menos 1 época local")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "el tamaño de lote debe ser >= 1")
        if not self.base_learning_rate > 0:
            raise ConfigError("base_learning_rate", "el learning rate debe ser positivo")
        if any(not 0 < p <= 1 for p in self.lr_drop_points):
            raise ConfigError("lr_drop_points", "los puntos de caída deben estar en (0, 1]")
        if not self.lr_drop_factor >= 1:
            raise ConfigError("lr_drop_factor", "el divisor del learning rate debe ser >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "el weight decay no puede ser negativo")
        if any(h < 1 for h in self.hidden_units):
            raise ConfigError("hidden_units", "cada capa oculta necesita >= 1 unidad")


@dataclass
class CredalConfig:
    """Parámetros de la pérdida RCL y del calendario de beta."""
    alpha: float = ProtocolDefaults.ALPHA
    beta_start: float = ProtocolDefaults.BETA_START
    beta_end: float = ProtocolDefaults.BETA_END
    schedule: BetaSchedule = BetaSchedule.COSINE
    total_rounds: int = 100

    def __post_init__(self):
        self.schedule = _coerce_enum(BetaSchedule, self.schedule, "schedule")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha", f"alpha debe estar en [0, 1), no {self.alpha}")
        if not 0.0 <= self.beta_end <= self.beta_start <= 1.0:
            raise ConfigError("beta_end", "se requiere 0 <= beta_end <= beta_start <= 1")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds", "se requiere al menos 1 ronda")


@dataclass
class FedConfig:
    """Configuración del protocolo federado."""
    num_clients: int
    rounds: int
    train: TrainConfig = field(default_factory=TrainConfig)
    credal: Optional[CredalConfig] = None
    zeta0: float = ProtocolDefaults.ZETA0
    method: Method = Method.FEDGSCA
    seed: int = 0
    noise_level_gate: float = ProtocolDefaults.NOISE_LEVEL_GATE
    fixed_threshold: float = ProtocolDefaults.FIXED_THRESHOLD
    zeta_floor_ratio: float = ProtocolDefaults.ZETA_FLOOR_RATIO
    per_class_confidence: bool = False
    weight_by_train_size: bool = False
    parallel_clients: bool = False
    em_max_iters: int = ProtocolDefaults.EM_MAX_ITERS
    em_tol: float = ProtocolDefaults.EM_TOL
    em_reg_covar: float = ProtocolDefaults.EM_REG_COVAR

    def __post_init__(self):
        self.method = _coerce_enum(Method, self.method, "method")
        if self.credal is None:
            self.credal = CredalConfig(total_rounds=max(int(self.rounds), 1))
        if self.num_clients < 1:
            raise ConfigError("num_clients", "se requiere al menos 1 cliente")
        if self.rounds < 1:
            raise ConfigError("rounds", "se requiere al menos 1 ronda")
        if not 0.0 < self.zeta0 <= 1.0:
            raise ConfigError("zeta0", f"zeta0 debe estar en (0, 1], no {self.zeta0}")
        if not 0.0 <= self.noise_level_gate <= 1.0:
            raise ConfigError("noise_level_gate", "el umbral de ruido debe estar en [0, 1]")
        if not 0.0 <= self.zeta_floor_ratio <= 1.0:
            raise ConfigError("zeta_floor_ratio", "la razón del suelo debe estar en [0, 1]")
        if self.em_max_iters < 1:
            raise ConfigError("em_max_iters", "se requiere al menos 1 iteración EM")
        if not 0.0 <= self.em_reg_covar < 1.0:
            raise ConfigError("em_reg_covar", f"em_reg_covar debe estar en [0, 1), no {self.em_reg_covar}")

    @property
    def flags(self) -> MethodFlags:
        return METHOD_FLAGS[self.method]


@dataclass
class RunManifest:
    """Manifiesto de una ejecución: datos, ruido, protocolo, salida y repeticiones."""
    data: DataSpec
    noise: NoiseSpec
    fed: FedConfig
    output_dir: str = "runs/latest"
    trials: int = 1
    schema_version: int = SCHEMA_VERSION
    label: Optional[str] = None

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"versión {self.schema_version} no soportada")
        if self.trials < 1:
            raise ConfigError("trials", "se requiere al menos 1 repetición")
        k = self.fed.num_clients
        if self.data.num_clients != k:
            raise ConfigError(
                "data.samples_per_client", f"hay {self.data.num_clients} clientes pero fed.num_clients={k}"
            )
        if len(self.noise.per_client) != k:
            raise ConfigError(
                "noise.per_client", f"hay {len(self.noise.per_client)} entradas pero fed.num_clients={k}"
            )
        try:
            self.noise.validate_for(self.data.num_classes)
        except ConfigError as e:
            raise e.prefixed("noise")

    @property
    def name(self) -> str:
        return self.label or self.fed.method.value

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       trials: Optional[int] = None) -> "RunManifest":
        """Aplica los overrides de línea de comandos (--seed, --out, --trials)."""
        manifest = self
        if seed is not None:
            manifest = replace(
                manifest,
                data=replace(manifest.data, seed=seed),
                noise=replace(manifest.noise, seed=seed),
                fed=replace(manifest.fed, seed=seed, train=replace(manifest.fed.train, seed=seed)),
            )
        if out is not None:
            manifest = replace(manifest, output_dir=out)
        if trials is not None:
            manifest = replace(manifest, trials=trials)
        return manifest

    def for_trial(self, trial: int) -> "RunManifest":
        """
        Deriva el manifiesto de la repetición `trial`.

        Cada flujo (datos, ruido, entrenamiento) usa su propia semilla + trial, de
        modo que métodos distintos comparten las mismas realizaciones de datos y ruido.
        """
        fed = replace(
            self.fed,
            seed=self.fed.seed + trial,
            train=replace(self.fed.train, seed=self.fed.train.seed + trial),
        )
        return replace(
            self,
            data=replace(self.data, seed=self.data.seed + trial),
            noise=replace(self.noise, seed=self.noise.seed + trial),
            fed=fed,
            trials=1,
        )

    def fixture_fields(self) -> Dict[str, Any]:
        """Campos planos de datos y ruido que deben coincidir entre métodos comparados."""
        flat: Dict[str, Any] = {}
        _flatten("data", _plain(asdict(self.data)), flat)
        _flatten("noise", _plain(asdict(self.noise)), flat)
        flat["trials"] = self.trials
        return flat


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _flatten(prefix: str, value, out: Dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}.{key}", item, out)
    elif isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value):
        for i, item in enumerate(value):
            _flatten(f"{prefix}[{i}]", item, out)
    else:
        out[prefix] = value


def _build(cls, payload: Any, path: str):
    """Construye un dataclass desde un dict JSON, anidando la ruta en los errores."""
    if not isinstance(payload, dict):
        raise ConfigError(path, "se esperaba un objeto JSON")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "campo desconocido")
    try:
        return cls(**payload)
    except ConfigError as e:
        raise e.prefixed(path)
    except TypeError as e:
        raise ConfigError(path, f"campos inválidos o faltantes ({e})")


def manifest_from_dict(payload: Dict[str, Any], base_dir: Union[str, Path] = ".") -> RunManifest:
    """
    Construye y valida un RunManifest desde un dict ya parseado.

    `noise.confusion_map` puede ser un objeto o la ruta (relativa a `base_dir`)
    de un JSON de mapa de confusión.

    Raises:
        ConfigError: Con la ruta del campo inválido (p.ej. `noise.per_client[0].rate`).
    """
    if not isinstance(payload, dict):
        raise ConfigError("manifest", "el manifiesto debe ser un objeto JSON")
    for section in ("data", "noise", "fed"):
        if section not in payload:
            raise ConfigError(section, "sección requerida faltante")

    data = _build(DataSpec, payload["data"], "data")

    noise_payload = dict(payload["noise"]) if isinstance(payload["noise"], dict) else payload["noise"]
    if not isinstance(noise_payload, dict):
        raise ConfigError("noise", "se esperaba un objeto JSON")
    per_client = noise_payload.get("per_client")
    if not isinstance(per_client, list):
        raise ConfigError("noise.per_client", "se esperaba una lista")
    if isinstance(noise_payload.get("confusion_map"), str):
        map_path = Path(base_dir) / noise_payload["confusion_map"]
        try:
            noise_payload["confusion_map"] = load_confusion_map(map_path)
        except ConfigError as e:
            raise e.prefixed("noise")
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise ConfigError("noise.confusion_map", f"no se pudo leer {map_path}: {e}")
    noise_payload["per_client"] = [
        _build(ClientNoise, entry, f"noise.per_client[{i}]") for i, entry in enumerate(per_client)
    ]
    noise = _build(NoiseSpec, noise_payload, "noise")

    fed_payload = payload["fed"]
    if not isinstance(fed_payload, dict):
        raise ConfigError("fed", "se esperaba un objeto JSON")
    fed_payload = dict(fed_payload)
    if "train" in fed_payload:
        fed_payload["train"] = _build(TrainConfig, fed_payload["train"], "fed.train")
    if "credal" in fed_payload:
        credal_payload = dict(fed_payload["credal"]) if isinstance(fed_payload["credal"], dict) else None
        if credal_payload is None:
            raise ConfigError("fed.credal", "se esperaba un objeto JSON")
        credal_payload.setdefault("total_rounds", fed_payload.get("rounds", 1))
        fed_payload["credal"] = _build(CredalConfig, credal_payload, "fed.credal")
    fed = _build(FedConfig, fed_payload, "fed")

    top = {k: v for k, v in payload.items() if k not in ("data", "noise", "fed")}
    top.update(data=data, noise=noise, fed=fed)
    return _build(RunManifest, top, "")


def load_manifest(path: Union[str, Path]) -> RunManifest:
    """
    Carga un manifiesto JSON desde disco.

    Args:
        path: Ruta del archivo JSON

    Returns:
        RunManifest: Manifiesto validado

    Raises:
        ConfigError: Si el archivo no existe, no es JSON válido o algún campo es inválido
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError("manifest", f"archivo no encontrado: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("manifest", f"JSON inválido en {path}: {e}")
    manifest = manifest_from_dict(payload, base_dir=path.parent)
    logger.info(f"✅ Manifiesto cargado: {path} ({manifest.name}, {manifest.trials} repeticiones)")
    return manifest


def load_confusion_map(path: Union[str, Path]) -> Dict[int, Union[str, Tuple[int, ...]]]:
    """Carga un mapa de confusión CK-Asymm desde un JSON con clave `confusion_map`."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = NoiseSpec(per_client=(), confusion_map=payload["confusion_map"])
    return spec.confusion_map


def diff_fields(left: Dict[str, Any], right: Dict[str, Any]) -> List[str]:
    """Lista las rutas cuyo valor difiere entre dos diccionarios planos."""
    keys = sorted(set(left) | set(right))
    return [k for k in keys if left.get(k) != right.get(k)]
