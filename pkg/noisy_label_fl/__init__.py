"""
Noisy Label FL

Simulador de aprendizaje federado con etiquetas ruidosas: selección de muestras
por mezcla gaussiana global, pseudo-etiquetado con umbrales adaptativos y
pérdida de etiquetado credal robusto, sobre datos sintéticos.
"""

__version__ = "0.1.0"
__author__ = "Neptali Saldarriaga"
__description__ = "Simulador de aprendizaje federado con etiquetas ruidosas"

# Importar las clases/funciones principales que queremos exponer
from .config import ConfigError, Method, RunManifest, load_manifest
from .federated import FederatedSimulator, simulate

# Definir qué se exporta cuando alguien hace "from noisy_label_fl import *"
__all__ = [
    "ConfigError",
    "FederatedSimulator",
    "Method",
    "RunManifest",
    "load_manifest",
    "simulate",
    "__version__"
]
