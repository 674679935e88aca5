"""
Utilidades de E/S y de semillas para las ejecuciones del simulador.

Funciones auxiliares para guardar tablas de resultados (CSV/JSON), añadir filas
incrementalmente, validar columnas y derivar generadores aleatorios por flujo.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Formato de flotantes para que las tablas se reescriban byte a byte idénticas
FLOAT_FORMAT = "%.10g"

# Identificadores de flujo aleatorio (spawn keys)
STREAM_DATA = 1
STREAM_TEST = 2
STREAM_NOISE = 3
STREAM_INIT = 4
STREAM_BATCHES = 5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Crea un generador independiente para un flujo identificado por `stream`.

    Args:
        seed: Semilla base
        stream: Claves enteras del flujo (p.ej. STREAM_BATCHES, ronda, cliente)

    Returns:
        np.random.Generator: Generador determinista para ese flujo
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream)))


class DataUtils:
    """
    Utilidades para guardar y validar los artefactos de una ejecución.
    """

    @staticmethod
    def save_to_json(payload: Dict[str, Any], output_path: Union[str, Path]) -> bool:
        """
        Guarda un diccionario en formato JSON con manejo robusto de errores.

        Args:
            payload: Datos serializables a JSON
            output_path: Ruta del archivo de salida

        Returns:
            bool: True si se guardó correctamente, False en caso contrario
        """
        try:
            output_path = Path(output_path)
            output_path.parent.mkdir(parents=True, exist_ok=True)

            if not payload:
                logger.warning("⚠️ Resumen vacío, no se guardará archivo")
                return False

            output_path.write_text(
                json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n",
                encoding="utf-8",
            )
            logger.info(f"✅ Archivo JSON guardado: {output_path}")
            return True

        except PermissionError:
            logger.error(f"❌ Sin permisos para escribir en: {output_path}")
            return False
        except (TypeError, ValueError) as e:
            logger.error(f"❌ Contenido no serializable para {output_path}: {e}")
            return False

    @staticmethod
    def save_to_csv(df: pd.DataFrame,
                    output_path: Union[str, Path],
                    index: bool = False,
                    float_format: Optional[str] = FLOAT_FORMAT) -> bool:
        """
        Guarda el DataFrame en formato CSV.

        Args:
            df: DataFrame a guardar
            output_path: Ruta del archivo de salida
            index: Si incluir el índice en el archivo
            float_format: Formato de flotantes (None = repr completo)

        Returns:
            bool: True si se guardó correctamente
        """
        try:
            output_path = Path(output_path)
            output_path.parent.mkdir(parents=True, exist_ok=True)

            if df.empty:
                logger.warning("⚠️ DataFrame vacío, no se guardará CSV")
                return False

            df.to_csv(output_path, index=index, float_format=float_format, lineterminator="\n")
            logger.info(f"✅ Archivo CSV guardado: {output_path} ({len(df)} registros)")
            return True

        except Exception as e:
            logger.error(f"❌ Error guardando CSV en {output_path}: {e}")
            return False

    @staticmethod
    def append_csv_rows(rows: List[Dict[str, Any]],
                        output_path: Union[str, Path],
                        columns: List[str]) -> bool:
        """
        Añade filas a un CSV, escribiendo la cabecera si el archivo no existe.

        Permite conservar los registros parciales si la ejecución falla a mitad.

        Args:
            rows: Filas a añadir
            output_path: Ruta del CSV
            columns: Orden de columnas

        Returns:
            bool: True si se escribió correctamente
        """
        try:
            output_path = Path(output_path)
            output_path.parent.mkdir(parents=True, exist_ok=True)
            df = pd.DataFrame(rows, columns=columns)
            write_header = not output_path.exists()
            df.to_csv(output_path, mode="a", header=write_header, index=False,
                      float_format=FLOAT_FORMAT, lineterminator="\n")
            return True
        except Exception as e:
            logger.error(f"❌ Error añadiendo filas a {output_path}: {e}")
            return False

    @staticmethod
    def load_csv(file_path: Union[str, Path]) -> Optional[pd.DataFrame]:
        """
        Carga un CSV de resultados.

        Args:
            file_path: Ruta del archivo CSV

        Returns:
            pd.DataFrame or None: Datos cargados o None si hay error
        """
        try:
            file_path = Path(file_path)

            if not file_path.exists():
                logger.error(f"❌ Archivo no encontrado: {file_path}")
                return None

            df = pd.read_csv(file_path, float_precision="round_trip")
            logger.info(f"✅ Archivo cargado: {file_path} ({len(df)} registros)")
            return df

        except pd.errors.EmptyDataError:
            logger.error(f"❌ Archivo vacío: {file_path}")
            return None
        except Exception as e:
            logger.error(f"❌ Error cargando CSV desde {file_path}: {e}")
            return None

    @staticmethod
    def validate_columns(df: pd.DataFrame,
                         expected_columns: List[str],
                         strict: bool = False) -> bool:
        """
        Valida las columnas del DataFrame.

        Args:
            df: DataFrame a validar
            expected_columns: Lista de columnas esperadas
            strict: Si True, no permite columnas adicionales

        Returns:
            bool: True si la validación pasa
        """
        missing = [col for col in expected_columns if col not in df.columns]
        if missing:
            logger.error(f"❌ Faltan columnas requeridas: {missing}")
            return False

        if strict:
            extra = [col for col in df.columns if col not in expected_columns]
            if extra:
                logger.error(f"❌ Columnas no esperadas: {extra}")
                return False

        return True

    @staticmethod
    def clear_file(file_path: Union[str, Path]) -> None:
        """Elimina un archivo previo para que una re-ejecución lo reescriba desde cero."""
        file_path = Path(file_path)
        if file_path.exists():
            file_path.unlink()
