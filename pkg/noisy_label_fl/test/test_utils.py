"""
Tests unitarios para el módulo de utilidades.

Valida funciones de guardado, carga y validación de artefactos y la derivación
de generadores aleatorios por flujo.
"""

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from noisy_label_fl.utils import STREAM_BATCHES, STREAM_DATA, DataUtils, make_rng


class TestMakeRng:
    """Tests para los flujos aleatorios"""

    def test_same_stream_same_draws(self):
        """Test mismo flujo, mismas extracciones"""
        a = make_rng(3, STREAM_DATA, 0).random(5)
        b = make_rng(3, STREAM_DATA, 0).random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        """Test flujos distintos son independientes"""
        a = make_rng(3, STREAM_DATA, 0).random(5)
        b = make_rng(3, STREAM_DATA, 1).random(5)
        c = make_rng(3, STREAM_BATCHES, 0).random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestDataUtils:
    """Tests para la clase DataUtils"""

    def setup_method(self):
        """Preparar datos de prueba para cada test"""
        self.sample_df = pd.DataFrame({
            'round': [0, 1, 2],
            'method': ['FedGSCA', 'FedGSCA', 'FedGSCA'],
            'macro_f1': [0.5, 0.61, 0.702],
        })
        self.empty_df = pd.DataFrame()
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Limpiar después de cada test"""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_save_to_json_success(self):
        """Test guardar JSON con claves ordenadas"""
        output_path = Path(self.temp_dir) / "summary.json"

        result = DataUtils.save_to_json({"b": 1, "a": [0.5, None]}, output_path)

        assert result is True
        text = output_path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0.5, None], "b": 1}

    def test_save_to_json_empty_payload(self):
        """Test guardar un resumen vacío retorna False"""
        output_path = Path(self.temp_dir) / "empty.json"

        assert DataUtils.save_to_json({}, output_path) is False
        assert not output_path.exists()

    def test_save_to_json_rejects_nan(self):
        """Test guardar JSON con NaN falla"""
        output_path = Path(self.temp_dir) / "nan.json"
        assert DataUtils.save_to_json({"x": float("nan")}, output_path) is False

    def test_save_to_csv_success(self):
        """Test guardar CSV exitosamente"""
        output_path = Path(self.temp_dir) / "rounds.csv"

        result = DataUtils.save_to_csv(self.sample_df, output_path)

        assert result is True
        loaded_df = pd.read_csv(output_path)
        assert len(loaded_df) == 3

    def test_save_to_csv_empty_dataframe(self):
        """Test guardar CSV vacío retorna False"""
        output_path = Path(self.temp_dir) / "empty.csv"
        assert DataUtils.save_to_csv(self.empty_df, output_path) is False
        assert not output_path.exists()

    def test_save_to_csv_is_byte_stable(self):
        """Reescribir el mismo DataFrame produce el mismo archivo"""
        first = Path(self.temp_dir) / "a.csv"
        second = Path(self.temp_dir) / "b.csv"
        DataUtils.save_to_csv(self.sample_df, first)
        DataUtils.save_to_csv(self.sample_df, second)
        assert first.read_bytes() == second.read_bytes()

    def test_append_csv_rows_writes_header_once(self):
        """Test agregar filas escribe el encabezado una vez"""
        output_path = Path(self.temp_dir) / "rounds.csv"
        columns = ["round", "value"]

        assert DataUtils.append_csv_rows([{"round": 0, "value": 0.1}], output_path, columns)
        assert DataUtils.append_csv_rows([{"round": 1, "value": None}], output_path, columns)

        lines = output_path.read_text(encoding="utf-8").splitlines()
        assert lines == ["round,value", "0,0.1", "1,"]

    def test_load_csv_success(self):
        """Test cargar CSV exitosamente"""
        output_path = Path(self.temp_dir) / "rounds.csv"
        DataUtils.save_to_csv(self.sample_df, output_path)

        loaded = DataUtils.load_csv(output_path)

        assert loaded is not None
        assert loaded["macro_f1"].tolist() == [0.5, 0.61, 0.702]

    def test_load_csv_missing_file(self):
        """Test cargar CSV inexistente retorna None"""
        assert DataUtils.load_csv(Path(self.temp_dir) / "missing.csv") is None

    def test_load_csv_empty_file(self):
        """Test cargar CSV vacío retorna None"""
        path = Path(self.temp_dir) / "empty.csv"
        path.write_text("", encoding="utf-8")
        assert DataUtils.load_csv(path) is None

    def test_validate_columns_success(self):
        """Test validación de columnas exitosa"""
        assert DataUtils.validate_columns(self.sample_df, ['round', 'macro_f1'])

    def test_validate_columns_missing(self):
        """Test validación con columnas faltantes"""
        assert not DataUtils.validate_columns(self.sample_df, ['round', 'stability'])

    def test_validate_columns_strict(self):
        """Test validación estricta"""
        assert not DataUtils.validate_columns(self.sample_df, ['round', 'macro_f1'], strict=True)
        assert DataUtils.validate_columns(self.sample_df, ['round', 'method', 'macro_f1'], strict=True)

    def test_clear_file(self):
        path = Path(self.temp_dir) / "old.csv"
        path.write_text("x\n", encoding="utf-8")
        DataUtils.clear_file(path)
        DataUtils.clear_file(path)
        assert not path.exists()
