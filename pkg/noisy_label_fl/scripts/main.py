"""
Script principal del simulador federado con etiquetas ruidosas.

Verbos:
    run       Ejecuta las repeticiones de un manifiesto y escribe sus registros
    compare   Ejecuta varios manifiestos sobre el mismo escenario y arma una tabla
    plotdata  Convierte rounds.csv a formato largo `round,series,value`
    validate  Valida manifiestos sin ejecutarlos

Códigos de salida: 0 éxito, 1 error de validación, 2 error en ejecución.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

# Imports del paquete noisy_label_fl
from noisy_label_fl.config import ConfigError, RunManifest, diff_fields, load_manifest
from noisy_label_fl.federated import CLIENT_COLUMNS, ROUND_COLUMNS, FederatedSimulator
from noisy_label_fl.metrics import save_confusion
from noisy_label_fl.model import TrainingError, save_params
from noisy_label_fl.noisegen import corrupt, save_flip_mask
from noisy_label_fl.synthdata import generate, save_datasets
from noisy_label_fl.utils import DataUtils

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

SUMMARY_METRICS = ["macro_f1", "macro_recall", "macro_precision", "stability",
                   "selection_auroc", "pseudo_acc"]
PLOT_SERIES = [c for c in ROUND_COLUMNS if c not in ("round", "method")]


class FixtureMismatchError(ValueError):
    """Los manifiestos comparados no comparten datos y ruido."""

    def __init__(self, label: str, fields: List[str]):
        self.label = label
        self.fields = fields
        super().__init__(f"El manifiesto '{label}' difiere en: {', '.join(fields)}")


class ExperimentRunner:
    """
    Ejecuta las repeticiones de un manifiesto.

    Cada repetición genera datos, inyecta ruido, simula T rondas y guarda sus
    artefactos en `<output_dir>/trial_<i>/`; al final se escribe un resumen
    con media y desviación estándar entre repeticiones.
    """

    def __init__(self, manifest: RunManifest):
        self.manifest = manifest
        self.output_dir = Path(manifest.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"🚀 Experimento '{manifest.name}' inicializado → {self.output_dir}")

    def trial_dir(self, trial: int) -> Path:
        return self.output_dir / f"trial_{trial}"

    def run_trial(self, trial: int) -> Dict[str, Any]:
        """
        Ejecuta una repetición con las semillas derivadas de `trial`.

        rounds.csv y clients.csv se escriben ronda a ronda, así que si la
        simulación falla quedan los registros parciales.

        Returns:
            dict: Resumen de la repetición (también guardado como summary.json)
        """
        manifest = self.manifest.for_trial(trial)
        out = self.trial_dir(trial)
        out.mkdir(parents=True, exist_ok=True)
        logger.info(f"🧪 Repetición {trial}: semillas datos={manifest.data.seed}, "
                    f"ruido={manifest.noise.seed}, entrenamiento={manifest.fed.seed}")

        clients, test = generate(manifest.data)
        clients, masks = corrupt(clients, manifest.noise, manifest.data.num_classes)
        save_datasets([*clients, test], out / "dataset.csv")
        save_flip_mask(clients, masks, out / "flip_mask.csv")

        rounds_path = out / "rounds.csv"
        clients_path = out / "clients.csv"
        DataUtils.clear_file(rounds_path)
        DataUtils.clear_file(clients_path)

        def record_round(log, records):
            DataUtils.append_csv_rows([log.to_row()], rounds_path, ROUND_COLUMNS)
            DataUtils.append_csv_rows([r.to_row() for r in records], clients_path, CLIENT_COLUMNS)

        simulator = FederatedSimulator(manifest.fed, clients, test, manifest.data.num_classes, masks)
        result = simulator.run(on_round=record_round)

        save_confusion(result.metrics.confusion, out / "confusion.csv")
        save_params(result.params, out / "model.csv")

        # los valores finales se releen de rounds.csv para que el resumen coincida con él
        rounds = DataUtils.load_csv(rounds_path)
        final = rounds.iloc[-1] if rounds is not None else pd.Series(result.rounds[-1].to_row())
        summary = {
            "name": manifest.name,
            "method": manifest.fed.method.value,
            "trial": trial,
            "rounds": manifest.fed.rounds,
            "seeds": {"data": manifest.data.seed, "noise": manifest.noise.seed, "fed": manifest.fed.seed},
            "final": {metric: None if pd.isna(final[metric]) else float(final[metric])
                      for metric in SUMMARY_METRICS},
        }
        DataUtils.save_to_json(summary, out / "summary.json")
        return summary

    def run(self, parallel: bool = False) -> Dict[str, Any]:
        """
        Ejecuta todas las repeticiones (en hilos si `parallel`) y escribe el resumen global.

        Returns:
            dict: Resumen con media/desviación por métrica final
        """
        trials = range(self.manifest.trials)
        if parallel and self.manifest.trials > 1:
            with ThreadPoolExecutor(max_workers=self.manifest.trials) as executor:
                summaries = list(executor.map(self.run_trial, trials))
        else:
            summaries = [self.run_trial(i) for i in trials]

        summary = {
            "name": self.manifest.name,
            "method": self.manifest.fed.method.value,
            "trials": self.manifest.trials,
            "final": aggregate_trials(summaries),
        }
        DataUtils.save_to_json(summary, self.output_dir / "summary.json")
        self._print_final_report(summary)
        return summary

    def _print_final_report(self, summary: Dict[str, Any]) -> None:
        logger.info("=" * 60)
        logger.info(f"📊 REPORTE FINAL: {summary['name']} ({summary['trials']} repeticiones)")
        logger.info("=" * 60)
        for metric, stats in summary["final"].items():
            if stats["mean"] is None:
                logger.info(f"   {metric}: n/d")
            else:
                logger.info(f"   {metric}: {stats['mean']:.4f} ± {stats['std']:.4f}")
        logger.info("=" * 60)


def aggregate_trials(summaries: Sequence[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Media y desviación estándar poblacional de cada métrica final entre repeticiones."""
    out: Dict[str, Dict[str, Any]] = {}
    for metric in SUMMARY_METRICS:
        values = [s["final"][metric] for s in summaries]
        present = [v for v in values if v is not None and not pd.isna(v)]
        out[metric] = {
            "values": [None if v is None or pd.isna(v) else float(v) for v in values],
            "mean": float(np.mean(present)) if present else None,
            "std": float(np.std(present)) if present else None,
        }
    return out


def check_fixtures(manifests: Sequence[RunManifest]) -> None:
    """
    Verifica que todos los manifiestos compartan datos, ruido y repeticiones.

    Raises:
        FixtureMismatchError: Con la lista de campos que difieren
    """
    reference = manifests[0].fixture_fields()
    for manifest in manifests[1:]:
        differing = diff_fields(reference, manifest.fixture_fields())
        if differing:
            raise FixtureMismatchError(manifest.name, differing)


def _unique_names(manifests: Sequence[RunManifest]) -> List[str]:
    names: List[str] = []
    for manifest in manifests:
        name = manifest.name
        if name in names:
            name = f"{name}_{len(names)}"
        names.append(name)
    return names


def cmd_run(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest).with_overrides(seed=args.seed, out=args.out, trials=args.trials)
    ExperimentRunner(manifest).run(parallel=args.parallel)
    logger.info("🎉 Ejecución completada con éxito")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    manifests = [load_manifest(p).with_overrides(seed=args.seed, trials=args.trials) for p in args.manifests]
    check_fixtures(manifests)

    base = Path(args.out or "runs/compare")
    rows = []
    for name, manifest in zip(_unique_names(manifests), manifests):
        manifest = manifest.with_overrides(out=str(base / name))
        summary = ExperimentRunner(manifest).run(parallel=args.parallel)
        row: Dict[str, Any] = {"name": name, "method": summary["method"], "trials": summary["trials"]}
        for metric, stats in summary["final"].items():
            row[f"{metric}_mean"] = stats["mean"]
            row[f"{metric}_std"] = stats["std"]
        rows.append(row)

    table = pd.DataFrame(rows)
    DataUtils.save_to_csv(table, base / "compare.csv")
    logger.info(f"✅ Tabla comparativa con {len(table)} métodos: {base / 'compare.csv'}")
    return EXIT_OK


def plot_frame(run_dir: Path) -> Optional[pd.DataFrame]:
    """
    Reúne los rounds.csv de una ejecución en formato largo `round,series,value`.

    Con varias repeticiones la serie lleva el prefijo `trial_<i>/`.
    """
    direct = run_dir / "rounds.csv"
    sources = [("", direct)] if direct.exists() else [
        (f"{p.parent.name}/", p) for p in sorted(run_dir.glob("trial_*/rounds.csv"))
    ]
    if not sources:
        logger.error(f"❌ No se encontró rounds.csv en {run_dir}")
        return None

    frames = []
    for prefix, path in sources:
        df = DataUtils.load_csv(path)
        if df is None or df.empty:
            logger.error(f"❌ rounds.csv vacío o ilegible: {path}")
            return None
        if not DataUtils.validate_columns(df, ["round"]):
            return None
        series = [c for c in PLOT_SERIES if c in df.columns]
        long = df.melt(id_vars=["round"], value_vars=series, var_name="series", value_name="value")
        long = long.dropna(subset=["value"])
        long["series"] = prefix + long["series"]
        frames.append(long)
    return pd.concat(frames, ignore_index=True)[["round", "series", "value"]]


def cmd_plotdata(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    frame = plot_frame(run_dir)
    if frame is None:
        return EXIT_VALIDATION
    output = Path(args.out) if args.out else run_dir / "plotdata.csv"
    if not DataUtils.save_to_csv(frame, output):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    for path in args.manifests:
        manifest = load_manifest(path)
        logger.info(f"✅ {path}: {manifest.name}, K={manifest.fed.num_clients}, T={manifest.fed.rounds}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Simulador federado con etiquetas ruidosas")
    parser.add_argument(
        "--log-level",
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        default='INFO',
        help="Nivel de logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_overrides(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, help="Semilla base para datos, ruido y entrenamiento")
        p.add_argument("--out", help="Directorio (o archivo) de salida")
        p.add_argument("--trials", type=int, help="Número de repeticiones")
        p.add_argument("--parallel", action="store_true", help="Ejecutar las repeticiones en hilos")

    run = sub.add_parser("run", help="Ejecutar un manifiesto")
    run.add_argument("manifest", help="Ruta del manifiesto JSON")
    add_overrides(run)
    run.set_defaults(handler=cmd_run)

    compare = sub.add_parser("compare", help="Comparar métodos sobre el mismo escenario")
    compare.add_argument("manifests", nargs="+", help="Manifiestos a comparar")
    add_overrides(compare)
    compare.set_defaults(handler=cmd_compare)

    plot = sub.add_parser("plotdata", help="Exportar series por ronda en formato largo")
    plot.add_argument("run_dir", help="Directorio de una ejecución")
    plot.add_argument("--out", help="CSV de salida (por defecto <run_dir>/plotdata.csv)")
    plot.set_defaults(handler=cmd_plotdata)

    validate = sub.add_parser("validate", help="Validar manifiestos")
    validate.add_argument("manifests", nargs="+", help="Manifiestos a validar")
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Función principal con argumentos de línea de comandos."""
    args = build_parser().parse_args(argv)

    # Configurar logging
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logging.getLogger().setLevel(getattr(logging, args.log_level))

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"❌ Configuración inválida en `{e.field}`: {e.message}")
        return EXIT_VALIDATION
    except FixtureMismatchError as e:
        logger.error(f"❌ Escenarios distintos, comparación rechazada: {e}")
        return EXIT_VALIDATION
    except TrainingError as e:
        logger.error(f"💥 Entrenamiento abortado (ronda {e.round_index}, cliente {e.client}): {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("⏹️ Ejecución interrumpida por el usuario")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"💥 Error crítico en la ejecución: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
