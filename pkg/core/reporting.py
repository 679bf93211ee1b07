"""
Escrita e leitura dos CSV/JSON do pipeline.

Os números são escritos com `repr` (ida e volta exata) e as linhas numa
ordem fixa, para que a mesma execução produza sempre os mesmos bytes.
"""
import csv
import json
import logging
from pathlib import Path

from .interpretability import CuiCurve
from .stats import F1Report, ResampleResult

logger = logging.getLogger(__name__)

CUI_COLUMNS = ['layer_index', 'layer_name', 'cui_value', 'scope', 'reduction']
SWEEP_COLUMNS = ['layer_index', 'layer_name', 'raw_bytes', 'encoded_bytes', 'transfer_s', 'accuracy']
F1_COLUMNS = ['rank', 'class', 'support', 'f1_before', 'f1_after']
RESAMPLE_COLUMNS = ['label', 'trial', 'accuracy']


def _number(value) -> str:
    return '' if value is None else repr(float(value))


def _optional(raw: str) -> float | None:
    return None if raw == '' else float(raw)


def _write_rows(path, columns: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)
    logger.debug(f"CSV gravado: {path}")
    return path


def _read_rows(path, columns: list[str]) -> list[dict]:
    with Path(path).open(newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != columns:
            raise ValueError(f"{path}: colunas {reader.fieldnames}, esperava {columns}.")
        return list(reader)


def write_json(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + '\n', encoding='utf-8')
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding='utf-8'))


# --- CUI ---

def write_cui_csv(curve: CuiCurve, path) -> Path:
    rows = [
        {'layer_index': layer, 'layer_name': curve.layer_names[layer], 'cui_value': _number(curve.values[layer]),
         'scope': curve.scope, 'reduction': curve.reduction}
        for layer in curve.layers()
    ]
    return _write_rows(path, CUI_COLUMNS, rows)


def read_cui_csv(path, method: str = 'gradcam') -> CuiCurve:
    rows = _read_rows(path, CUI_COLUMNS)
    if not rows:
        raise ValueError(f"{path}: curva sem camadas.")
    return CuiCurve(
        values={int(row['layer_index']): float(row['cui_value']) for row in rows},
        layer_names={int(row['layer_index']): row['layer_name'] for row in rows},
        scope=rows[0]['scope'], reduction=rows[0]['reduction'], method=method,
        provenance={'source': str(path)},
    )


# --- Varrimento ---

def write_sweep_csv(report, path) -> Path:
    rows = [
        {'layer_index': row.layer, 'layer_name': row.layer_name, 'raw_bytes': row.raw_bytes,
         'encoded_bytes': row.encoded_bytes, 'transfer_s': _number(row.transfer_s),
         'accuracy': _number(row.accuracy)}
        for row in report.rows
    ]
    return _write_rows(path, SWEEP_COLUMNS, rows)


def read_sweep_csv(path) -> list[dict]:
    return [
        {'layer_index': int(row['layer_index']), 'layer_name': row['layer_name'],
         'raw_bytes': int(row['raw_bytes']), 'encoded_bytes': int(row['encoded_bytes']),
         'transfer_s': float(row['transfer_s']), 'accuracy': _optional(row['accuracy'])}
        for row in _read_rows(path, SWEEP_COLUMNS)
    ]


# --- F1 por classe ---

def write_f1_csv(report: F1Report, path) -> Path:
    rows = [
        {'rank': row['rank'], 'class': row['class'], 'support': row['support'],
         'f1_before': _number(row['f1_before']), 'f1_after': _number(row['f1_after'])}
        for row in report.rows
    ]
    return _write_rows(path, F1_COLUMNS, rows)


def read_f1_csv(path) -> list[dict]:
    return [
        {'rank': int(row['rank']), 'class': int(row['class']), 'support': int(row['support']),
         'f1_before': _optional(row['f1_before']), 'f1_after': _optional(row['f1_after'])}
        for row in _read_rows(path, F1_COLUMNS)
    ]


# --- Reamostragem ---

def write_resample_csv(results: dict[str, ResampleResult], path) -> Path:
    rows = [
        {'label': label, 'trial': trial, 'accuracy': _number(value)}
        for label, result in results.items()
        for trial, value in enumerate(result.values)
    ]
    return _write_rows(path, RESAMPLE_COLUMNS, rows)


def read_resample_csv(path) -> dict[str, list[float]]:
    values: dict[str, list[float]] = {}
    for row in _read_rows(path, RESAMPLE_COLUMNS):
        values.setdefault(row['label'], []).append(float(row['accuracy']))
    return values
