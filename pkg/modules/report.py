"""
Relatórios de avaliação: documento JSON e tabela texto no formato "ADE/FDE"
por horizonte (uma linha por modelo).
"""
import json
import logging
import os
from typing import Dict, List, Optional, Sequence

from jinja2 import DictLoader, Environment, StrictUndefined

from modules.traineval import MetricsReport

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

# Valores publicados (nuScenes, treino completo); não reproduzíveis com dados sintéticos
REFERENCE_ROWS: Dict[str, List[List[float]]] = {
    "Const. Vel. & Head. (ref.)": [[0.48, 0.66], [0.96, 1.75], [1.60, 3.32],
                                   [2.38, 5.30], [3.28, 7.61], [4.28, 10.22]],
    "Physics Oracle (ref.)": [[0.42, 0.55], [0.77, 1.35], [1.26, 2.55],
                              [1.89, 4.18], [2.64, 6.15], [3.50, 8.44]],
    "Final model (ref.)": [[0.20, 0.29], [0.46, 0.88], [0.84, 1.85],
                           [1.34, 3.17], [1.99, 4.91], [2.74, 6.89]],
}

_TEMPLATES = {
    "table.txt": (
        "{{ 'Model'.ljust(name_width) }}"
        "{% for h in horizons %} | {{ ('%ds ADE/FDE'|format(h)).rjust(cell_width) }}{% endfor %}\n"
        "{{ '-' * rule_width }}\n"
        "{% for row in rows %}"
        "{{ row.name.ljust(name_width) }}"
        "{% for cell in row.cells %} | {{ cell.rjust(cell_width) }}{% endfor %}\n"
        "{% endfor %}"
    ),
}

_env = Environment(loader=DictLoader(_TEMPLATES), undefined=StrictUndefined,
                   keep_trailing_newline=True, autoescape=False)


def _cell(ade: float, fde: float) -> str:
    return f"{ade:.2f}/{fde:.2f}"


def report_rows(reports: Sequence[MetricsReport], horizons: Sequence[int],
                include_reference: bool = False) -> List[dict]:
    rows = [{"name": r.model, "cells": [_cell(r.ade[h], r.fde[h]) for h in horizons]} for r in reports]
    if include_reference:
        for name, values in REFERENCE_ROWS.items():
            rows.append({"name": name, "cells": [_cell(*values[h - 1]) if 1 <= h <= len(values) else "n/a"
                                                 for h in horizons]})
    return rows


def render_table(reports: Sequence[MetricsReport], include_reference: bool = False) -> str:
    """Tabela alinhada; colunas "{h}s ADE/FDE" com valores em metros e 2 casas"""
    if not reports:
        raise ValueError("render_table: nenhum relatório")
    horizons = reports[0].horizons
    for r in reports[1:]:
        if r.horizons != horizons:
            raise ValueError(f"horizontes divergentes: {r.model} {r.horizons} != {horizons}")
    rows = report_rows(reports, horizons, include_reference)
    name_width = max(len("Model"), *(len(row["name"]) for row in rows))
    cell_width = max(len(f"{max(horizons)}s ADE/FDE"), *(len(c) for row in rows for c in row["cells"]))
    rule_width = name_width + len(horizons) * (cell_width + 3)
    return _env.get_template("table.txt").render(
        horizons=horizons, rows=rows, name_width=name_width, cell_width=cell_width, rule_width=rule_width)


def report_document(reports: Sequence[MetricsReport], metadata: Optional[dict] = None) -> dict:
    return {
        "version": REPORT_VERSION,
        "metadata": metadata or {},
        "reports": [r.to_dict() for r in reports],
    }


def write_reports(reports: Sequence[MetricsReport], path: str, metadata: Optional[dict] = None,
                  include_reference: bool = False) -> Dict[str, str]:
    """
    Grava `path` (JSON) e `path` com sufixo .txt (tabela).

    Returns:
        dict com os caminhos {"json": ..., "table": ...}
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_document(reports, metadata), f, indent=2, sort_keys=True)
        f.write("\n")
    table_path = os.path.splitext(path)[0] + ".txt"
    if table_path == path:
        table_path = path + ".txt"
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(render_table(reports, include_reference))
    logger.info(f"Relatório gravado em {path} e {table_path}")
    return {"json": path, "table": table_path}

