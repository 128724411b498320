"""
Persistência do conjunto de cenários em disco.
Um arquivo JSON por cenário (scenario_XXXX.json) e um manifest.json
listando id, arquivo, seed, tipo e número de agentes.
"""
import glob
import json
import logging
import os
from threading import Lock
from typing import List, Optional, Tuple

from modules.mapmodel import Track, VectorMap, load_scenario, save_scenario

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
_lock = Lock()


def scenario_id(index: int) -> str:
    return f"scenario_{index:04d}"


def _ensure_dir(data_dir: str):
    """Garante que o diretório de dados existe (OSError se não for possível)."""
    os.makedirs(data_dir, exist_ok=True)


def save_generated(data_dir: str, index: int, seed: int, kind: str, n_agents: int,
                   vector_map: VectorMap, tracks: List[Track]) -> dict:
    """Grava um cenário gerado e devolve a entrada do manifest."""
    _ensure_dir(data_dir)
    sid = scenario_id(index)
    filename = f"{sid}.json"
    with _lock:
        save_scenario(vector_map, tracks, os.path.join(data_dir, filename))
    return {"id": sid, "file": filename, "seed": int(seed), "kind": kind, "n_agents": int(n_agents)}


def write_manifest(data_dir: str, entries: List[dict]) -> str:
    """Manifest com chaves ordenadas; mesmas entradas produzem os mesmos bytes."""
    _ensure_dir(data_dir)
    path = os.path.join(data_dir, MANIFEST_FILE)
    with _lock:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"version": 1, "scenarios": entries}, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
    logger.info(f"scenario_store: manifest com {len(entries)} cenário(s) gravado em {path}")
    return path


def load_manifest(data_dir: str) -> List[dict]:
    """
    Entradas do manifest; sem manifest, todos os *.json do diretório
    em ordem alfabética (id = nome do arquivo sem extensão).
    """
    path = os.path.join(data_dir, MANIFEST_FILE)
    if os.path.exists(path):
        with _lock:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        return list(data.get("scenarios", []))
    files = sorted(p for p in glob.glob(os.path.join(data_dir, "*.json"))
                   if os.path.basename(p) != MANIFEST_FILE)
    return [{"id": os.path.splitext(os.path.basename(p))[0], "file": os.path.basename(p)} for p in files]


def load_dataset(data_dir: str) -> List[Tuple[str, VectorMap, List[Track]]]:
    """Carrega todos os cenários listados; diretório sem cenários gera ValueError."""
    if not os.path.isdir(data_dir):
        raise ValueError(f"diretório de dados inexistente: {data_dir}")
    entries = load_manifest(data_dir)
    if not entries:
        raise ValueError(f"nenhum cenário em {data_dir}")
    scenarios = []
    for entry in entries:
        vector_map, tracks = load_scenario(os.path.join(data_dir, entry["file"]))
        scenarios.append((entry["id"], vector_map, tracks))
    logger.info(f"scenario_store: {len(scenarios)} cenário(s) carregado(s) de {data_dir}")
    return scenarios


def find_scenario(data_dir: str, sid: str) -> Optional[Tuple[VectorMap, List[Track]]]:
    """Cenário pelo id, ou None se não listado."""
    entry = next((e for e in load_manifest(data_dir) if e["id"] == sid), None)
    if entry is None:
        return None
    return load_scenario(os.path.join(data_dir, entry["file"]))
