"""
Interface de linha de comando: geração de cenários, treino, avaliação,
prévias de rasterização e inspeção de checkpoints.

Cada cmd_* devolve {"success": bool, ...}; em falha, {"success": False, "error": ...}.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from modules.config import (
    SCENARIO_DEFAULTS, ConfigError, RunConfig, default_threads, load_environment, setup_logging,
)
from modules.mapmodel import (
    SCENARIO_KINDS, ScenarioFormatError, compute_stats, build_dataset, generate_scenario, window_state_rows,
)
from modules.raster_cache import get_raster_cache
from modules.rasterizer import export_pgm, rasterize_chunk_stack
from modules.report import write_reports
from modules.scenario_store import find_scenario, load_dataset, save_generated, write_manifest
from modules.seqmodel import CheckpointError, describe_checkpoint, load_checkpoint, save_checkpoint
from modules.training_log import TrainingLog
from modules.traineval import HORIZONS_S, evaluate, model_predictor, split_by_scenario, train

logger = logging.getLogger(__name__)

# Campos que precisam coincidir entre checkpoint e configuração de avaliação
_COMPATIBLE_FIELDS = ("rho", "tau", "lambda_m", "px_per_m", "out_px")


def _failure(error: Exception) -> dict:
    logger.error(f"{type(error).__name__}: {error}")
    return {"success": False, "error": str(error)}


def _run_config(path: Optional[str], **overrides) -> RunConfig:
    config = RunConfig.from_file(path) if path else RunConfig()
    data = config.to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def _samples(scenarios, config: RunConfig, stats, rho: int, tau: int, raster_cfg, threads: int):
    samples = build_dataset(scenarios, rho, tau, stats, raster_cfg, threads, get_raster_cache())
    if config.drop_out_of_map:
        kept = [s for s in samples if not s.out_of_map]
        if len(kept) != len(samples):
            logger.info(f"{len(samples) - len(kept)} amostra(s) fora do mapa descartada(s)")
        samples = kept
    return samples



def _log_cache_stats() -> dict:
    stats = get_raster_cache().get_stats()
    logger.info(f"Cache de rasters: {stats['items']} pilha(s), acertos {stats['hit_rate']:.1%}, "
                f"{stats['memory_usage_mb']} MB")
    return stats

# ----------------------------------------------------------------------
# Comandos
# ----------------------------------------------------------------------

def cmd_generate(seed: int, kinds: Sequence[str], count: int, out: str,
                 n_agents: int = SCENARIO_DEFAULTS["n_agents"],
                 track_steps: int = SCENARIO_DEFAULTS["track_steps"]) -> dict:
    """Gera `count` cenários (seed do cenário i = seed + i, tipos em rodízio) e o manifest"""
    try:
        unknown = [k for k in kinds if k not in SCENARIO_KINDS]
        if unknown or not kinds:
            raise ValueError(f"tipos inválidos: {', '.join(unknown) or '(vazio)'}; use {', '.join(SCENARIO_KINDS)}")
        if count < 1:
            raise ValueError("count deve ser >= 1")
        entries = []
        for i in range(count):
            kind = kinds[i % len(kinds)]
            vector_map, tracks = generate_scenario(seed + i, kind, n_agents, track_steps)
            entries.append(save_generated(out, i, seed + i, kind, n_agents, vector_map, tracks))
        manifest = write_manifest(out, entries)
        logger.info(f"{count} cenário(s) gerado(s) em {out}")
        return {"success": True, "count": count, "manifest": manifest, "scenarios": entries}
    except (OSError, ValueError) as e:
        return _failure(e)


def cmd_train(config_path: Optional[str], data: str, out: str, epochs: Optional[int] = None,
              seed: Optional[int] = None, threads: Optional[int] = None, log_path: Optional[str] = None,
              progress: bool = False) -> dict:
    """Treina sobre o diretório de cenários e grava checkpoint + log por época"""
    try:
        config = _run_config(config_path, epochs=epochs, seed=seed, threads=threads)
        model_config = config.model_config()
        train_config = config.train_config()
        scenarios = load_dataset(data)
        train_ids, val_ids = split_by_scenario([s[0] for s in scenarios], config.val_fraction, config.seed)
        train_scenarios = [s for s in scenarios if s[0] in set(train_ids)]
        val_scenarios = [s for s in scenarios if s[0] in set(val_ids)]

        rows = [window_state_rows(track, config.rho, config.tau)
                for _, _, tracks in train_scenarios for track in tracks]
        stats = compute_stats(np.concatenate(rows) if rows else np.empty((0, 5)))

        raster_cfg = config.raster_config()
        train_samples = _samples(train_scenarios, config, stats, config.rho, config.tau, raster_cfg, config.threads)
        val_samples = _samples(val_scenarios, config, stats, config.rho, config.tau, raster_cfg, config.threads)
        if not train_samples:
            raise ValueError(f"nenhuma amostra de treino em {data} (trilhas curtas demais ou fora do mapa)")

        log = TrainingLog(log_path or os.path.splitext(out)[0] + ".log")
        result = train(train_samples, val_samples, model_config, train_config, stats, log=log, progress=progress)
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        save_checkpoint(result.checkpoint.params, stats, model_config, out, result.checkpoint.training)
        return {
            "success": True,
            "checkpoint": out,
            "log": log.path,
            "train_samples": len(train_samples),
            "val_samples": len(val_samples),
            "best_epoch": result.best_epoch,
            "first_step_loss": result.first_step_loss,
            "training": result.checkpoint.training,
            "raster_cache": _log_cache_stats(),
        }
    except (OSError, ValueError) as e:
        return _failure(e)


def _check_compatible(checkpoint_config, config: RunConfig):
    actual = {"rho": checkpoint_config.rho, "tau": checkpoint_config.tau,
              "lambda_m": checkpoint_config.raster.lambda_m, "px_per_m": checkpoint_config.raster.px_per_m,
              "out_px": checkpoint_config.raster.out_px}
    for name in _COMPATIBLE_FIELDS:
        if actual[name] != getattr(config, name):
            raise ConfigError(f"{name}: checkpoint usa {actual[name]}, configuração usa {getattr(config, name)}")


def cmd_eval(data: str, report: str, ckpt: Optional[str] = None, baseline: Optional[str] = None,
             config_path: Optional[str] = None, threads: Optional[int] = None,
             include_reference: bool = False) -> dict:
    """Avalia um checkpoint ou baseline (cvh | oracle) e grava relatório JSON + tabela"""
    try:
        if (ckpt is None) == (baseline is None):
            raise ValueError("informe exatamente um de --ckpt ou --baseline")
        config = _run_config(config_path, threads=threads)
        scenarios = load_dataset(data)
        if ckpt:
            checkpoint = load_checkpoint(ckpt)
            if config_path:
                _check_compatible(checkpoint.config, config)
            model_config, stats = checkpoint.config, checkpoint.stats
            rho, tau, raster_cfg = model_config.rho, model_config.tau, model_config.raster
            predictor, model_id = model_predictor(checkpoint.params, model_config), os.path.basename(ckpt)
        else:
            if baseline not in ("cvh", "oracle"):
                raise ValueError(f"baseline desconhecido: {baseline}")
            rho, tau, raster_cfg = config.rho, config.tau, config.raster_config()
            rows = [window_state_rows(t, rho, tau) for _, _, tracks in scenarios for t in tracks]
            stats = compute_stats(np.concatenate(rows) if rows else np.empty((0, 5)))
            predictor, model_id = baseline, None

        samples = _samples(scenarios, config, stats, rho, tau, raster_cfg, config.threads)
        metrics = evaluate(predictor, samples, HORIZONS_S, model_id=model_id,
                           batch_size=config.batch_size, threads=config.threads)
        paths = write_reports([metrics], report, metadata={"data": data, "samples": len(samples),
                                                          "source": ckpt or baseline},
                              include_reference=include_reference)
        return {"success": True, "report": metrics.to_dict(), "raster_cache": _log_cache_stats(), **paths}
    except (OSError, ValueError) as e:
        return _failure(e)


def cmd_rasterize(data: str, scenario: str, agent: str, t: float, out: str,
                  config_path: Optional[str] = None) -> dict:
    """Grava as 5 camadas (PGM P5) do agente no instante t (segundos)"""
    try:
        config = _run_config(config_path)
        found = find_scenario(data, scenario)
        if found is None:
            raise ValueError(f"cenário desconhecido: {scenario}")
        vector_map, tracks = found
        track = next((tr for tr in tracks if tr.agent_id == agent), None)
        if track is None:
            raise ValueError(f"agente desconhecido em {scenario}: {agent}")
        state = next((s for s in track.states if abs(s.t - t) < 1e-6), None)
        if state is None:
            raise ValueError(f"{agent} não tem estado em t={t} s")
        stack = rasterize_chunk_stack(vector_map, state, track.length_m, track.width_m, config.raster_config())
        files = export_pgm(stack.layers, out, f"{scenario}_{agent}_t{t:g}")
        return {"success": True, "files": files}
    except (OSError, ValueError) as e:
        return _failure(e)


def cmd_inspect(ckpt: str) -> dict:
    try:
        summary = describe_checkpoint(load_checkpoint(ckpt))
        return {"success": True, **summary}
    except CheckpointError as e:
        return _failure(e)


def format_inspect(summary: dict) -> str:
    """Resumo texto do checkpoint"""
    lines = [f"versão: {summary['version']}", "config:"]
    lines += [f"  {k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(summary["config"].items())]
    lines.append("tensores:")
    lines += [f"  {t['name']:<28} {str(tuple(t['shape'])):<20} {t['size']:>10,}" for t in summary["tensors"]]
    lines.append(f"parâmetros (total): {summary['total_parameters']:,}")
    lines.append(f"parâmetros (backbone): {summary['backbone_parameters']:,}")
    lines.append(f"stats.mean: {summary['stats']['mean']}")
    lines.append(f"stats.std: {summary['stats']['std']}")
    if summary.get("training"):
        lines.append(f"treino: {json.dumps(summary['training'], sort_keys=True)}")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# argparse
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsule_predictor", description="Preditor de trajetórias com cápsulas")
    parser.add_argument("--threads", type=int, default=None, help="limite de workers (padrão: CAPSMAP_THREADS)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING...")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="gerar cenários sintéticos")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=",".join(SCENARIO_DEFAULTS["kinds"]))
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", default=os.getenv("CAPSMAP_DATA_DIR", "data"))
    p.add_argument("--agents", type=int, default=SCENARIO_DEFAULTS["n_agents"])
    p.add_argument("--steps", type=int, default=SCENARIO_DEFAULTS["track_steps"])

    p = sub.add_parser("train", help="treinar o modelo")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=os.getenv("CAPSMAP_DATA_DIR", "data"))
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--progress", action="store_true")

    p = sub.add_parser("eval", help="avaliar checkpoint ou baseline")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt")
    group.add_argument("--baseline", choices=["cvh", "oracle"])
    p.add_argument("--data", default=os.getenv("CAPSMAP_DATA_DIR", "data"))
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--reference", action="store_true", help="anexar linhas de referência publicadas")

    p = sub.add_parser("rasterize", help="exportar camadas PGM de um agente")
    p.add_argument("--data", default=os.getenv("CAPSMAP_DATA_DIR", "data"))
    p.add_argument("--scenario", required=True)
    p.add_argument("--agent", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("inspect", help="resumo de um checkpoint")
    p.add_argument("--ckpt", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    threads = args.threads or default_threads()

    if args.command == "generate":
        result = cmd_generate(args.seed, [k.strip() for k in args.kinds.split(",") if k.strip()],
                              args.count, args.out, args.agents, args.steps)
    elif args.command == "train":
        result = cmd_train(args.config, args.data, args.out, args.epochs, args.seed, threads,
                           args.log, args.progress)
    elif args.command == "eval":
        result = cmd_eval(args.data, args.report, args.ckpt, args.baseline, args.config, threads,
                          args.reference)
    elif args.command == "rasterize":
        result = cmd_rasterize(args.data, args.scenario, args.agent, args.t, args.out, args.config)
    else:
        result = cmd_inspect(args.ckpt)

    if not result["success"]:
        print(f"erro: {result['error']}", file=sys.stderr)
        return 1
    if args.command == "inspect":
        print(format_inspect(result))
    else:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0
