import json
import threading

import numpy as np
import pytest

from conftest import TINY_RASTER
from modules.config import ConfigError, RunConfig, default_threads, raster_cache_items
from modules.host_metrics import get_host_snapshot, physical_cores
from modules.mapmodel import build_dataset, build_samples, compute_stats, generate_scenario, window_state_rows
from modules.numcore import default_dtype, get_default_dtype
from modules.raster_cache import RasterCache
from modules.scenario_store import find_scenario, load_dataset, load_manifest, save_generated, write_manifest
from modules.worker_pool import run_ordered


def test_scenario_store_round_trip(tmp_path):
    entries = []
    for i, kind in enumerate(["straight", "curve"]):
        vmap, tracks = generate_scenario(i, kind, 2)
        entries.append(save_generated(str(tmp_path), i, i, kind, 2, vmap, tracks))
    write_manifest(str(tmp_path), entries)
    assert load_manifest(str(tmp_path)) == entries
    dataset = load_dataset(str(tmp_path))
    assert [sid for sid, _, _ in dataset] == ["scenario_0000", "scenario_0001"]
    assert find_scenario(str(tmp_path), "scenario_0007") is None
    _, tracks = find_scenario(str(tmp_path), "scenario_0001")
    assert [t.agent_id for t in tracks] == ["agent-00", "agent-01"]
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["version"] == 1


def test_directory_without_manifest_lists_json_files(tmp_path):
    vmap, tracks = generate_scenario(1, "straight", 1)
    save_generated(str(tmp_path), 3, 1, "straight", 1, vmap, tracks)
    assert load_manifest(str(tmp_path)) == [{"id": "scenario_0003", "file": "scenario_0003.json"}]


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        load_dataset(str(tmp_path / "missing"))
    with pytest.raises(ValueError):
        load_dataset(str(tmp_path))


def test_raster_cache_lru_and_stats():
    cache = RasterCache(max_items=2)
    cache.set("a", 1)
    cache.set("b", 2)
    assert cache.get("a") == 1
    cache.set("c", 3)
    assert cache.get("b") is None
    assert cache.get("c") == 3
    stats = cache.get_stats()
    assert stats["items"] == 2 and stats["hits"] == 2 and stats["misses"] == 1
    cache.clear()
    assert cache.get_stats()["items"] == 0


def test_build_samples_reuses_cached_rasters():
    vmap, tracks = generate_scenario(4, "curve", 1)
    stats = compute_stats(window_state_rows(tracks[0], 2, 4))
    cache = RasterCache()
    first = build_samples(vmap, tracks[0], 2, 4, stats, TINY_RASTER, "s", cache)
    misses = cache.get_stats()["misses"]
    second = build_samples(vmap, tracks[0], 2, 4, stats, TINY_RASTER, "s", cache)
    assert cache.get_stats()["misses"] == misses
    assert cache.get_stats()["hits"] > 0
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.chunks, b.chunks)


def test_shared_cache_never_mixes_scenarios_with_the_same_id():
    cache = RasterCache()
    first_map, first_tracks = generate_scenario(1, "curve", 1)
    second_map, second_tracks = generate_scenario(2, "curve", 1)
    stats = compute_stats(window_state_rows(second_tracks[0], 2, 4))
    build_dataset([("scenario_0000", first_map, first_tracks)], 2, 4, stats, TINY_RASTER, cache=cache)
    cached = build_dataset([("scenario_0000", second_map, second_tracks)], 2, 4, stats, TINY_RASTER, cache=cache)
    fresh = build_dataset([("scenario_0000", second_map, second_tracks)], 2, 4, stats, TINY_RASTER)
    assert len(cached) == len(fresh) > 0
    for a, b in zip(cached, fresh):
        np.testing.assert_array_equal(a.chunks, b.chunks)


def test_run_ordered_keeps_order_and_dtype():
    seen = []

    def work(i):
        seen.append(threading.current_thread().name)
        return i * i, get_default_dtype()

    with default_dtype(np.float64):
        results = run_ordered(work, range(20), threads=4)
    assert [r[0] for r in results] == [i * i for i in range(20)]
    assert all(r[1] == np.float64 for r in results)
    assert run_ordered(lambda i: i + 1, [], threads=3) == []


def test_run_config_defaults_and_validation(tmp_path):
    config = RunConfig().validate()
    assert (config.rho, config.tau, config.out_px, config.epochs) == (5, 12, 64, 70)
    assert config.model_config().raster.native_px == 60
    assert config.train_config().decay_epochs == (5, 20)
    with pytest.raises(ConfigError, match="selection_horizon_s"):
        RunConfig(tau=6).validate()
    with pytest.raises(ConfigError, match="layer_order"):
        RunConfig(layer_order=["lane"]).validate()
    with pytest.raises(ConfigError, match="data_dir"):
        RunConfig.from_dict({"data_dir": "data"})
    path = tmp_path / "config.json"
    path.write_text("{\n  \"rho\": 3,\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="linha"):
        RunConfig.from_file(str(path))
    path.write_text(json.dumps({"rho": 3, "tau": 8}), encoding="utf-8")
    assert RunConfig.from_file(str(path)).rho == 3


def test_thread_defaults(monkeypatch):
    monkeypatch.setenv("CAPSMAP_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("CAPSMAP_THREADS", "")
    assert default_threads() == physical_cores() >= 1


def test_raster_cache_capacity_from_environment(monkeypatch):
    monkeypatch.setenv("CAPSMAP_RASTER_CACHE_ITEMS", "")
    assert raster_cache_items() == 2000
    monkeypatch.setenv("CAPSMAP_RASTER_CACHE_ITEMS", "64")
    assert raster_cache_items() == 64
    assert RasterCache(max_items=raster_cache_items()).get_stats()["memory_usage_mb"] == 0.0


def test_host_snapshot():
    snapshot = get_host_snapshot()
    assert snapshot["success"]
    assert snapshot["cpu"]["cores_physical"] >= 1
    assert snapshot["memory"]["status"] in ("ok", "warning", "critical")
