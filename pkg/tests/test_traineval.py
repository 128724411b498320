import numpy as np
import pytest

from conftest import TINY_RASTER, make_samples, straight_track, tiny_model_config
from modules.config import ConfigError
from modules.mapmodel import AgentState, Sample, Track, VectorMap, build_samples, compute_stats, window_state_rows
from modules.numcore import ShapeError, Tensor
from modules.physics import baseline_cvh, physics_oracle
from modules.seqmodel import PredictorParams, checkpoint_bytes, forward_batch
from modules.traineval import (
    HORIZONS_S, MetricsReport, TrainConfig, ade_fde, evaluate, loss, lr_schedule, model_predictor,
    split_by_scenario, train,
)


@pytest.fixture(scope="module")
def samples_and_stats():
    return make_samples(rho=2, tau=4)


def straight_samples(tau: int = 12):
    track = straight_track(n=20)
    stats = compute_stats(window_state_rows(track, 2, tau))
    return build_samples(VectorMap(), track, 2, tau, stats, TINY_RASTER, "reta")


def quick_config(**overrides) -> TrainConfig:
    values = dict(epochs=3, lr=1e-2, decay_epochs=(), batch_size=4, val_fraction=0.0, selection_horizon_s=2)
    values.update(overrides)
    return TrainConfig(**values)


def test_loss_examples():
    pred = Tensor(np.array([[3.0, 4.0]]))
    assert float(loss(pred, np.zeros((1, 2))).data) == pytest.approx(16.0)
    assert float(loss(pred, np.zeros((1, 2)), alpha=1.0, beta=0.0).data) == pytest.approx(3.5)
    assert float(loss(pred, np.zeros((1, 2)), alpha=0.0, beta=1.0).data) == pytest.approx(12.5)
    assert float(loss(pred, pred.data.copy()).data) == 0.0


def test_loss_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        loss(Tensor(np.zeros((4, 2))), np.zeros((3, 2)))


@pytest.mark.parametrize("epoch, expected", [(0, 5e-4), (4, 5e-4), (5, 5e-5), (19, 5e-5), (20, 5e-6), (69, 5e-6)])
def test_lr_schedule(epoch, expected):
    assert lr_schedule(epoch, TrainConfig()) == expected


def test_lr_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_schedule(-1, TrainConfig())


@pytest.mark.parametrize("overrides", [
    {"decay_epochs": (20, 5)}, {"alpha": 0.0, "beta": 0.0}, {"alpha": -1.0}, {"epochs": 0},
    {"batch_size": 0}, {"lr": 0.0}, {"threads": 0},
])
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_split_by_scenario():
    ids = [f"scenario_{i:04d}" for i in range(10)] * 3
    train_ids, val_ids = split_by_scenario(ids, 0.1, seed=0)
    assert len(val_ids) == 1 and len(train_ids) == 9
    assert not set(train_ids) & set(val_ids)
    assert split_by_scenario(ids, 0.1, seed=0) == (train_ids, val_ids)
    assert split_by_scenario(ids, 0.0, seed=0) == (sorted(set(ids)), [])
    assert split_by_scenario(["only"], 0.5, seed=0) == (["only"], [])
    assert len(split_by_scenario(["a", "b"], 0.01, seed=1)[1]) == 1
    with pytest.raises(ValueError):
        split_by_scenario([], 0.1, seed=0)


def test_ade_fde_example():
    pred = np.array([[1.0, 0.0], [2.0, 0.0]])
    truth = np.array([[1.0, 1.0], [2.0, 2.0]])
    assert ade_fde(pred, truth, horizons=[1]) == {1: (1.5, 2.0)}
    assert ade_fde(truth, truth, horizons=[1]) == {1: (0.0, 0.0)}


def test_ade_fde_errors():
    with pytest.raises(ValueError):
        ade_fde(np.zeros((2, 2)), np.zeros((2, 2)), horizons=[2])
    with pytest.raises(ShapeError):
        ade_fde(np.zeros((2, 2)), np.zeros((3, 2)), horizons=[1])


def test_ade_fde_all_horizons():
    truth = np.zeros((12, 2))
    pred = np.stack([np.arange(1, 13, dtype=float), np.zeros(12)], axis=1)
    row = ade_fde(pred, truth)
    assert list(row) == list(HORIZONS_S)
    assert row[6] == (6.5, 12.0)
    assert row[3] == (3.5, 6.0)


def test_evaluate_perfect_predictor(samples_and_stats):
    samples, _ = samples_and_stats
    report = evaluate(lambda batch: np.stack([s.target for s in batch]), samples, horizons=[1, 2])
    assert report.model == "model" and report.count == len(samples)
    assert all(report.ade[h] == 0.0 and report.fde[h] == 0.0 for h in (1, 2))


def test_cvh_on_straight_constant_speed_is_exact():
    report = evaluate("cvh", straight_samples())
    assert report.model == "Const. Vel. & Head."
    assert report.horizons == list(HORIZONS_S)
    assert max(report.ade.values()) < 1e-9 and max(report.fde.values()) < 1e-9


def test_oracle_dominates_cvh_over_the_full_horizon(samples_and_stats):
    samples, _ = samples_and_stats
    cvh = evaluate("cvh", samples, horizons=[1, 2])
    oracle = evaluate("oracle", samples, horizons=[1, 2])
    assert oracle.model == "Physics Oracle"
    # tau = 4: o horizonte de 2 s cobre todo o rollout
    assert oracle.ade[2] <= cvh.ade[2]
    for s in samples:
        _, best = physics_oracle(s.observed, 4, s.target)
        assert np.linalg.norm(best - s.target, axis=1).sum() <= \
            np.linalg.norm(baseline_cvh(s.last_state, 4) - s.target, axis=1).sum()


def single_state_sample(state: AgentState, target: np.ndarray) -> Sample:
    tau = target.shape[0]
    return Sample(state=np.zeros((1, 5), dtype=np.float32), raw_state=state.features()[None, :],
                  chunk_origins=state.position[None, :], chunks=np.zeros((1, 5, 16, 16), dtype=np.float32),
                  target=target, observed=(state,), out_of_map=True, scenario_id="s", agent_id="a", step=tau)


def test_oracle_scores_one_rollout_per_sample():
    # verdade segue CV&H nos dois primeiros passos e CA&H depois: o membro escolhido é CA&H
    state = AgentState(0.0, 0.0, 0.0, 5.0, 0.0, 2.0, 0.0, 0.0)
    target = np.array([[2.5, 0.0], [5.0, 0.0], [9.75, 0.0], [14.0, 0.0]])
    assert physics_oracle(state, 4, target)[0] == "cah"
    report = evaluate("oracle", [single_state_sample(state, target)], horizons=[1, 2])
    assert report.ade[1] == pytest.approx(0.625)
    assert report.fde[1] == pytest.approx(1.0)
    assert report.ade[2] == pytest.approx(0.3125)
    assert report.fde[2] == pytest.approx(0.0, abs=1e-12)


def circle_track(n: int = 20, radius: float = 25.0, speed: float = 5.0) -> Track:
    omega = speed / radius
    states = []
    for k in range(n):
        t = 0.5 * k
        phi = omega * t
        states.append(AgentState(t, radius * np.sin(phi), radius * (1 - np.cos(phi)),
                                 speed * np.cos(phi), speed * np.sin(phi),
                                 -speed * omega * np.sin(phi), speed * omega * np.cos(phi), phi))
    return Track("arco", tuple(states), 4.5, 1.9)


def accelerating_track(n: int = 20, speed: float = 3.0, accel: float = 1.0) -> Track:
    states = tuple(AgentState(0.5 * k, speed * 0.5 * k + 0.5 * accel * (0.5 * k) ** 2, 0.0,
                              speed + accel * 0.5 * k, 0.0, accel, 0.0, 0.0) for k in range(n))
    return Track("acelera", states, 4.5, 1.9)


@pytest.mark.parametrize("baseline", ["cvh", "oracle"])
@pytest.mark.parametrize("make_track", [circle_track, accelerating_track])
def test_physics_ade_is_nondecreasing_in_horizon(baseline, make_track):
    track = make_track()
    stats = compute_stats(window_state_rows(track, 2, 12))
    samples = build_samples(VectorMap(), track, 2, 12, stats, TINY_RASTER, "suave")
    report = evaluate(baseline, samples)
    ade = [report.ade[h] for h in HORIZONS_S]
    assert all(b >= a - 1e-9 for a, b in zip(ade, ade[1:]))


def test_evaluate_is_thread_independent(samples_and_stats):
    samples, _ = samples_and_stats
    serial = evaluate("oracle", samples, horizons=[1, 2], threads=1)
    parallel = evaluate("oracle", samples, horizons=[1, 2], threads=3)
    assert serial.to_dict() == parallel.to_dict()


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate("cvh", [])


def test_metrics_report_dict_round_trip():
    report = MetricsReport("x", [1, 2], {1: 0.5, 2: 1.0}, {1: 0.7, 2: 2.0}, 10, {"note": "ok"})
    data = report.to_dict()
    assert data["ade"] == {"1": 0.5, "2": 1.0}
    assert MetricsReport.from_dict(data) == report


def test_training_reduces_loss(samples_and_stats):
    samples, stats = samples_and_stats
    result = train(samples[:8], [], tiny_model_config(), quick_config(epochs=10), stats)
    entries = result.log.entries()
    assert len(entries) == 10
    assert entries[-1]["train_loss"] < entries[0]["train_loss"]
    assert result.first_step_loss > 0
    assert result.best_epoch == 9
    assert result.checkpoint.training["epochs"] == 10


def test_first_step_loss_is_untrained_batch_loss(samples_and_stats):
    samples, stats = samples_and_stats
    config, model_config = quick_config(epochs=1), tiny_model_config()
    order = np.random.default_rng(config.seed).permutation(8)
    batch = [samples[i] for i in order[:config.batch_size]]
    untrained = PredictorParams.init(model_config, seed=config.seed)
    expected = loss(forward_batch(batch, untrained, model_config), np.stack([s.target for s in batch]),
                    config.alpha, config.beta)
    result = train(samples[:8], [], model_config, config, stats)
    assert result.first_step_loss == pytest.approx(float(expected.data), rel=1e-6)


def test_training_survives_nan_validation(samples_and_stats, monkeypatch):
    samples, stats = samples_and_stats
    config = quick_config(epochs=3)

    def nan_report(predictor, val_samples, horizons, **kwargs):
        return MetricsReport("val", list(horizons), {h: float("nan") for h in horizons},
                             {h: float("nan") for h in horizons}, len(val_samples))

    monkeypatch.setattr("modules.traineval.evaluate", nan_report)
    result = train(samples[:4], samples[4:6], tiny_model_config(), config, stats)
    assert result.best_epoch == 0
    assert [e["best"] for e in result.log.entries()] == [True, False, False]


def test_training_is_deterministic(samples_and_stats):
    samples, stats = samples_and_stats
    config = quick_config(epochs=2, threads=2, seed=3)
    a = train(samples[:6], [], tiny_model_config(), config, stats)
    b = train(samples[:6], [], tiny_model_config(), config, stats)
    ckpt_a, ckpt_b = a.checkpoint, b.checkpoint
    assert checkpoint_bytes(ckpt_a.params, stats, ckpt_a.config, ckpt_a.training) == \
        checkpoint_bytes(ckpt_b.params, stats, ckpt_b.config, ckpt_b.training)


def test_training_keeps_best_validation_epoch(samples_and_stats):
    samples, stats = samples_and_stats
    train_set = [s for s in samples if s.scenario_id != "s2"][:8]
    val_set = [s for s in samples if s.scenario_id == "s2"][:4]
    config = quick_config(epochs=4)
    model_config = tiny_model_config()
    result = train(train_set, val_set, model_config, config, stats)
    entries = result.log.entries()
    best = min(e["val_ade4"] for e in entries)
    assert entries[result.best_epoch]["val_ade4"] == best
    report = evaluate(model_predictor(result.checkpoint.params, model_config), val_set, horizons=[2],
                      batch_size=config.batch_size)
    assert report.ade[2] == pytest.approx(best, rel=1e-6)


def test_train_rejects_empty_set(samples_and_stats):
    _, stats = samples_and_stats
    with pytest.raises(ValueError):
        train([], [], tiny_model_config(), quick_config(), stats)


def test_train_uses_given_parameters(samples_and_stats):
    samples, stats = samples_and_stats
    params = PredictorParams.init(tiny_model_config(), seed=42)
    before = forward_batch(samples[:2], params, tiny_model_config()).data.copy()
    result = train(samples[:4], [], tiny_model_config(), quick_config(epochs=1), stats, params=params)
    assert result.checkpoint.params is params
    assert not np.array_equal(before, forward_batch(samples[:2], params, tiny_model_config()).data)


@pytest.mark.slow
def test_overfits_eight_samples(samples_and_stats):
    samples, stats = samples_and_stats
    config = quick_config(epochs=500, lr=1e-2, decay_epochs=(300,), batch_size=8)
    model_config = tiny_model_config()
    result = train(samples[:8], [], model_config, config, stats)
    report = evaluate(model_predictor(result.checkpoint.params, model_config), samples[:8], horizons=[2])
    assert report.ade[2] < 0.1
