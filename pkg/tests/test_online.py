import logging

import numpy as np
import pytest

from src.data_processor import Sample
from src.modality import MaskSet, ModalityLayout, Normalizer
from src.model import GeMuCoModel, ParametricBias
from src.network import NetSpec, Weights
from src.online import ConstraintSet, OnlineBuffer, OnlineConfig, OnlineUpdater, offline_update, update


def _samples(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Sample(rng.normal(size=6), (True, True, True), "s") for _ in range(n)]


def _buffer(samples, capacity=50):
    buffer = OnlineBuffer(capacity)
    for sample in samples:
        buffer.push(sample)
    return buffer


def test_buffer_evicts_the_oldest_sample():
    samples = _samples(4)
    buffer = _buffer(samples, capacity=3)
    assert buffer.samples == samples[1:]


def test_buffer_holds_the_last_samples_in_arrival_order():
    samples = _samples(50, seed=1)
    buffer = _buffer(samples, capacity=7)
    assert len(buffer) == 7
    assert buffer.samples == samples[-7:]


def test_buffer_keeps_the_newest_samples_for_random_capacities():
    rng = np.random.default_rng(11)
    for _ in range(20):
        capacity = int(rng.integers(1, 12))
        samples = _samples(int(rng.integers(0, 40)), seed=int(rng.integers(1000)))
        buffer = _buffer(samples, capacity=capacity)
        assert len(buffer) == min(capacity, len(samples))
        assert buffer.samples == samples[-capacity:]


@pytest.mark.parametrize(
    "kwargs",
    [{"mode": "everything"}, {"min_start": 0}, {"min_start": 300, "buffer_capacity": 200}, {"steps_per_datum": 0}],
)
def test_online_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        OnlineConfig(**kwargs)


def test_no_update_below_min_start(toy_model):
    pb = ParametricBias([0.1, 0.2])
    model, new_pb = update(toy_model, pb, _buffer(_samples(3)), None, OnlineConfig(min_start=5, buffer_capacity=10))
    assert model is toy_model
    assert new_pb is pb


def test_below_min_start_warns(toy_model, caplog):
    with caplog.at_level(logging.WARNING, logger="src.online"):
        update(toy_model, ParametricBias([0.1, 0.2]), _buffer(_samples(3)), None, OnlineConfig(min_start=5, buffer_capacity=10))
    assert "not updating yet" in caplog.text


def test_updates_without_a_generator_continue_one_stream(toy_model):
    pb = ParametricBias([0.1, 0.2])
    buffer = _buffer(_samples(20))
    cfg = OnlineConfig(mode="p_only", min_start=5, seed=1234)

    _, first = update(toy_model, pb, buffer, None, cfg)
    _, second = update(toy_model, pb, buffer, None, cfg)

    assert not np.allclose(first.values, second.values)


def _shift_model():
    """v = u + p: a linear model whose parametric bias is the offset between u and v."""
    layout = ModalityLayout((("u", 1), ("v", 1)))
    normalizer = Normalizer({"u": np.zeros(1), "v": np.zeros(1)}, {"u": np.ones(1), "v": np.ones(1)})
    return GeMuCoModel(
        layout, layout.subset(["u"]), layout.subset(["v"]),
        NetSpec((3, 1)), Weights((np.array([[1.0, 0.0, 1.0]]),), (np.zeros(1),)),
        NetSpec((1, 1)), Weights((np.array([[1.0]]),), (np.zeros(1),)),
        pb_dim=1, latent_dim=1, normalizer=normalizer, feasible_masks=MaskSet([(1,)]),
    )


def test_p_only_updates_settle_on_the_offset():
    rng = np.random.default_rng(6)
    stream = [Sample(np.array([u, u + 0.5]), (True, True), "shifted") for u in rng.normal(size=30)]
    updater = OnlineUpdater(_shift_model(), ParametricBias.zeros(1, "shifted"), OnlineConfig(min_start=1, buffer_capacity=50))

    assert updater.observe_all(stream) == 30

    steps = np.linalg.norm(np.diff(np.array(updater.trajectory), axis=0), axis=1)
    assert steps[-10:].max() < 0.1 * steps.max()
    assert updater.pb.values[0] == pytest.approx(0.5, abs=0.01)


def test_p_only_keeps_the_weights(toy_model):
    pb = ParametricBias([0.1, 0.2])
    cfg = OnlineConfig(mode="p_only", min_start=5, steps_per_datum=3)

    model, new_pb = update(toy_model, pb, _buffer(_samples(20)), None, cfg)

    np.testing.assert_array_equal(model.enc_weights.flat(), toy_model.enc_weights.flat())
    np.testing.assert_array_equal(model.dec_weights.flat(), toy_model.dec_weights.flat())
    assert not np.array_equal(new_pb.values, pb.values)


def test_w_only_keeps_the_parametric_bias(toy_model):
    pb = ParametricBias([0.1, 0.2])
    cfg = OnlineConfig(mode="w_only", min_start=5, steps_per_datum=3)

    model, new_pb = update(toy_model, pb, _buffer(_samples(20)), None, cfg)

    np.testing.assert_array_equal(new_pb.values, pb.values)
    assert not np.array_equal(model.enc_weights.flat(), toy_model.enc_weights.flat())


def test_both_updates_weights_and_parametric_bias(toy_model):
    pb = ParametricBias([0.1, 0.2])
    model, new_pb = update(toy_model, pb, _buffer(_samples(20)), None, OnlineConfig(mode="both", min_start=5))

    assert not np.array_equal(new_pb.values, pb.values)
    assert not np.array_equal(model.dec_weights.flat(), toy_model.dec_weights.flat())


def test_constraints_join_every_update_batch(toy_model):
    pb = ParametricBias([0.0, 0.0])
    cfg = OnlineConfig(mode="p_only", min_start=1, buffer_capacity=5)
    buffer = _buffer(_samples(1))
    constraints = ConstraintSet(_samples(10, seed=9))

    _, plain = update(toy_model, pb, buffer, None, cfg, np.random.default_rng(0))
    _, constrained = update(toy_model, pb, buffer, constraints, cfg, np.random.default_rng(0))

    assert len(constraints) == 10
    assert not np.allclose(plain.values, constrained.values)


def test_constraint_samples_must_fit_the_layout(toy_model):
    with pytest.raises(ValueError):
        OnlineUpdater(toy_model, ParametricBias([0.0, 0.0]), constraints=ConstraintSet([Sample([1.0], (True,), "s")]))


def test_updater_records_one_pb_per_update(toy_model):
    updater = OnlineUpdater(toy_model, ParametricBias([0.0, 0.0], "start"), OnlineConfig(min_start=4, buffer_capacity=10))

    count = updater.observe_all(_samples(12))

    assert count == 9
    assert updater.updates == 9
    assert len(updater.buffer) == 10
    frame = updater.trajectory_frame()
    assert list(frame.columns) == ["update", "pb_0", "pb_1"]
    assert len(frame) == 10
    np.testing.assert_array_equal(frame.iloc[0][["pb_0", "pb_1"]].to_numpy(dtype=float), [0.0, 0.0])
    model, pb = updater.snapshot()
    assert pb.label == "start"
    assert model is updater.model


def test_offline_update_runs_every_pass_and_keeps_mode(toy_model):
    pb = ParametricBias([0.3, -0.3])
    model, new_pb, history = offline_update(toy_model, pb, _samples(30), OnlineConfig(mode="p_only"), passes=12)

    assert len(history) == 12
    np.testing.assert_array_equal(model.enc_weights.flat(), toy_model.enc_weights.flat())
    assert not np.array_equal(new_pb.values, pb.values)


def test_offline_update_needs_samples(toy_model):
    with pytest.raises(ValueError):
        offline_update(toy_model, ParametricBias([0.0, 0.0]), [], OnlineConfig())
