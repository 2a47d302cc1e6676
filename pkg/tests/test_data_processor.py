import numpy as np
import pandas as pd
import pytest

from src.data_processor import Dataset, Episode, Sample, SampleDataProcessor, write_trace
from src.modality import ModalityLayout

LAYOUT = ModalityLayout((("theta", 2), ("x_tool", 1)))


def _episode(state_id, n, start=0.0):
    return Episode(state_id, [Sample([start + i, -(start + i), 10.0 * i], (True, True), state_id) for i in range(n)])


def test_sample_check_rejects_wrong_size_and_nan_in_available_group():
    with pytest.raises(ValueError):
        Sample([1.0, 2.0], (True, True), "s").check(LAYOUT)
    with pytest.raises(ValueError):
        Sample([1.0, np.nan, 3.0], (True, True), "s").check(LAYOUT)
    # non-finite values are fine where the group is not available
    Sample([1.0, 2.0, np.nan], (True, False), "s").check(LAYOUT)


def test_with_availability_zeroes_hidden_groups():
    sample = Sample([1.0, 2.0, 3.0], (True, True), "s").with_availability(LAYOUT, (True, False))
    assert sample.available == (True, False)
    np.testing.assert_array_equal(sample.values, [1.0, 2.0, 0.0])


def test_episode_rejects_empty_and_foreign_samples():
    with pytest.raises(ValueError):
        Episode("s", [])
    with pytest.raises(ValueError):
        Episode("s", [Sample([0.0, 0.0, 0.0], (True, True), "other")])


def test_split_keeps_every_state_on_both_sides():
    dataset = Dataset(LAYOUT, [_episode("a", 10), _episode("b", 5, start=100.0)])

    train, evaluation = dataset.split(0.2)

    assert train.state_ids == ["a", "b"]
    assert [len(e) for e in train.episodes] == [8, 4]
    assert [len(e) for e in evaluation.episodes] == [2, 1]
    # the evaluation part is the tail of each episode
    assert evaluation.episodes[0].samples[0].values[0] == 8.0


def test_split_rejects_too_short_episode():
    with pytest.raises(ValueError):
        Dataset(LAYOUT, [_episode("a", 2)]).split(0.2)


def test_arrays_index_states_in_episode_order():
    dataset = Dataset(LAYOUT, [_episode("a", 2), _episode("b", 3)])
    values, available, states = dataset.arrays()
    assert values.shape == (5, 3)
    assert available.all()
    np.testing.assert_array_equal(states, [0, 0, 1, 1, 1])


def test_merged_joins_samples_of_the_same_state():
    merged = Dataset(LAYOUT, [_episode("a", 2)]).merged(Dataset(LAYOUT, [_episode("a", 3), _episode("b", 1)]))
    assert merged.state_ids == ["a", "b"]
    assert len(merged.episodes[0]) == 5


def test_csv_round_trip_keeps_values_and_availability(tmp_path):
    hidden = Sample([0.25, -1.5, 0.0], (True, False), "a")
    dataset = Dataset(LAYOUT, [Episode("a", [_episode("a", 1).samples[0], hidden]), _episode("b", 2, start=0.1)])
    processor = SampleDataProcessor()
    path = tmp_path / "samples.csv"

    processor.write_csv(dataset, path)
    df = pd.read_csv(path)
    loaded = processor.read_csv(path)

    assert list(df.columns) == ["state_id", "avail_theta", "avail_x_tool", "theta_0", "theta_1", "x_tool_0"]
    assert np.isnan(df.loc[1, "x_tool_0"])
    assert loaded.layout == LAYOUT
    assert loaded.state_ids == ["a", "b"]
    original_values, original_available, _ = dataset.arrays()
    values, available, _ = loaded.arrays()
    np.testing.assert_array_equal(values, original_values)
    np.testing.assert_array_equal(available, original_available)


def test_read_csv_string_detects_layout():
    csv_content = "state_id,avail_f,avail_l,f_0,f_1,l_0\ns1,1,0,1.5,2.5,\ns1,1,1,3.0,4.0,7.0\n"
    dataset = SampleDataProcessor().read_csv_string(csv_content)

    assert dataset.layout.groups == (("f", 2), ("l", 1))
    assert dataset.samples[0].available == (True, False)
    np.testing.assert_array_equal(dataset.samples[0].values, [1.5, 2.5, 0.0])


def test_read_csv_string_missing_state_column_raises():
    with pytest.raises(ValueError, match="state_id"):
        SampleDataProcessor().read_csv_string("avail_f,f_0\n1,2.0\n")


def test_read_csv_string_group_without_values_raises():
    with pytest.raises(ValueError, match="no value columns"):
        SampleDataProcessor().read_csv_string("state_id,avail_f,avail_g,f_0\ns,1,1,2.0\n")


def test_write_trace_writes_flat_records(tmp_path):
    target = tmp_path / "trace.csv"
    df = write_trace(({"iteration": k, "loss": 1.0 / (k + 1)} for k in range(3)), target)
    assert list(df.columns) == ["iteration", "loss"]
    assert pd.read_csv(target)["loss"].iloc[-1] == pytest.approx(1.0 / 3)
