import json

import numpy as np
import pytest

from terminator.exporter import channel_sum_map, read_csv, read_pgm, to_gray, write_csv, write_json, write_pgm


def test_write_json_sorted_and_creates_parents(tmp_path):
    path = tmp_path / "nested" / "out.json"
    write_json(path, {"b": 1, "a": [1, 2]})
    text = path.read_text(encoding="utf-8")
    assert json.loads(text) == {"a": [1, 2], "b": 1}
    assert text.index('"a"') < text.index('"b"')


def test_write_csv_fills_missing_fields(tmp_path):
    path = tmp_path / "rows.csv"
    write_csv(path, ["name", "value"], [{"name": "x", "value": 1}, {"name": "y"}])
    assert read_csv(path) == [{"name": "x", "value": "1"}, {"name": "y", "value": ""}]


def test_channel_sum_map_shapes():
    assert channel_sum_map(np.ones((1, 3, 4, 5))).shape == (4, 5)
    assert np.all(channel_sum_map(np.ones((1, 3, 4, 5))) == 3.0)
    assert channel_sum_map(np.ones((1, 2, 16))).shape == (4, 4)
    assert channel_sum_map(np.ones((1, 2, 10))).shape == (1, 10)
    with pytest.raises(ValueError):
        channel_sum_map(np.ones((3, 4)))


def test_to_gray_scales_and_handles_constants():
    gray = to_gray(np.array([[0.0, 0.5], [1.0, 0.25]]))
    assert gray.dtype == np.uint8
    assert gray.min() == 0 and gray.max() == 255
    assert np.all(to_gray(np.full((2, 2), 3.0)) == 0)


def test_pgm_round_trip(tmp_path):
    image = np.arange(12.0).reshape(3, 4)
    path = write_pgm(tmp_path / "img.pgm", image)
    assert open(path, "rb").read(2) == b"P5"
    assert np.array_equal(read_pgm(path), to_gray(image))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.ones(4))
