import numpy as np
import pytest

from core.errors import ShapeError
from core.fields import Grid
from core.io import dump_field, format_value, read_csv, read_field, sha256_file, write_csv


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(True) == "1"
    assert format_value(np.int64(3)) == "3"
    assert format_value("x") == "x"


def test_csv_layout(tmp_path):
    path = write_csv(tmp_path / "out" / "table.csv", "units: none", ("a", "b"), [(1, 0.5), (2, 0.25)])
    assert path.read_text().splitlines() == ["# units: none", "a,b", "1,0.5", "2,0.25"]
    comment, columns, rows = read_csv(path)
    assert comment == "units: none"
    assert columns == ["a", "b"]
    assert rows == [["1", "0.5"], ["2", "0.25"]]


def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ShapeError):
        write_csv(tmp_path / "t.csv", "c", ("a", "b"), [(1,)])


def test_field_dump_layout(tmp_path):
    grid = Grid((4, 6), (True, False), (1.0, 2.0), (0.0, -1.0), ("base", "base"))
    values = np.arange(24).reshape(4, 6) * (1 + 2j)
    bin_path, json_path = dump_field(tmp_path / "phi", values, grid, {"t": 0.5})
    assert bin_path.stat().st_size == 24 * 16
    raw = np.fromfile(bin_path, dtype="<f8")
    assert raw[2] == 1.0 and raw[3] == 2.0
    loaded, meta = read_field(tmp_path / "phi")
    np.testing.assert_array_equal(loaded, values)
    assert meta["grid"]["periodic"] == [True, False]
    assert meta["t"] == 0.5
    assert sha256_file(bin_path) == sha256_file(bin_path)
