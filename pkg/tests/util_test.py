import pytest

from condnets.errors import ArgumentError
from condnets.util import config_hash, parse_float_list, parse_int_list


@pytest.mark.parametrize(
    "text, expected",
    [("1..4", [1, 2, 3, 4]), ("1,2,8", [1, 2, 8]), ("1..3, 8", [1, 2, 3, 8]), ("5", [5])],
)
def test_parse_int_list(text, expected):
    assert parse_int_list(text) == expected


@pytest.mark.parametrize("text", ["", "4..1", "a,b", "1..x"])
def test_parse_int_list_errors(text):
    with pytest.raises(ArgumentError):
        parse_int_list(text)


def test_parse_float_grid():
    grid = parse_float_list("0:1:11")
    assert len(grid) == 11
    assert grid[0] == 0.0 and grid[-1] == 1.0
    assert grid[5] == pytest.approx(0.5)


def test_parse_float_list():
    assert parse_float_list("0.1, 0.5") == [0.1, 0.5]
    assert parse_float_list("2:3:1") == [2.0]
    with pytest.raises(ArgumentError):
        parse_float_list("0:1:0")
    with pytest.raises(ArgumentError):
        parse_float_list("x")


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert len(config_hash({})) == 64
