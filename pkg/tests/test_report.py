import json
import math
from fractions import Fraction

import numpy as np
from hypothesis import given, strategies as st

from morphkit.report import csv_text, dumps


class TestDumps:
    def test_floats_have_17_digits(self):
        assert dumps({"x": 0.1}) == '{\n  "x": 0.10000000000000001\n}\n'

    def test_integral_floats_keep_point(self):
        assert json.loads(dumps([5.0, 3])) == [5.0, 3]
        assert dumps([5.0, 3]) == "[5.0, 3]\n"

    def test_non_finite_become_null(self):
        assert json.loads(dumps({"a": math.nan, "b": math.inf})) == {"a": None, "b": None}

    def test_numpy_and_fractions(self):
        out = json.loads(dumps({"a": np.float64(1.5), "b": np.int64(3), "c": np.array([1.0, 2.0]),
                                "d": Fraction(1, 4), "e": np.bool_(True), "f": (1, 2)}))
        assert out == {"a": 1.5, "b": 3, "c": [1.0, 2.0], "d": 0.25, "e": True, "f": [1, 2]}

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_round_trip_exact(self, x):
        assert json.loads(dumps([x]))[0] == x

    def test_nested_layout_stable(self):
        obj = {"b": [{"x": 1}, {"y": [1.0, 2.0]}], "a": {}}
        assert dumps(obj) == dumps(json.loads(dumps(obj)))


def test_csv_text():
    assert csv_text(["a", "b"], [("x", 0.5), ("y", 2.0)]) == "a,b\nx,0.5\ny,2.0\n"
