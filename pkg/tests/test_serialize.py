"""Canonical serialization: float text, JSON, CSV."""

from __future__ import annotations

import dataclasses
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from collabdec.serialize import (NEG_INF_LITERAL, POS_INF_LITERAL, canon_csv,
                                 canon_dumps, format_float)


class TestFormatFloat:
    @pytest.mark.parametrize("x,text", [
        (2.0, "2.0"),
        (0.0, "0.0"),
        (-3.0, "-3.0"),
        (0.5, "0.5"),
        (1 / 3, "0.33333333333333331"),
        (float("inf"), "1e999"),
        (float("-inf"), "-1e999"),
    ])
    def test_pinned(self, x, text):
        assert format_float(x) == text

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            format_float(float("nan"))

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_round_trips_every_finite_double(self, x):
        assert float(format_float(x)) == x

    def test_inf_literals_parse_to_inf(self):
        # Stock json.loads overflows these literals to IEEE infinities —
        # the reason they are the wire encoding for unbounded log-probs.
        assert json.loads(NEG_INF_LITERAL) == float("-inf")
        assert json.loads(POS_INF_LITERAL) == float("inf")


class TestCanonDumps:
    def test_preserves_insertion_order(self):
        a = canon_dumps({"b": 1, "a": 2})
        assert a.index('"b"') < a.index('"a"')

    def test_identical_construction_identical_bytes(self):
        obj = {"x": [1, 2.5, None, True], "y": {"z": "s"}}
        assert canon_dumps(obj) == canon_dumps(
            {"x": [1, 2.5, None, True], "y": {"z": "s"}})

    def test_parses_as_json(self):
        obj = {"a": [1, 0.25, None, False, "t\nx"], "b": {}}
        assert json.loads(canon_dumps(obj)) == obj

    def test_floats_full_precision(self):
        x = 0.1 + 0.2
        assert json.loads(canon_dumps({"v": x}))["v"] == x

    def test_trailing_newline(self):
        assert canon_dumps({}).endswith("\n")

    def test_dataclasses_encode_as_objects(self):
        @dataclasses.dataclass
        class Point:
            x: int
            y: float

        assert json.loads(canon_dumps(Point(1, 2.5))) == {"x": 1, "y": 2.5}

    def test_non_string_keys_coerced(self):
        assert json.loads(canon_dumps({1: "a"})) == {"1": "a"}

    def test_infinity_needs_allow_inf(self):
        with pytest.raises(ValueError):
            canon_dumps({"v": float("-inf")})
        text = canon_dumps({"v": float("-inf")}, allow_inf=True)
        assert NEG_INF_LITERAL in text
        assert json.loads(text)["v"] == float("-inf")

    def test_unserializable_type_rejected(self):
        with pytest.raises(TypeError):
            canon_dumps({"v": object()})

    def test_control_characters_escaped(self):
        text = canon_dumps({"v": 'a"b\\c\nd\x01'})
        assert json.loads(text)["v"] == 'a"b\\c\nd\x01'
        assert "\\u0001" in text


class TestCanonCsv:
    def test_pinned_layout(self):
        rows = [
            {"i": 0, "m": "collab", "r": 0.5, "ok": True, "d": None},
            {"i": 1, "m": "a,b", "r": 1.0, "ok": False, "d": 2.0},
        ]
        got = canon_csv(rows, ["i", "m", "r", "ok", "d"])
        assert got == ('i,m,r,ok,d\n'
                       '0,collab,0.5,true,\n'
                       '1,"a,b",1.0,false,2.0\n')

    def test_missing_cell_is_empty(self):
        assert canon_csv([{"a": 1}], ["a", "b"]) == "a,b\n1,\n"

    def test_quote_escaping(self):
        got = canon_csv([{"a": 'say "hi"'}], ["a"])
        assert got == 'a\n"say ""hi"""\n'

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_float_cells_round_trip(self, x):
        body = canon_csv([{"v": x}], ["v"]).splitlines()[1]
        assert float(body) == x

    def test_infinite_float_cell(self):
        assert math.isinf(float(
            canon_csv([{"v": float("inf")}], ["v"]).splitlines()[1]))
