import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advae.conditional import EXPRESSIONS, ConditionalVector, one_hot
from advae.errors import ConfigurationError, ShapeError
from advae.labeling import ATTRIBUTE_NAMES


def make_vector(attrs, expr_idx, valence=0.0, arousal=0.0):
    return ConditionalVector(
        attributes=np.asarray(attrs, dtype=np.float32),
        expression=one_hot(expr_idx, len(EXPRESSIONS)),
        valence=valence,
        arousal=arousal,
    )


def test_layout_constants():
    assert len(EXPRESSIONS) == 8
    assert EXPRESSIONS[0] == "neutral"
    assert len(ATTRIBUTE_NAMES) == 12
    v = make_vector([0] * 12, 1)
    assert v.length == 12 + 8 + 2


def test_to_array_layout_order():
    v = make_vector([1] + [0] * 11, 2, valence=0.5, arousal=-0.25)
    arr = v.to_array()
    assert arr.dtype == np.float32
    assert arr.shape == (22,)
    assert arr[0] == 1 and arr[1:12].sum() == 0
    assert arr[12 + 2] == 1 and arr[12:20].sum() == 1
    assert arr[20] == pytest.approx(0.5) and arr[21] == pytest.approx(-0.25)


def test_from_array_round_trip():
    v = make_vector([0, 1] * 6, 4, valence=-1.0, arousal=1.0)
    v2 = ConditionalVector.from_array(v.to_array(), 12, 8)
    assert v2 == v


def test_from_array_rejects_wrong_length():
    with pytest.raises(ConfigurationError):
        ConditionalVector.from_array(np.zeros(21, dtype=np.float32), 12, 8)


def test_json_round_trip():
    v = make_vector([1] * 12, 7, valence=0.125, arousal=0.0)
    v2 = ConditionalVector.from_json_dict(v.to_json_dict())
    assert v2 == v
    with pytest.raises(ConfigurationError):
        ConditionalVector.from_json_dict(
            {"attributes": [0] * 12, "expression": "smirk", "valence": 0, "arousal": 0}
        )


def test_expression_index_and_name():
    v = make_vector([0] * 12, 5)
    assert v.expression_index == 5
    assert v.expression_name() == "fear"


def test_validate_rejects_bad_vectors():
    make_vector([0] * 12, 0).validate()
    with pytest.raises(ConfigurationError):
        ConditionalVector(
            attributes=np.zeros(12, dtype=np.float32),
            expression=np.zeros(8, dtype=np.float32),  # no expression set
            valence=0.0,
            arousal=0.0,
        ).validate()
    with pytest.raises(ConfigurationError):
        make_vector([0.5] + [0] * 11, 0).validate()  # non-binary attribute
    with pytest.raises(ConfigurationError):
        make_vector([0] * 12, 0, valence=1.5).validate()  # out of range


def test_one_hot():
    v = one_hot(2, 5)
    assert np.array_equal(v, np.array([0, 0, 1, 0, 0], dtype=np.float32))
    with pytest.raises(ShapeError):
        one_hot(5, 5)
    with pytest.raises(ShapeError):
        one_hot(-1, 5)


@settings(max_examples=30, deadline=None)
@given(
    attrs=st.lists(st.sampled_from([0, 1]), min_size=12, max_size=12),
    expr=st.integers(min_value=0, max_value=7),
    valence=st.floats(min_value=-1, max_value=1, allow_nan=False, width=32),
    arousal=st.floats(min_value=-1, max_value=1, allow_nan=False, width=32),
)
def test_round_trip_property(attrs, expr, valence, arousal):
    v = make_vector(attrs, expr, valence=valence, arousal=arousal)
    v.validate()
    arr = v.to_array()
    v2 = ConditionalVector.from_array(arr, 12, 8)
    v2.validate()
    assert np.array_equal(arr, v2.to_array())
    assert v2.expression_index == expr
