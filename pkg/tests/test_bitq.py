import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gscodec.bitq import (PRESETS, BitQuantChannel, BitQuantPolicy, absmax_dequantize, absmax_quantize, apply_policy,
                          qmax, round_half_away)
from gscodec.model import FIELDS

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)
channels = arrays(np.float64, st.integers(1, 200), elements=finite)
bit_widths = st.sampled_from([4, 8, 16])


def test_all_zero_channel():
    ch = absmax_quantize(np.zeros(3), 8)
    assert ch.scale == 0.0
    np.testing.assert_array_equal(ch.values, [0, 0, 0])
    np.testing.assert_array_equal(ch.dequantize(), [0.0, 0.0, 0.0])


def test_half_rounds_away_from_zero():
    ch = absmax_quantize(np.array([1.0, -0.5]), 8)
    assert ch.scale == 1.0
    np.testing.assert_array_equal(ch.values, [127, -64])
    np.testing.assert_allclose(ch.dequantize(), [1.0, -64 / 127], rtol=0, atol=1e-15)
    assert abs(ch.dequantize()[1] - (-0.503937)) < 1e-6


def test_single_element_exact():
    ch = absmax_quantize(np.array([-3.0]), 16)
    assert ch.scale == 3.0
    np.testing.assert_array_equal(ch.values, [-32767])
    assert ch.dequantize()[0] == -3.0


def test_full_range_codes_hit_scale_exactly():
    for bits in (4, 8, 16):
        ch = BitQuantChannel(bits, 0.7, np.array([qmax(bits), -qmax(bits)]))
        np.testing.assert_array_equal(absmax_dequantize(ch), [0.7, -0.7])


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])), [1, -1, 2, -3, 0])


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        absmax_quantize(np.ones(2), 3)
    with pytest.raises(ValueError):
        absmax_quantize(np.array([1.0, np.nan]), 8)


@settings(max_examples=200, deadline=None)
@given(x=channels, bits=bit_widths)
def test_error_bound(x, bits):
    ch = absmax_quantize(x, bits)
    err = np.abs(ch.dequantize() - x)
    assert (err <= ch.scale / qmax(bits)).all()
    assert np.abs(ch.values).max() <= qmax(bits)


@settings(max_examples=200, deadline=None)
@given(x=channels, bits=bit_widths, e=st.integers(-20, 20))
def test_scale_equivariant_power_of_two(x, bits, e):
    c = 2.0 ** e
    a, b = absmax_quantize(x, bits), absmax_quantize(c * x, bits)
    np.testing.assert_array_equal(a.values, b.values)
    assert b.scale == c * a.scale


def test_scale_equivariant_generic(rng):
    for _ in range(200):
        x = rng.normal(size=64)
        c = float(rng.uniform(0.01, 100))
        bits = int(rng.choice([4, 8, 16]))
        np.testing.assert_array_equal(absmax_quantize(x, bits).values, absmax_quantize(c * x, bits).values)


@settings(max_examples=200, deadline=None)
@given(x=channels, bits=bit_widths)
def test_requantize_idempotent(x, bits):
    ch = absmax_quantize(x, bits)
    again = absmax_quantize(ch.dequantize(), bits)
    np.testing.assert_array_equal(again.values, ch.values)


def test_int16_payload(cloud):
    _, report = apply_policy(cloud, BitQuantPolicy.preset("int16"))
    assert report["total"] == 118 * cloud.count + 59 * 4


def test_int8_no_pos_keeps_position(cloud):
    out, report = apply_policy(cloud, BitQuantPolicy.preset("Int8-no-pos"))
    np.testing.assert_array_equal(out.position, cloud.position)
    assert report["position"] == 12 * cloud.count
    assert not np.array_equal(out.color_sh, cloud.color_sh)


def test_compgs_preset_touches_only_position_and_opacity(cloud):
    out, report = apply_policy(cloud, BitQuantPolicy.preset("compgs-bitq"))
    for name in FIELDS:
        same = np.array_equal(out.field(name), cloud.field(name))
        assert same == (name not in ("position", "logit_opacity")), name
    assert report["position"] == 3 * (2 * cloud.count + 4)
    assert report["logit_opacity"] == cloud.count + 4


def test_float32_policy_is_identity(cloud):
    out, report = apply_policy(cloud, BitQuantPolicy.preset("float32"))
    assert out.equals(cloud)
    assert report["total"] == 59 * 4 * cloud.count


def test_presets_resolve():
    for name in PRESETS:
        assert BitQuantPolicy.preset(name).name == name
    with pytest.raises(ValueError):
        BitQuantPolicy.preset("int3")
    with pytest.raises(ValueError):
        BitQuantPolicy("x", {"nope": 8})
