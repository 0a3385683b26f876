import math

import numpy as np
import pytest

from expnet.autodiff import ConvSpec
from expnet.bitops import (
    BitPlane,
    CapabilityReport,
    LayerShape,
    binary_conv2d,
    capability_report,
    distinct_count,
    distinct_count_enum,
    pack,
    unpack,
    xnor_dot,
)
from oracles import conv2d_naive, distinct_dots_pairwise


def random_signs(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


# ------------------------------------------------------------ pack/unpack


def test_pack_unpack_round_trip_all_lengths():
    rng = np.random.default_rng(5)
    for n in range(1, 257):
        v = random_signs(rng, n)
        assert np.array_equal(unpack(pack(v)), v)


def test_pack_validation():
    with pytest.raises(ValueError, match="empty"):
        pack(np.array([]))
    with pytest.raises(ValueError, match=r"\{-1, \+1\}"):
        pack(np.array([1.0, 0.0, -1.0]))
    with pytest.raises(ValueError, match="beyond"):
        BitPlane(3, 0b1000)
    with pytest.raises(ValueError, match=">= 1"):
        BitPlane(0, 0)


# -------------------------------------------------------------- xnor_dot


def test_xnor_dot_documented_examples():
    ones = pack(np.ones(9))
    neg = pack(-np.ones(9))
    assert xnor_dot(ones, ones) == 9
    assert xnor_dot(ones, neg) == -9


def test_xnor_dot_rejects_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        xnor_dot(pack(np.ones(4)), pack(np.ones(5)))


def test_xnor_dot_exhaustive_small_n():
    n = 6
    for xb in range(2**n):
        x = BitPlane(n, xb)
        xf = unpack(x)
        for yb in range(2**n):
            y = BitPlane(n, yb)
            assert xnor_dot(x, y) == int(np.dot(xf, unpack(y)))


def test_xnor_dot_random_long_vectors():
    rng = np.random.default_rng(11)
    for n in (64, 513, 1000):
        for _ in range(200):
            a = random_signs(rng, n)
            b = random_signs(rng, n)
            assert xnor_dot(pack(a), pack(b)) == int(round(float(np.dot(a, b))))


# --------------------------------------------------------- binary_conv2d


def test_binary_conv_all_ones_example():
    spec = ConvSpec(kernel=3, in_channels=1, out_channels=1)
    out = binary_conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.array([1.0]), spec)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_binary_conv_matches_scaled_float_conv_exactly():
    rng = np.random.default_rng(23)
    configs = [
        (1, 1, 1, 1, 1, 0, 4),
        (2, 2, 3, 3, 1, 0, 6),
        (1, 3, 2, 3, 1, 1, 5),
        (2, 1, 4, 2, 2, 0, 6),
        (1, 2, 2, 3, 2, 1, 7),
        (3, 2, 2, 5, 1, 2, 5),
    ]
    for n, c, o, d, stride, pad, h in configs:
        x = random_signs(rng, (n, c, h, h))
        w = random_signs(rng, (o, c, d, d))
        alpha = rng.uniform(0.1, 2.0, size=o)
        spec = ConvSpec(kernel=d, in_channels=c, out_channels=o, stride=stride, padding=pad)
        got = binary_conv2d(x, w, alpha, spec)
        want = alpha.reshape(1, -1, 1, 1) * conv2d_naive(x, w, stride=stride, padding=pad)
        assert np.array_equal(got, want), (n, c, o, d, stride, pad, h)


def test_binary_conv_padding_contributes_zero():
    # a padded all-ones conv at a corner sees only the overlapping entries
    spec = ConvSpec(kernel=3, in_channels=1, out_channels=1, padding=1)
    out = binary_conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.array([1.0]), spec)
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 1] == 6.0


def test_binary_conv_validation():
    spec = ConvSpec(kernel=3, in_channels=2, out_channels=1)
    signs = np.ones((1, 2, 4, 4))
    w = np.ones((1, 2, 3, 3))
    with pytest.raises(ValueError, match="sign"):
        binary_conv2d(signs * 0.5, w, np.ones(1), spec)
    with pytest.raises(ValueError, match="channels"):
        binary_conv2d(np.ones((1, 3, 4, 4)), w, np.ones(1), spec)
    with pytest.raises(ValueError, match="alpha"):
        binary_conv2d(signs, w, np.ones(2), spec)
    with pytest.raises(ValueError, match="weight shape"):
        binary_conv2d(signs, np.ones((1, 2, 2, 2)), np.ones(1), spec)


# ---------------------------------------------------------- distinct D


def test_distinct_count_documented_values():
    assert distinct_count(3, 32) == 289
    assert distinct_count(1, 1) == 2
    assert distinct_count(2, 1) == 5


def test_distinct_count_enum_matches_closed_form():
    for d, m in [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 2), (1, 8)]:
        assert distinct_count_enum(d, m, 1) == d * d * m + 1


def test_distinct_count_enum_matches_pairwise_oracle():
    cases = [(1, 1, 1), (2, 1, 1), (1, 2, 1), (1, 1, 2), (1, 2, 2), (1, 1, 3)]
    for d, m, k in cases:
        assert distinct_count_enum(d, m, k) == distinct_dots_pairwise(d, m, k), (d, m, k)


def test_distinct_count_routes_wide_bits_to_enumeration():
    assert distinct_count(1, 1, k=2) == distinct_count_enum(1, 1, 2)


def test_distinct_count_enum_guard():
    with pytest.raises(ValueError, match="guard"):
        distinct_count_enum(3, 3, 1)
    with pytest.raises(ValueError, match=">= 1"):
        distinct_count(0, 4)
    with pytest.raises(ValueError, match=r"\[1, 8\]"):
        distinct_count_enum(1, 1, 9)


# ------------------------------------------------------ capability report


def test_capability_report_documented_shapes():
    shapes = [
        LayerShape("conv_a", kernel=3, in_channels=32, out_channels=64, out_h=8, out_w=8),
        LayerShape("conv_b", kernel=3, in_channels=16, out_channels=32, out_h=8, out_w=8),
    ]
    report = capability_report(shapes)
    assert isinstance(report, CapabilityReport)
    a, b = report.rows
    assert (a.d_value, a.size) == (289, 4096)
    assert a.log2_r == pytest.approx(4096 * math.log2(289), abs=1e-9)
    assert (b.d_value, b.size) == (145, 2048)
    assert b.log2_r == pytest.approx(2048 * math.log2(145), abs=1e-9)


def test_capability_report_invariant_and_csv():
    shapes = [LayerShape("c1", kernel=1, in_channels=1, out_channels=3, out_h=2, out_w=2)]
    report = capability_report(shapes)
    row = report.rows[0]
    assert row.d_value == 2
    assert row.log2_r == row.size * math.log2(row.d_value) >= 0
    csv = report.as_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "layer,D,size,log2_R"
    assert lines[1].startswith("c1,2,12,")
