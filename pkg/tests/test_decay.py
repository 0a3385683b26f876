import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expnet.decay import (
    DecaySchedule,
    cosine_decay,
    exp_decay,
    factor_for_layer,
    validate_overrides,
)


def test_cosine_documented_values():
    assert cosine_decay(0, 50) == 1.0
    assert cosine_decay(25, 50) == pytest.approx(0.5, abs=1e-15)
    assert cosine_decay(60, 50) == 0.0


def test_exponential_documented_values():
    assert exp_decay(0, 5, 0.5, 0.01) == 1.0
    assert exp_decay(12, 5, 0.5, 0.01) == 0.25
    assert exp_decay(40, 5, 0.5, 0.01) == 0.0


def test_both_families_start_at_exactly_one():
    assert cosine_decay(0, 80) == 1.0
    assert exp_decay(0, 10, 0.2, 0.05) == 1.0


def test_both_families_reach_exactly_zero():
    assert cosine_decay(50, 50) == 0.0
    assert cosine_decay(1000, 50) == 0.0
    # 0.5^7 = 0.0078 < 0.01, so the 8th plateau (alpha >= 35) is zero
    assert exp_decay(35, 5, 0.5, 0.01) == 0.0
    sched = DecaySchedule(family="exponential", beta=5, delta=0.5, epsilon=0.01)
    z = sched.zero_step()
    assert sched.value(z) == 0.0
    assert sched.value(z - 1) > 0.0
    assert DecaySchedule(family="cosine", beta=80).zero_step() == 80


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 400))
def test_cosine_nonincreasing_and_bounded(beta, alpha):
    f0 = cosine_decay(alpha, beta)
    f1 = cosine_decay(alpha + 1, beta)
    assert 0.0 <= f1 <= f0 <= 1.0


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 50),
    st.integers(0, 400),
    st.floats(0.05, 0.95),
    st.floats(0.001, 0.5),
)
def test_exponential_nonincreasing_and_bounded(beta, alpha, delta, epsilon):
    f0 = exp_decay(alpha, beta, delta, epsilon)
    f1 = exp_decay(alpha + 1, beta, delta, epsilon)
    assert 0.0 <= f1 <= f0 <= 1.0


def test_exponential_plateaus_are_constant():
    beta, delta, eps = 7, 0.3, 1e-4
    for m in range(8):
        values = {exp_decay(a, beta, delta, eps) for a in range(m * beta, (m + 1) * beta)}
        assert len(values) == 1
        want = delta**m
        assert values.pop() == (want if want >= eps else 0.0)


def test_cosine_step_change_is_bounded_by_slope():
    beta = 50
    diffs = [abs(cosine_decay(a + 1, beta) - cosine_decay(a, beta)) for a in range(2 * beta)]
    assert max(diffs) <= math.pi / (2 * beta) + 1e-12


def test_precondition_errors():
    with pytest.raises(ValueError, match=">= 0"):
        cosine_decay(-1, 50)
    with pytest.raises(ValueError, match="> 0"):
        cosine_decay(0, 0)
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        exp_decay(0, 5, 1.5, 0.01)
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        exp_decay(0, 5, 0.5, 0.0)


def test_schedule_validation():
    with pytest.raises(ValueError, match="family"):
        DecaySchedule(family="linear")
    with pytest.raises(ValueError, match="unit"):
        DecaySchedule(unit="minute")
    with pytest.raises(ValueError, match="> 0"):
        DecaySchedule(beta=0)
    with pytest.raises(ValueError, match="rate and cutoff"):
        DecaySchedule(family="exponential", beta=5)
    with pytest.raises(ValueError, match="override"):
        DecaySchedule(overrides={"conv4": -3})


def test_synchronous_binding_all_layers_equal():
    sched = DecaySchedule(family="cosine", beta=50)
    expanded = ["conv4", "conv5", "conv6"]
    at_50 = [factor_for_layer(sched, l, 50, expanded) for l in expanded]
    assert at_50 == [0.0, 0.0, 0.0]
    at_10 = {factor_for_layer(sched, l, 10, expanded) for l in expanded}
    assert len(at_10) == 1


def test_asynchronous_overrides():
    sched = DecaySchedule(
        family="cosine", beta=50, overrides={"conv4": 30, "conv5": 50, "conv6": 80}
    )
    expanded = ["conv4", "conv5", "conv6"]
    assert factor_for_layer(sched, "conv4", 40, expanded) == 0.0
    assert factor_for_layer(sched, "conv5", 40, expanded) == pytest.approx(
        0.5 * (1 + math.cos(0.8 * math.pi))
    )
    assert factor_for_layer(sched, "conv6", 40, expanded) == pytest.approx(
        0.5 * (1 + math.cos(0.5 * math.pi))
    )


def test_unexpanded_layer_queries_rejected():
    sched = DecaySchedule(family="cosine", beta=50)
    with pytest.raises(ValueError, match="not expanded"):
        factor_for_layer(sched, "conv1", 10, ["conv4"])
    with pytest.raises(ValueError, match="non-expanded"):
        validate_overrides(DecaySchedule(overrides={"conv2": 30}), ["conv4"])
    validate_overrides(DecaySchedule(overrides={"conv4": 30}), ["conv4"])


def test_factors_are_valid_scale_constants():
    # every emitted factor must be a legal constant for branch scaling
    sched = DecaySchedule(family="exponential", beta=3, delta=0.2, epsilon=0.05)
    for alpha in range(0, 30):
        f = sched.value(alpha)
        assert 0.0 <= f <= 1.0
    values = sorted({sched.value(a) for a in range(30)}, reverse=True)
    assert values[0] == 1.0 and values[-1] == 0.0
    assert np.all(np.diff(values) < 0)
