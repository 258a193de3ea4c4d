import numpy as np
import pytest

from dglab.errors import ConfigurationError, DegenerateInputError, InternalError
from dglab.gsema import EMAConfig, GateDecision, GateRule, Granularity, ema_update, gate
from dglab.vectors import GradientVector, Origin, ParamLayout, ParamVector

PROSE = EMAConfig()
PSEUDOCODE = EMAConfig(gate_rule=GateRule.PSEUDOCODE)
OPEN = GateDecision(1.0, 1.0, True)
CLOSED = GateDecision(-1.0, -1.0, False)


def grads(a, b, layout=None):
    return (
        GradientVector(np.asarray(a, dtype=np.float64), Origin.SRC, layout),
        GradientVector(np.asarray(b, dtype=np.float64), Origin.TRG, layout),
    )


def flat_layout(n: int) -> ParamLayout:
    return ParamLayout((("w", (n,)),))


def test_gate_acute_and_obtuse():
    decision = gate(*grads([1, 0], [1, 1]), PROSE)
    assert decision.updated is True
    assert decision.inner_product == 1.0
    assert decision.cos_angle == pytest.approx(1 / np.sqrt(2))
    assert gate(*grads([1, 0], [-1, 0]), PROSE).updated is False


def test_gate_right_angle_stays_closed_under_prose():
    decision = gate(*grads([1, 0], [0, 1]), PROSE)
    assert decision.inner_product == 0.0
    assert decision.updated is False
    assert gate(*grads([1, 0], [0, 1]), PSEUDOCODE).updated is True


def test_gate_matches_dot_product_sign():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 2000))
        a, b = rng.normal(size=n), rng.normal(size=n)
        expected = sum(float(x) * float(y) for x, y in zip(a, b)) > 0
        assert gate(*grads(a, b), PROSE).updated is expected
        assert gate(*grads(a, b), PSEUDOCODE).updated is (not expected)


def test_gate_is_symmetric_and_scale_invariant():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.normal(size=50), rng.normal(size=50)
        base = gate(*grads(a, b)).updated
        assert gate(*grads(b, a)).updated is base
        assert gate(*grads(3.0 * a, 0.02 * b)).updated is base


def test_gate_with_one_zero_gradient():
    decision = gate(*grads([0.0, 0.0], [1.0, 2.0]))
    assert decision.cos_angle == 0.0
    assert decision.updated is False


def test_gate_errors():
    with pytest.raises(InternalError):
        gate(*grads([1.0, 2.0], [1.0]))
    with pytest.raises(DegenerateInputError):
        gate(*grads([0.0, 0.0], [0.0, 0.0]))
    with pytest.raises(InternalError):
        GradientVector(np.array([1.0, np.nan]), Origin.SRC)


def test_per_layer_gate():
    layout = ParamLayout((("a", (2,)), ("b", (2,))))
    cfg = EMAConfig(granularity=Granularity.PER_LAYER)
    decision = gate(*grads([1, 1, 1, 0], [1, 1, -1, 0], layout), cfg)
    assert decision.layer_updates == (True, False)
    assert decision.updated is True
    assert decision.to_dict()["layer_updates"] == [True, False]

    tea = ParamVector(np.ones(4), layout)
    stu = ParamVector(np.zeros(4), layout)
    out = ema_update(tea, stu, decision, EMAConfig(alpha=0.9))
    np.testing.assert_array_equal(out.values, [0.9, 0.9, 1.0, 1.0])



def test_forced_decision_overrides_the_gate():
    layout = ParamLayout((("a", (2,)), ("b", (2,))))
    tea = ParamVector(np.ones(4), layout)
    stu = ParamVector(np.zeros(4), layout)
    closed = GateDecision(-1.0, -1.0, False, (False, False), forced=True)
    assert closed.applied is True
    assert closed.to_dict()["updated"] is False and closed.to_dict()["forced"] is True
    np.testing.assert_array_equal(ema_update(tea, stu, closed, EMAConfig(alpha=0.9)).values, [0.9] * 4)

    held = GateDecision(1.0, 1.0, True, forced=False)
    assert ema_update(tea, stu, held, EMAConfig(alpha=0.9)).values.tobytes() == tea.values.tobytes()
    assert "forced" not in OPEN.to_dict() and OPEN.to_dict()["applied"] is True


def test_ema_one_step():
    layout = flat_layout(3)
    out = ema_update(ParamVector(np.ones(3), layout), ParamVector(np.zeros(3), layout), OPEN, EMAConfig(alpha=0.9))
    np.testing.assert_array_equal(out.values, [0.9, 0.9, 0.9])


def test_closed_gate_returns_teacher_unchanged():
    layout = flat_layout(5)
    tea = ParamVector(np.random.default_rng(2).normal(size=5).astype(np.float32), layout)
    stu = ParamVector(np.zeros(5, dtype=np.float32), layout)
    out = ema_update(tea, stu, CLOSED, EMAConfig(alpha=0.9))
    assert out.values.tobytes() == tea.values.tobytes()


@pytest.mark.parametrize("alpha", [0.9, 0.9999])
@pytest.mark.parametrize("steps", [1, 10, 1000])
def test_repeated_updates_follow_closed_form(alpha, steps):
    layout = flat_layout(4)
    start = np.array([1.0, -2.0, 0.5, 3.0])
    student = ParamVector(np.array([0.25, 0.0, -1.0, 3.0]), layout)
    tea = ParamVector(start.copy(), layout)
    cfg = EMAConfig(alpha=alpha)
    for _ in range(steps):
        tea = ema_update(tea, student, OPEN, cfg)
    expected = alpha ** steps * start + (1 - alpha ** steps) * student.values
    np.testing.assert_allclose(tea.values, expected, rtol=1e-12, atol=1e-15)


def test_ema_layout_mismatch():
    with pytest.raises(InternalError):
        ema_update(ParamVector(np.ones(2), flat_layout(2)), ParamVector(np.ones(2), ParamLayout((("v", (2,)),))), OPEN)


def test_alpha_validation():
    with pytest.raises(ConfigurationError):
        EMAConfig(alpha=1.0)
    assert EMAConfig(alpha=0.9).reference_alpha
    assert not EMAConfig(alpha=0.5).reference_alpha
