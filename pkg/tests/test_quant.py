import numpy as np
import pytest

from blmnode import fxp, nn, quant
from blmnode.errors import BadSpec, EmptyCalibrationSet, ParseError, PlanMismatch
from blmnode.nn import LayerDescriptor as L
from blmnode.nn import LayerKind as K


def test_integer_bits_examples():
    assert quant.integer_bits_for(5.3) == 4
    assert quant.integer_bits_for(0.9) == 1
    assert quant.integer_bits_for(0.0) == 1


@pytest.mark.parametrize("m", [0.5, 1.0, 3.999, 4.0, 63.9, 64.0, 1e-9, 1e4])
def test_integer_bits_covers_max(m):
    i = quant.integer_bits_for(m, 32)
    assert m < 2 ** (i - 1)
    if i > 1:
        assert m >= 2 ** (i - 2)  # minimal


def test_integer_bits_clamps_to_width():
    assert quant.integer_bits_for(1e9, 16) == 16
    assert quant.integer_bits_for(5.3, 16, guard_bits=2) == 6


def test_profile_zero_model():
    d = nn.reference_mlp_descriptor()
    w = np.zeros(d.param_count)
    w[260 * 128:260 * 128 + 128] = np.linspace(-3, 2, 128)  # dense1 bias
    m = nn.load_weights(w.astype("<f4").tobytes(), d)
    p = quant.profile(m, np.random.default_rng(0).standard_normal((5, 260)))
    assert p.max_abs["dense1"] == pytest.approx(3.0)
    assert p.max_abs["relu1"] == pytest.approx(2.0)
    assert p.max_abs["dense2"] == 0.0
    assert p.max_abs["sigmoid"] == 0.5
    assert p.sample_count == 5


def test_profile_identity_dense():
    d = nn.build_descriptor([L("d", K.DENSE, {"units": 1, "use_bias": False}, ("input",))], (1,))
    m = nn.load_weights(np.array([1.0], dtype="<f4").tobytes(), d)
    x = np.array([[0.3], [-2.5], [1.0]])
    assert quant.profile(m, x).max_abs["d"] == 2.5


def test_profile_empty():
    m = nn.zero_model(nn.reference_mlp_descriptor())
    with pytest.raises(EmptyCalibrationSet):
        quant.profile(m, np.zeros((0, 260)))


def test_profile_batching_and_merge_order_independent():
    from blmnode import workbench as wb

    d = nn.reference_unet_descriptor()
    m = nn.load_weights(wb.synth_weights(1, d, {n: 0.4 for n in d.weight_shapes}), d)
    frames = wb.synth_frames(2, 40)
    whole = quant.profile(m, frames, batch_size=1000)
    small = quant.profile(m, frames, batch_size=7)
    assert whole.max_abs == small.max_abs
    a, b = quant.profile(m, frames[:13]), quant.profile(m, frames[13:])
    assert a.merge(b).max_abs == b.merge(a).max_abs == whole.max_abs
    assert list(whole.max_abs) == d.layer_names


def test_profile_json_round_trip():
    p = quant.CalibrationProfile({"a": 1.25, "b": 0.0}, 3)
    assert quant.CalibrationProfile.from_json(p.to_json()) == p
    with pytest.raises(ParseError):
        quant.CalibrationProfile.from_json("[]")


def test_plan_precision_totality_and_width():
    p = quant.CalibrationProfile({"a": 5.3, "b": 0.9, "c": 0.0}, 1)
    plan = quant.plan_precision(p, 16)
    assert {n: s.integer_bits for n, s in plan.specs.items()} == {"a": 4, "b": 1, "c": 1}
    assert {s.total_bits for s in plan.specs.values()} == {16}
    assert plan.strategy is quant.Strategy.LAYER_BASED


def test_guard_bits_never_decrease_i():
    p = quant.CalibrationProfile({"a": 5.3, "b": 0.9, "c": 40000.0}, 1)
    prev = quant.plan_precision(p, 16, 0)
    for g in (1, 2, 3):
        cur = quant.plan_precision(p, 16, g)
        assert all(cur.specs[n].integer_bits >= prev.specs[n].integer_bits for n in p.max_abs)
        prev = cur


def test_uniform_plan():
    d = nn.reference_unet_descriptor()
    plan = quant.uniform_plan(d, 16, 7)
    assert set(plan.specs) == set(d.layer_names)
    assert {str(s) for s in plan.specs.values()} == {"fx<16,7>"}
    assert {str(s) for s in quant.uniform_plan(d, 18, 10).specs.values()} == {"fx<18,10>"}
    with pytest.raises(BadSpec):
        quant.uniform_plan(d, 16, 17)


def test_plan_json_round_trip():
    d = nn.reference_mlp_descriptor()
    p = quant.uniform_plan(d, 16, 7, fxp.Rounding.TRUNCATE, fxp.Overflow.WRAP)
    again = quant.PrecisionPlan.from_json(p.to_json())
    assert again == p and hash(again) == hash(p)


def dense_model(kernel, bias):
    k = np.asarray(kernel, dtype=float)
    d = nn.build_descriptor([L("d", K.DENSE, {"units": k.shape[1]}, ("input",))], (k.shape[0],))
    return nn.Model(d, {"d": (k, np.asarray(bias, dtype=float))})


def test_quantize_model_on_grid_weights():
    spec = fxp.make_spec(16, 7)
    k = fxp.codes_to_real(np.arange(-12, 12).reshape(6, 4) * 37, spec)
    m = dense_model(k, np.zeros(4))
    qm = quant.quantize_model(m, quant.uniform_plan(m.descriptor, 16, 7))
    assert qm.total_saturated == 0
    np.testing.assert_array_equal(qm.dequantized().weights["d"][0], k)


def test_quantize_model_saturates():
    m = dense_model([[100.0, 1.0]], [0.0, 0.0])
    qm = quant.quantize_model(m, quant.uniform_plan(m.descriptor, 16, 7))
    assert qm.saturated_weights["d"] == 1
    assert qm.dequantized().weights["d"][0][0, 0] == 63.998046875


def test_quantize_model_missing_layer():
    m = dense_model([[1.0]], [0.0])
    with pytest.raises(PlanMismatch) as e:
        quant.quantize_model(m, quant.PrecisionPlan({}, quant.Strategy.UNIFORM))
    assert e.value.layer == "d"


def test_guard_bit_sufficiency_on_calibration_set():
    from blmnode import workbench as wb

    fx = wb.heterogeneous_fixture(n_calibration=60, n_eval=1)
    prof = quant.profile(fx.model, fx.calibration)
    overflows = []
    for g in (0, 1, 2):
        _, log = nn.infer_fixed_batch(fx.model, fx.calibration, quant.plan_precision(prof, 16, g))
        overflows.append(log.total)
        if g >= 1:
            assert log.total == 0, log
    assert overflows == sorted(overflows, reverse=True)


def test_percentile_profile_not_above_max():
    from blmnode import workbench as wb

    fx = wb.heterogeneous_fixture(n_calibration=30, n_eval=1)
    full = quant.profile(fx.model, fx.calibration)
    p99 = quant.profile(fx.model, fx.calibration, percentile=99.0)
    assert all(p99.max_abs[n] <= full.max_abs[n] for n in full.max_abs)
