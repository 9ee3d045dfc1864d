"""Layer-based precision against uniform formats on a U-Net whose layers
span many octaves of dynamic range, then the effect of a guard bit.

Run: python3 demos/02_precision_planning.py   (about 30 s)
"""
from blmnode import nn, quant
from blmnode import workbench as wb

fx = wb.heterogeneous_fixture()
prof = quant.profile(fx.model, fx.calibration)
print("profiled max |activation| per layer:")
for name, m in prof.max_abs.items():
    print(f"  {name:<12} {m:10.4f}")

plan = quant.plan_precision(prof, total_bits=16)
print("\nlayer-based plan:", plan.describe())

report = wb.table2_report(fx.model, fx.calibration, fx.evaluation)
print()
print(report.to_text())

# Evaluation frames louder than the calibration set overshoot the profiled
# maxima; one guard bit absorbs most of the excursion.
ov = wb.overflow_fixture()
oprof = quant.profile(ov.model, ov.calibration)
ref = nn.infer_float_batch(ov.model, ov.evaluation)
print()
for guard in (0, 1, 2):
    test, log = nn.infer_fixed_batch(ov.model, ov.evaluation, quant.plan_precision(oprof, 16, guard))
    print(f"guard_bits={guard}: {wb.count_outliers(ref, test):4d} outliers, "
          f"{sum(n for _, n in log.items())} saturations")
