"""Fixed-point basics: quantize, saturate, add and multiply in fx<W,I>.

Run: python3 demos/01_fixed_point.py
"""
from blmnode import fxp

spec = fxp.parse_spec("fx<16,7>")
print(f"{spec}: {spec.frac_bits} fraction bits, ulp {spec.ulp}, range "
      f"[{spec.min_value}, {spec.max_value}]")

# Values on the grid survive unchanged; others round half to even.
for x in (0.5, 1.0 / 3, 2 ** -10, 100.0, -100.0):
    v, over = fxp.quantize(x, spec)
    print(f"  {x!r:>22} -> code {v.code:>6}  real {v.real!r:<16} overflow={over}")

# Each format picks its overflow behaviour: saturate (default) or wrap.
wrap = fxp.make_spec(16, 7, overflow=fxp.Overflow.WRAP)
print("wrap 64.0 ->", fxp.quantize(64.0, wrap)[0].real)

# Arithmetic is exact until the result is fitted to the output spec.
a, _ = fxp.quantize(3.25, spec)
b, _ = fxp.quantize(-1.5, spec)
print("3.25 + -1.5 =", fxp.fx_add(a, b, spec)[0].real)
print("3.25 * -1.5 =", fxp.fx_mul(a, b, spec)[0].real)
big, _ = fxp.quantize(40.0, spec)
prod, over = fxp.fx_mul(big, big, spec)
print(f"40 * 40 saturates to {prod.real} (overflow={over})")
