"""High-precision reference values frozen into the test suites."""

from mpmath import mp, e, exp, mpf, sqrt

mp.dps = 50


def show(name, value):
    print(f"{name:<28} {mp.nstr(value, 20)}")


show("bound_param_ode unit", 6 * e * (2 + e))
show("bound_neural_ode unit", 6 * sqrt(2) * e * (2 + e))
show("bound_resnet unit", 6 * sqrt(2) * e * (e + 1))
show("ode output bound unit", 1 + e)
show("ode lipschitz unit", 2 * exp(2))
show("resnet output bound unit", e)
show("resnet lipschitz unit", exp(2))
for n in (10, 100, 1000):
    show(f"euler (1+1/{n})^{n}", (1 + mpf(1) / n) ** n)
