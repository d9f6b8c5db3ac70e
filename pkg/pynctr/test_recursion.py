import os
import math
import dataclasses
import numpy as np
import pynctr as nc
from fractions import Fraction

_logger = nc.get_child_logger(__name__)

HBAR_TAYLOR = Fraction(1, 7)
V_TAYLOR = {2: Fraction(1), 3: Fraction(1, 2), 4: Fraction(1, 3), 5: Fraction(1, 4), 6: Fraction(1, 5), 7: Fraction(1, 6)}


def gaudin_context(hbar: str = '1/10') -> nc.RecursionContext:
    b = nc.RationalBackend()
    return nc.RecursionContext(nc.solve_bethe(nc.Potential.gaudin_one_point(1, b), 1, hbar, ['0.9']))


def taylor_context() -> nc.RecursionContext:
    b = nc.RationalBackend()
    return nc.RecursionContext(nc.solve_bethe(nc.Potential.from_taylor(V_TAYLOR, b), 1, HBAR_TAYLOR, ['0.1']))


def quartic_context(seed: int = 0) -> nc.RecursionContext:
    '''V'(x) = x^3 + t x^2 - x with a small random t, two roots near -1 and 1'''
    rng = np.random.default_rng(seed)
    t = Fraction(int(rng.integers(-3, 4)), 20)
    d = nc.DoubleBackend()
    return nc.RecursionContext(nc.solve_bethe(nc.Potential.create([0, -1, t, 1], [], d), 2, '1/20', ['-0.9', '0.9']))


def _sym(xs, k):  # elementary symmetric sum of 1 / x over k element subsets
    acc = Fraction(0)
    for i in range(len(xs)):
        if k == 1: acc += 1 / xs[i]
        else: acc += sum(1 / (xs[i] * xs[j]) for j in range(i + 1, len(xs)))
    return acc


def taylor_w40(x, v, h):
    p = math.prod(xi ** 2 for xi in x)
    inv2 = sum(1 / xi ** 2 for xi in x)
    return (6 * h / v[2] ** 3 * inv2 + 8 * h / v[2] ** 3 * _sym(x, 2) - 12 * h * v[3] / v[2] ** 4 * _sym(x, 1)
            + 12 * h * v[3] ** 2 / v[2] ** 5 - 6 * h * v[4] / v[2] ** 4) / p


def taylor_w21(x, v, h):
    x1, x2 = x
    p = x1 ** 2 * x2 ** 2
    return (3 / v[2] ** 2 * (1 / x1 ** 2 + 1 / x2 ** 2 + Fraction(2, 3) / (x1 * x2)) + 1 / (h * v[2])
            - 4 * v[3] / v[2] ** 3 * (1 / x1 + 1 / x2) + 4 * v[3] ** 2 / v[2] ** 4 - 3 * v[4] / v[2] ** 3) / p


def taylor_w31(x, v, h):
    x1, x2, x3 = x
    p = x1 ** 2 * x2 ** 2 * x3 ** 2
    s1 = 1 / x1 + 1 / x2 + 1 / x3
    mixed = (1 / (x1 ** 2 * x2) + 1 / (x2 ** 2 * x3) + 1 / (x3 ** 2 * x1) + 1 / (x1 * x2 ** 2) + 1 / (x2 * x3 ** 2)
             + 1 / (x3 * x1 ** 2))
    quad = 1 / x1 ** 2 + 1 / x2 ** 2 + 1 / x3 ** 2 + 1 / (x1 * x2) + 1 / (x2 * x3) + 1 / (x3 * x1)
    v2, v3, v4, v5 = v[2], v[3], v[4], v[5]
    return ((12 / v2 ** 3 * (1 / x1 ** 3 + 1 / x2 ** 3 + 1 / x3 ** 3) + 12 / v2 ** 3 * mixed + 8 / (v2 ** 3 * x1 * x2 * x3)
             + 2 / (h * v2 ** 2) * s1 - 24 * v3 / v2 ** 4 * quad - 2 * v3 / (h * v2 ** 3) + 32 * v3 ** 2 / v2 ** 5 * s1
             - 32 * v3 ** 3 / v2 ** 6 - 18 * v4 / v2 ** 4 * s1 + 42 * v3 * v4 / v2 ** 5 - 12 * v5 / v2 ** 4) / p)


def taylor_w12(x, v, h):
    v2, v3, v4, v5 = v[2], v[3], v[4], v[5]
    return (-1 / (h ** 3 * x) + 3 / (h * v2 ** 2 * x ** 5) - 5 * v3 / (h * v2 ** 3 * x ** 4) + 5 * v3 ** 2 / (h * v2 ** 4 * x ** 3)
            - 5 * v3 ** 3 / (h * v2 ** 5 * x ** 2) - 3 * v4 / (h * v2 ** 3 * x ** 3) + 8 * v3 * v4 / (h * v2 ** 4 * x ** 2)
            - 3 * v5 / (h * v2 ** 3 * x ** 2))


def taylor_w22(x, v, h):
    x1, x2 = x
    p = h * x1 ** 2 * x2 ** 2
    v2, v3, v4, v5, v6 = v[2], v[3], v[4], v[5], v[6]
    s1 = 1 / x1 + 1 / x2
    s2 = 1 / x1 ** 2 + 1 / x2 ** 2
    c = 1 / (x1 ** 3 * x2 ** 3)
    return ((15 / v2 ** 3 * (1 / x1 ** 4 + 1 / x2 ** 4 + 1 / (x1 ** 2 * x2 ** 2)) + 12 / v2 ** 3 * (1 / (x1 ** 3 * x2) + 1 / (x1 * x2 ** 3))
             - 1 / (h ** 2 * v2) - 32 * v3 / v2 ** 4 * (1 / x1 ** 3 + 1 / x2 ** 3) - 30 * v3 / v2 ** 4 * (1 / (x1 * x2 ** 2) + 1 / (x1 ** 2 * x2))
             + 45 * v3 ** 2 / v2 ** 5 * s2 + 40 * v3 ** 2 / v2 ** 5 * c * x1 ** 2 * x2 ** 2 - 50 * v3 ** 3 / v2 ** 6 * s1
             + 50 * v3 ** 4 / v2 ** 7 - 24 * v4 / v2 ** 4 * s2 - 18 * v4 / v2 ** 4 * c * x1 ** 2 * x2 ** 2
             + 64 * v3 * v4 / v2 ** 5 * s1 - 109 * v3 ** 2 * v4 / v2 ** 6 + 24 * v4 ** 2 / v2 ** 5 - 18 * v5 / v2 ** 4 * s1
             + 50 * v3 * v5 / v2 ** 5 - 15 * v6 / v2 ** 4) / p)


def taylor_w13(x, v, h):
    v2, v3, v4, v5, v6, v7 = v[2], v[3], v[4], v[5], v[6], v[7]
    a = (15 / (v2 ** 3 * x ** 7) - 35 * v3 / (v2 ** 4 * x ** 6) + 50 * v3 ** 2 / (v2 ** 5 * x ** 5) - 60 * v3 ** 3 / (v2 ** 6 * x ** 4)
         + 60 * v3 ** 4 / (v2 ** 7 * x ** 3) - 60 * v3 ** 5 / (v2 ** 8 * x ** 2) - 24 * v4 / (v2 ** 4 * x ** 5) + 75 * v3 * v4 / (v2 ** 5 * x ** 4)
         - 125 * v3 ** 2 * v4 / (v2 ** 6 * x ** 3) + 185 * v3 ** 3 * v4 / (v2 ** 7 * x ** 2) + 24 * v4 ** 2 / (v2 ** 5 * x ** 3)
         - 99 * v3 * v4 ** 2 / (v2 ** 6 * x ** 2) - 21 * v5 / (v2 ** 4 * x ** 4) + 56 * v3 * v5 / (v2 ** 5 * x ** 3)
         - 106 * v3 ** 2 * v5 / (v2 ** 6 * x ** 2) + 45 * v4 * v5 / (v2 ** 5 * x ** 2) - 15 * v6 / (v2 ** 4 * x ** 3)
         + 50 * v3 * v6 / (v2 ** 5 * x ** 2) - 15 * v7 / (v2 ** 4 * x ** 2))
    # the v3 / x^2 term at hbar^-3 read as v3^3, the only reading homogeneous in V and hbar
    b = (-3 / (v2 ** 2 * x ** 5) + 5 * v3 / (v2 ** 3 * x ** 4) - 5 * v3 ** 2 / (v2 ** 4 * x ** 3) + 5 * v3 ** 3 / (v2 ** 5 * x ** 2)
         + 3 * v4 / (v2 ** 3 * x ** 3) - 8 * v3 * v4 / (v2 ** 4 * x ** 2) + 3 * v5 / (v2 ** 3 * x ** 2))
    return 2 / (h ** 5 * x) + a / h ** 2 + b / h ** 3


def test_gaudin_golden() -> None:
    ctx = gaudin_context()
    b = ctx.backend
    h = Fraction(1, 10)
    assert nc.compute_w(ctx, 0, 1).terms == {((0, 1),): h}
    B = nc.compute_w(ctx, 0, 2)
    assert B.universal_part and dict(B.terms) == {((0, 2), (0, 2)): h / 2}
    X = [b.convert(2), b.convert(3), b.convert(4)]
    assert nc.w_eval(nc.compute_w(ctx, 0, 3), X) == h / 2 * (1 + Fraction(1, 2) + Fraction(1, 3) + Fraction(1, 2)) / 36
    assert dict(nc.compute_w(ctx, 1, 1).terms) == {((0, 1),): 1 / h, ((0, 2),): Fraction(1, 4), ((0, 3),): Fraction(1, 2)}

    assert nc.free_energy(ctx, 0) == Fraction(-1, 20)
    F1 = nc.f1(ctx.sys)
    assert not F1.is_collapsible()
    bf = nc.BigFloatBackend(160)
    F1_value = nc.LogValue(bf.convert(F1.analytic), tuple((bf.convert(c), bf.convert(a)) for c, a in F1.logs), bf).collapse()
    assert bf.rel_diff(F1_value, bf.log(bf.convert(Fraction(1, 20))) / 2 - 5) < 1e-40
    F2 = nc.free_energy(ctx, 2)
    F3 = nc.free_energy(ctx, 3)
    assert bf.rel_diff(F2, bf.convert(-1 / (12 * h) + 1 / (2 * h ** 3))) < 1e-9
    assert bf.rel_diff(F3, bf.convert(1 / (12 * h ** 3) - 1 / h ** 5)) < 1e-9


def test_taylor_golden() -> None:
    ctx = taylor_context()
    b = ctx.backend
    v, h = V_TAYLOR, HBAR_TAYLOR
    rng = np.random.default_rng(3)
    cases = [(0, 4, taylor_w40), (1, 2, taylor_w21), (1, 3, taylor_w31), (2, 1, taylor_w12), (2, 2, taylor_w22),
             (3, 1, taylor_w13)]
    for g, n, closed_form in cases:
        W = nc.compute_w(ctx, g, n)
        for _ in range(3):
            X = nc.random_probes(b, n, ctx.sys.roots, rng)
            value = nc.w_eval(W, X)
            expected = closed_form(X[0] if n == 1 else X, v, h)
            assert value == expected, f'W_{n}^({g}) at {X}: {value} != {expected}'

    F1 = nc.f1(ctx.sys)
    assert F1.analytic == 0 and F1.logs == ((Fraction(1, 2), h / v[2]),)
    bf = nc.BigFloatBackend(160)
    F2 = nc.free_energy(ctx, 2)
    F3 = nc.free_energy(ctx, 3)
    assert bf.rel_diff(F2, bf.convert(Fraction(-7, 24))) < 1e-9
    # closed form of F_3 for a Taylor potential at a single root
    expected_f3 = -(5 * v[3] ** 2 / (6 * h ** 3 * v[2] ** 3) - 5 * v[3] ** 4 / (h ** 2 * v[2] ** 6) - 3 * v[4] / (4 * h ** 3 * v[2] ** 2)
                    + 25 * v[3] ** 2 * v[4] / (2 * h ** 2 * v[2] ** 5) - 3 * v[4] ** 2 / (h ** 2 * v[2] ** 4)
                    - 7 * v[3] * v[5] / (h ** 2 * v[2] ** 4) + 5 * v[6] / (2 * h ** 2 * v[2] ** 3))
    assert expected_f3 == Fraction(637, 48)
    assert bf.rel_diff(F3, bf.convert(expected_f3)) < 1e-9


PROPERTY_CHECKS = ['symmetry', 'loop_equation', 'kernel_independence', 'w30_forms', 'variational', 'resy', 'dilaton', 'asymptotics',
                   'omega_identity', 'ricatti', 'kernel_ode', 'pole_reconstruction']


def test_property_suite() -> None:
    for name, ctx in [('gaudin', gaudin_context()), ('gaudin 1/7', gaudin_context('1/7')), ('taylor', taylor_context())]:
        reports = nc.run_checks(ctx, PROPERTY_CHECKS, targets=[(0, 3), (1, 1), (1, 2)], seed=5)
        reports += nc.run_checks(ctx, ['asymptotics'], targets=[(2, 1), (3, 1)])
        for r in reports: assert r.passed, f'{name} {r.name}: {r.status} {r.residual} {r.params}'
    quartic = quartic_context(seed=1)
    names = [n for n in PROPERTY_CHECKS if n != 'pole_reconstruction']
    for r in nc.run_checks(quartic, names, targets=[(0, 3), (1, 1)], seed=5, threads=2):
        assert r.passed, f'quartic {r.name}: {r.status} {r.residual} {r.params}'


def test_oracle_orders() -> None:
    ctx = gaudin_context()
    full = nc.oracle_partition_function(ctx, Ns=(8, 16, 32), beta=4, genera=(1, 3))
    assert full.passed, full.params
    slopes = full.params['slopes']
    assert abs(slopes[1] + 2) <= 1 and abs(slopes[3] + 6) <= 1 and slopes[3] < slopes[1]


def test_taylor_run_deterministic() -> None:
    cfg = nc.RunConfig(potential={'taylor': {str(k): str(x) for k, x in V_TAYLOR.items()}}, m=1, hbar='1/7',
                       newton={'seeds': ['0.1']}, targets=[(0, 4), (1, 2), (1, 3), (2, 1), (2, 2), (3, 1)], energies=[0, 1, 2],
                       verify=['symmetry', 'resy', 'kernel_independence'], seed=2)
    outs = [os.path.join(nc.get_temp_dir(), f'pynctr_taylor_{os.getpid()}_{i}.json') for i in range(2)]
    for out in outs: assert nc.run(dataclasses.replace(cfg, out=out)) == 0
    with open(outs[0], 'rb') as f0, open(outs[1], 'rb') as f1: assert f0.read() == f1.read()
    doc = nc.load_document(outs[0])
    assert [(W.g, W.n) for W in doc['tensors']] == cfg.targets
    W13 = doc['tensors'][-1]
    assert nc.w_eval(W13, [Fraction(3)]) == taylor_w13(Fraction(3), V_TAYLOR, HBAR_TAYLOR)
    for out in outs: os.remove(out)


if __name__ == "__main__":
    test_gaudin_golden()
    test_taylor_golden()
    test_property_suite()
    test_oracle_orders()
    test_taylor_run_deterministic()
