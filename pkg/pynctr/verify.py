from __future__ import annotations
import time
import math
import itertools
import functools
import concurrent.futures
import numpy as np
import pandas as pd
import statsmodels.api as smapi
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Any
from collections.abc import Sequence, Mapping, Callable
from pynctr.nc_utils import assert_, get_child_logger, NCException, DEFAULTS
from pynctr.numfield import Backend, BigFloatBackend, Scalar, RatFun, PoleBasis, LaurentSeries, local_expand, potential_taylor, residue, get_backend
from pynctr.bethe import Potential, build_y_u, random_probes
from pynctr.kernel import build_kernel_table, random_free_k2, validate_kernel
from pynctr.correlators import WTensor, RecursionContext, compute_w, w_eval, w_eval_derivative, w_residue_moment, symmetry_defect
from pynctr.energies import free_energy, resolve, energy_record
from pynctr.nc_io import scalar_from_json

_logger = get_child_logger(__name__)

PASS = 'pass'
FAIL = 'fail'
INCONCLUSIVE = 'inconclusive'


@dataclass
class CheckReport:
    '''
    Outcome of one check.  status is pass exactly when residual <= tolerance, except for finite difference checks
    which may also report inconclusive
    '''
    name: str
    status: str
    residual: float
    tolerance: float
    seed: int | None = None
    probes: list[str] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)
    runtime_ms: float = 0.
    message: str = ''

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self, include_runtime: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {'name': self.name,
                               'status': self.status,
                               'residual': self.residual if math.isfinite(self.residual) else str(self.residual),
                               'tolerance': self.tolerance,
                               'seed': self.seed,
                               'probes': self.probes,
                               'params': {k: str(v) for k, v in self.params.items()},
                               'message': self.message}
        if include_runtime: out['runtime_ms'] = round(self.runtime_ms, 3)
        return out


def _report(name: str, residual: float, tol: float, start: float, seed: int | None = None, probes: Sequence[Any] = (),
            params: dict[str, Any] | None = None, status: str | None = None, message: str = '') -> CheckReport:
    if status is None: status = PASS if residual <= tol else FAIL
    report = CheckReport(name, status, float(residual), tol, seed, [str(p) for p in probes], params if params is not None else {},
                         (time.perf_counter() - start) * 1000., message)
    log = _logger.info if status == PASS else _logger.warning
    log(f'{name}: {status} residual: {residual:.3e} tolerance: {tol:.1e}')
    return report


def _tol(b: Backend) -> float:
    return 0. if b.exact else DEFAULTS['check_rel_tol']


def _fd_backend(ctx: RecursionContext) -> Backend:
    return ctx.backend if not ctx.backend.exact else BigFloatBackend(DEFAULTS['bigfloat_bits'])


def _fd_tol(b: Backend) -> float:
    return DEFAULTS['fd_rel_tol'] if b.name == 'double' else DEFAULTS['fd_rel_tol_precise']


def _fd_status(r1: float, r2: float, tol: float) -> str:
    '''
    r1, r2: residuals at steps eps and eps / 2.  A residual that is still shrinking fast or that grows on halving
    is truncation or rounding dominated and gives no verdict; a stable one is a genuine mismatch
    '''
    if r2 <= tol: return PASS
    if r1 >= 2.5 * r2 or r2 > 1.5 * r1: return INCONCLUSIVE
    return FAIL


def _fd_steps(eps: Any) -> list[Fraction]:
    step = Fraction(str(eps if eps is not None else DEFAULTS['fd_step']))
    return [step, step / 2]


def _avoid(ctx: RecursionContext) -> list[Scalar]:
    return list(ctx.sys.roots) + [a for a, _ in ctx.sys.potential.poles]


def _probe_tuples(ctx: RecursionContext, n: int, count: int | None, rng: np.random.Generator) -> list[list[Scalar]]:
    '''count random tuples of n distinct probe points away from the roots and the potential poles'''
    if count is None: count = DEFAULTS['num_probes']
    if n == 0: return [[]]
    return [random_probes(ctx.backend, n, _avoid(ctx), rng) for _ in range(count)]


def _rel(b: Backend, values: Sequence[Scalar], expected: Sequence[Scalar]) -> float:
    '''max |v - e| relative to the largest |e|'''
    if b.exact and all(v == e for v, e in zip(values, expected)): return 0.
    scale = max([b.abs(e) for e in expected] + [b.abs(v) for v in values] + [b.zero_tol, 1e-300])
    return max(b.abs(v - e) for v, e in zip(values, expected)) / scale


def _bar(W: WTensor) -> WTensor:
    return replace(W, universal_part=False) if W.universal_part else W


def _tensor_on(W: WTensor, b: Backend) -> WTensor:
    if W.backend is b: return W
    return WTensor.create(W.g, W.n, {idx: b.convert(v) for idx, v in W.terms.items()}, [b.convert(s) for s in W.roots], b,
                          W.universal_part)


def _tensor_diff(W1: WTensor, W2: WTensor) -> float:
    b = W1.backend
    worst = 0.
    for idx in set(W1.terms) | set(W2.terms):
        worst = max(worst, b.rel_diff(W1.coeff(idx), W2.coeff(idx)))
    return worst


def check_symmetry(ctx: RecursionContext, g: int, n: int, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''Coefficient tensor invariant under slot permutations, and values unchanged under permuted inputs'''
    start = time.perf_counter()
    W = compute_w(ctx, g, n)
    b = ctx.backend
    residual = symmetry_defect(W)
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    for X in tuples:
        base = w_eval(W, X)
        for perm in itertools.permutations(range(n)):
            residual = max(residual, b.rel_diff(w_eval(W, [X[p] for p in perm]), base))
    return _report(f'symmetry(g={g},n={n})', residual, _tol(b), start, seed, tuples)


def _series(f: PoleBasis | RatFun, s: Scalar, order: int, b: Backend) -> LaurentSeries:
    return local_expand(f, s, order, b)


def loop_equation_principal_parts(ctx: RecursionContext, g: int, n: int, points: Sequence[Scalar]) -> tuple[float, float]:
    '''
    Principal parts at every root of

        P(x) = -V'(x) W_{n+1}(x, J) + sum_{h, I} W_{|I|+1}^(h)(x, I) W_{n-|I|+1}^(g-h)(x, J \\ I) + W_{n+2}^(g-1)(x, x, J)
               + hbar d/dx W_{n+1}(x, J) + sum_j W_n(x, J \\ x_j) / (x - x_j)^2

    with every W taken without the universal part of W_2^(0), at the external points J.  Returns the largest principal
    coefficient of P and the largest principal coefficient among its terms.
    '''
    b = ctx.backend
    sys = ctx.sys
    J = list(points)
    assert_(len(J) == n, f'need {n} external points')
    target = compute_w(ctx, g, n + 1)
    needed = [target] + [compute_w(ctx, h, k + 1) for h in range(g + 1) for k in range(n + 1)]
    if g >= 1: needed.append(compute_w(ctx, g - 1, n + 2))
    order = max(max(W.max_order() for W in needed), 2) + 2
    vprime = sys.potential.vprime()
    worst, scale = 0., 0.
    for i, s in enumerate(sys.roots):
        terms: list[LaurentSeries] = []
        main = target.restrict(0, J)
        terms.append(-(_series(vprime, s, order, b) * _series(main, s, order, b)))
        terms.append(_series(main.derivative(), s, order, b).scale(sys.hbar))
        for h in range(g + 1):
            for mask in range(1 << n):
                inside = [J[a] for a in range(n) if mask >> a & 1]
                outside = [J[a] for a in range(n) if not mask >> a & 1]
                left = compute_w(ctx, h, len(inside) + 1).restrict(0, inside)
                right = compute_w(ctx, g - h, len(outside) + 1).restrict(0, outside)
                terms.append(_series(left, s, order, b) * _series(right, s, order, b))
        if g >= 1:
            D = compute_w(ctx, g - 1, n + 2)
            pairs: dict[tuple[int, int], dict[tuple[int, int], Scalar]] = {}
            for idx, c in D.terms.items():
                for (j, k), x in zip(idx[2:], J): c = c / (x - sys.roots[j]) ** k
                row = pairs.setdefault(idx[0], {})
                row[idx[1]] = row[idx[1]] + c if idx[1] in row else c
            for jk, row in pairs.items():
                terms.append(_series(PoleBasis({jk: b.one}, sys.roots), s, order, b) * _series(PoleBasis(row, sys.roots), s, order, b))
        if n >= 1:
            lower = compute_w(ctx, g, n)
            for a in range(n):
                others = J[:a] + J[a + 1:]
                terms.append(_series(lower.restrict(0, others), s, order, b) * _series(RatFun.pole(J[a], 2, 1, b), s, order, b))
        total = functools.reduce(lambda u, v: u + v, terms)
        for e in range(total.valuation, 0):
            worst = max(worst, b.abs(total.coeff(e)))
            for t in terms: scale = max(scale, b.abs(t.coeff(e)))
    return worst, scale


def check_loop_equation(ctx: RecursionContext, g: int, n: int, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''
    P_{n+1}^(g)(x; J) has no poles at the roots, for n external points J at random probes.
    Residual is relative to the largest principal coefficient of the individual terms
    '''
    start = time.perf_counter()
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    residual = 0.
    for X in tuples:
        worst, scale = loop_equation_principal_parts(ctx, g, n, X)
        if worst != 0: residual = max(residual, worst / max(scale, 1e-300))
    return _report(f'loop_equation(g={g},n={n + 1})', residual, _tol(ctx.backend), start, seed, tuples)


def check_kernel_independence(ctx: RecursionContext, targets: Sequence[tuple[int, int]], trials: int = 2, seed: int = 0) -> CheckReport:
    '''Correlators recomputed with random values of the free kernel coefficients K_{i,2} must not change'''
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    b = ctx.backend
    residual = 0.
    kernel_changed = False
    for _ in range(trials):
        table = build_kernel_table(ctx.sys, ctx.table.k_max, free_k2=random_free_k2(ctx.sys, rng))
        other = ctx.clone(table=table)
        kernel_changed = kernel_changed or any(table.K(i, 2) != ctx.table.K(i, 2) for i in range(ctx.sys.m))
        for g, n in targets:
            residual = max(residual, _tensor_diff(compute_w(ctx, g, n), compute_w(other, g, n)))
    tol = 0. if b.exact else DEFAULTS['float_rel_tol']
    return _report('kernel_independence', residual, tol, start, seed, params={'targets': list(targets), 'kernel_changed': kernel_changed})


def w30_rauch(ctx: RecursionContext, points: Sequence[Scalar]) -> Scalar:
    '''4 sum_i Res_{x -> s_i} B(x, x1) B(x, x2) B(x, x3) / Y'(x), by local expansion at each root'''
    b = ctx.backend
    sys = ctx.sys
    B = compute_w(ctx, 0, 2)
    order = 8
    out = b.zero
    for s in sys.roots:
        ypp = potential_taylor(sys.potential, s, order + 1, b, with_constant=False).vprime.derivative()
        yprime = ypp + _series(PoleBasis({(j, 2): 2 * sys.hbar for j in range(sys.m)}, sys.roots), s, order, b)
        prod = yprime.inverse()
        for x in points:
            factor = _series(B.restrict(0, [x]), s, order, b) + _series(RatFun.pole(x, 2, Fraction(1, 2), b), s, order, b)
            prod = prod * factor
        out = out + residue(prod)
    return 4 * out


def w30_explicit(ctx: RecursionContext, points: Sequence[Scalar]) -> Scalar:
    '''W_3^(0) at the three points from its closed form in A, the roots and the third derivative of V at the roots'''
    sys = ctx.sys
    b = sys.backend
    A, r, h, m = sys.A, sys.roots, sys.hbar, sys.m
    z1, z2, z3 = points
    v3 = [sys.potential.derivative_at(s, 2) for s in r]
    first, second, third = b.zero, b.zero, b.zero
    for l_, j, k in itertools.product(range(m), repeat=3):
        den = (z1 - r[l_]) ** 2 * (z2 - r[j]) ** 2 * (z3 - r[k]) ** 2
        acc1, acc2, acc3 = b.zero, b.zero, b.zero
        for i in range(m):
            if i == l_: acc1 = acc1 + A[i][j] * A[i][k] / (z1 - r[i])
            if i == j: acc1 = acc1 + A[i][l_] * A[i][k] / (z2 - r[i])
            if i == k: acc1 = acc1 + A[i][l_] * A[i][j] / (z3 - r[i])
            for ip in range(m):
                if ip == i: continue
                num = A[i][j] * A[i][k] * A[ip][l_] + A[i][j] * A[ip][k] * A[i][l_] + A[i][k] * A[ip][j] * A[i][l_] - A[i][j] * A[i][k] * A[i][l_]
                acc2 = acc2 + num / (r[ip] - r[i]) ** 3
            acc3 = acc3 + A[i][j] * A[i][k] * A[i][l_] * v3[i]
        first, second, third = first + acc1 / den, second + acc2 / den, third + acc3 / den
    return 2 * first / h + 4 * second / h - third / (h * h)


def check_w30_forms(ctx: RecursionContext, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''Three way agreement for W_3^(0): the recursion, the residue formula with B^3 / Y', and the explicit tensor formula'''
    start = time.perf_counter()
    b = ctx.backend
    W = compute_w(ctx, 0, 3)
    tuples = _probe_tuples(ctx, 3, probes, np.random.default_rng(seed))
    residual = 0.
    for X in tuples:
        rec = w_eval(W, X)
        residual = max(residual, b.rel_diff(rec, w30_rauch(ctx, X)), b.rel_diff(rec, w30_explicit(ctx, X)))
    return _report('w30_forms', residual, _tol(b), start, seed, tuples)


def _fd_check(name: str, start: float, seed: int, tuples: Sequence[Any], fb: Backend, expected: Sequence[Scalar],
              estimate: Callable[[Fraction], list[Scalar]], steps: Sequence[Fraction], params: dict[str, Any]) -> CheckReport:
    r1, r2 = (_rel(fb, estimate(step), expected) for step in steps)
    tol = _fd_tol(fb)
    status = _fd_status(r1, r2, tol)
    params = dict(params, eps=str(steps[0]), residual_eps=f'{r1:.3e}')
    return _report(name, r2, tol, start, seed, tuples, params, status=status)


def check_variational(ctx: RecursionContext, g: int, n: int, p: int = 2, eps: Any = None, probes: int | None = None,
                      seed: int = 0) -> CheckReport:
    '''
    d/d eps W_n^(g)(V + eps x^p) at eps = 0 by central differences, against -sum_i Res x^p W_{n+1}^(g)(..., x).
    The perturbed systems are re-solved from the current roots
    '''
    start = time.perf_counter()
    assert_(n >= 1 and p >= 1, 'need n >= 1 and p >= 1, use check_energy_variational for n = 0')
    b, fb = ctx.backend, _fd_backend(ctx)
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    weight = RatFun.polynomial([0] * p + [1], b)
    moment = w_residue_moment(compute_w(ctx, g, n + 1), n, weight)
    expected = [-fb.convert(w_eval(moment, X)) for X in tuples]
    fX = [[fb.convert(x) for x in X] for X in tuples]
    V = ctx.sys.potential

    def estimate(step: Fraction) -> list[Scalar]:
        Wp = compute_w(resolve(ctx, potential=V.perturbed(p, step), backend=fb), g, n)
        Wm = compute_w(resolve(ctx, potential=V.perturbed(p, -step), backend=fb), g, n)
        return [(w_eval(Wp, X) - w_eval(Wm, X)) / (2 * fb.convert(step)) for X in fX]

    return _fd_check(f'variational(g={g},n={n},p={p})', start, seed, tuples, fb, expected, estimate, _fd_steps(eps), {'p': p})


def check_resy(ctx: RecursionContext, g: int, n: int, k: int, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''
    sum_a d/dx_a (x_a^k W_n^(g)) = -sum_i Res x^k V'(x) W_{n+1}^(g)(..., x) for k = 0, 1.
    Exact on the rational backend
    '''
    start = time.perf_counter()
    assert_(n >= 1 and k in (0, 1), f'need n >= 1 and k in (0, 1), got n={n} k={k}')
    b = ctx.backend
    W = compute_w(ctx, g, n)
    weight = RatFun.polynomial([0] * k + [1], b) * ctx.sys.potential.vprime()
    moment = w_residue_moment(compute_w(ctx, g, n + 1), n, weight)
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    lhs, rhs = [], []
    for X in tuples:
        acc = b.zero
        value = w_eval(W, X) if k == 1 else b.zero
        for a in range(n):
            acc = acc + X[a] ** k * w_eval_derivative(W, a, X) + k * value
        lhs.append(acc)
        rhs.append(-w_eval(moment, X))
    residual = max(b.rel_diff(u, v) for u, v in zip(lhs, rhs))
    return _report(f'resy(g={g},n={n},k={k})', residual, _tol(b), start, seed, tuples, {'k': k})


def check_dilaton(ctx: RecursionContext, g: int, n: int, eps: Any = None, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''
    (2 - 2g - n - hbar d/dhbar) W_n^(g) = -sum_i Res V(x) W_{n+1}^(g)(..., x), without the universal part of W_2^(0).
    hbar d/dhbar by central differences; V carries its log terms so the residue side runs on a float backend
    '''
    start = time.perf_counter()
    assert_(n >= 1, 'need n >= 1, use check_energy_dilaton for n = 0')
    fb = _fd_backend(ctx)
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    fX = [[fb.convert(x) for x in X] for X in tuples]
    W = _tensor_on(_bar(compute_w(ctx, g, n)), fb)
    moment = w_residue_moment(_tensor_on(compute_w(ctx, g, n + 1), fb), n, ctx.sys.potential.with_backend(fb))
    center = [(2 - 2 * g - n) * w_eval(W, X) for X in fX]
    rhs = [-w_eval(moment, X) for X in fX]
    hbar = fb.convert(ctx.sys.hbar)

    def estimate(step: Fraction) -> list[Scalar]:
        Wp = _bar(compute_w(resolve(ctx, hbar=hbar * fb.convert(1 + step), backend=fb), g, n))
        Wm = _bar(compute_w(resolve(ctx, hbar=hbar * fb.convert(1 - step), backend=fb), g, n))
        return [c - (w_eval(Wp, X) - w_eval(Wm, X)) / (2 * fb.convert(step)) for c, X in zip(center, fX)]

    return _fd_check(f'dilaton(g={g},n={n})', start, seed, tuples, fb, rhs, estimate, _fd_steps(eps), {})


def asymptotic_coefficient(m: int, g: int, hbar: Scalar) -> Scalar:
    '''
    Coefficient of 1/x in W_1^(g) at large x

    >>> asymptotic_coefficient(1, 2, Fraction(1, 10))
    Fraction(-1000, 1)
    '''
    if g == 0: return m * hbar
    return -(-1) ** g * m * hbar ** (1 - 2 * g) * math.factorial(2 * g - 2) / (math.factorial(g) * math.factorial(g - 1))


def check_asymptotics(ctx: RecursionContext, g: int) -> CheckReport:
    start = time.perf_counter()
    b = ctx.backend
    W = compute_w(ctx, g, 1)
    lead = b.zero
    for idx, c in W.terms.items():
        if idx[0][1] == 1: lead = lead + c
    expected = asymptotic_coefficient(ctx.sys.m, g, ctx.sys.hbar)
    return _report(f'asymptotics(g={g})', b.rel_diff(lead, expected), _tol(b), start, params={'lead': lead})


def _w1_ratfun(ctx: RecursionContext) -> RatFun:
    return compute_w(ctx, 0, 1).to_pole_basis().to_ratfun(ctx.backend)


def _identity_residual(lhs: RatFun, rhs: RatFun, points: Sequence[Scalar]) -> float:
    b = lhs.backend
    if b.exact and (lhs - rhs).is_zero(): return 0.
    return _rel(b, [lhs(x) for x in points], [rhs(x) for x in points])


def check_omega_identity(ctx: RecursionContext, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''omega^2 + hbar omega' = hbar sum_i V'(s_i) / (x - s_i), with omega = W_1^(0)'''
    start = time.perf_counter()
    b = ctx.backend
    sys = ctx.sys
    w = _w1_ratfun(ctx)
    rhs = RatFun.const(0, b)
    for s in sys.roots: rhs = rhs + RatFun.pole(s, 1, sys.hbar * sys.potential.vprime_at(s), b)
    points = [X[0] for X in _probe_tuples(ctx, 1, probes, np.random.default_rng(seed))]
    residual = _identity_residual(w * w + w.derivative() * sys.hbar, rhs, points)
    return _report('omega_identity', residual, _tol(b), start, seed, points)


def check_ricatti(ctx: RecursionContext, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''Y^2 - 2 hbar Y' = U with Y = V' - 2 W_1^(0), and U regular at the roots'''
    start = time.perf_counter()
    b = ctx.backend
    sys = ctx.sys
    _, U = build_y_u(sys)
    Y = sys.potential.vprime() - _w1_ratfun(ctx) * 2
    points = [X[0] for X in _probe_tuples(ctx, 1, probes, np.random.default_rng(seed))]
    residual = _identity_residual(Y * Y - Y.derivative() * (2 * sys.hbar), U, points)
    return _report('ricatti', residual, _tol(b), start, seed, points)


def check_kernel_ode(ctx: RecursionContext, seed: int = 0) -> CheckReport:
    start = time.perf_counter()
    v = validate_kernel(ctx.table, ctx.sys, seed=seed)
    residual = max(v.max_ode_residual, v.k1_closed_form_residual, v.k3_closed_form_residual)
    return _report('kernel_ode', residual, _tol(ctx.backend), start, seed, v.probes, {'order': v.order})


def _dense_first_slot(W: WTensor, rest: Sequence[Scalar], b: Backend) -> RatFun:
    '''W without its universal part as a rational function of its first argument, the others fixed at rest'''
    out = RatFun.const(0, b)
    for idx, c in W.terms.items():
        for (j, k), x in zip(idx[1:], rest): c = c / (x - W.roots[j]) ** k
        out = out + RatFun.pole(W.roots[idx[0][0]], idx[0][1], c, b)
    return out


def check_pole_reconstruction(ctx: RecursionContext, g: int, n: int, probes: int | None = None, seed: int = 0) -> CheckReport:
    '''
    Recomputes W_n^(g) from the kernel in a context with an empty cache, rebuilds it in its first slot as a dense
    rational function, and checks its values at probes and its principal parts at every root against the tensor
    held by ctx
    '''
    start = time.perf_counter()
    b = ctx.backend
    W = compute_w(ctx, g, n)
    fresh = compute_w(ctx.clone(), g, n)
    tuples = _probe_tuples(ctx, n, probes, np.random.default_rng(seed))
    residual = 0.
    for X in tuples:
        dense = _dense_first_slot(fresh, X[1:], b)
        value = dense(X[0])
        if W.universal_part: value = value + 1 / (2 * (X[0] - X[1]) ** 2)
        residual = max(residual, b.rel_diff(value, w_eval(W, X)))
        pb = W.restrict(0, X[1:])
        for i, s in enumerate(ctx.sys.roots):
            principal = local_expand(dense, s, 0, b).principal_part()
            for (j, k), c in pb.terms.items():
                if j == i: residual = max(residual, b.rel_diff(principal.get(-k, b.zero), c))
    return _report(f'pole_reconstruction(g={g},n={n})', residual, _tol(b), start, seed, tuples)



def check_energy_variational(ctx: RecursionContext, g: int, p: int = 2, eps: Any = None) -> CheckReport:
    '''d/d eps F^(g)(V + eps x^p) against -sum_i Res x^p W_1^(g)'''
    start = time.perf_counter()
    b, fb = ctx.backend, _fd_backend(ctx)
    expected = [-fb.convert(w_residue_moment(compute_w(ctx, g, 1), 0, RatFun.polynomial([0] * p + [1], b)).scalar())]
    V = ctx.sys.potential

    def estimate(step: Fraction) -> list[Scalar]:
        Fp = free_energy(resolve(ctx, potential=V.perturbed(p, step), backend=fb), g)
        Fm = free_energy(resolve(ctx, potential=V.perturbed(p, -step), backend=fb), g)
        return [fb.convert(Fp - Fm) / (2 * fb.convert(step))]

    return _fd_check(f'energy_variational(g={g},p={p})', start, 0, [], fb, expected, estimate, _fd_steps(eps), {'p': p})


def check_energy_dilaton(ctx: RecursionContext, g: int, eps: Any = None) -> CheckReport:
    '''(2 - 2g - hbar d/dhbar) F^(g) = -sum_i Res V W_1^(g)'''
    start = time.perf_counter()
    fb = _fd_backend(ctx)
    W = _tensor_on(compute_w(ctx, g, 1), fb)
    expected = [-w_residue_moment(W, 0, ctx.sys.potential.with_backend(fb)).scalar()]
    center = (2 - 2 * g) * fb.convert(free_energy(resolve(ctx, backend=fb), g))
    hbar = fb.convert(ctx.sys.hbar)

    def estimate(step: Fraction) -> list[Scalar]:
        Fp = free_energy(resolve(ctx, hbar=hbar * fb.convert(1 + step), backend=fb), g)
        Fm = free_energy(resolve(ctx, hbar=hbar * fb.convert(1 - step), backend=fb), g)
        return [center - fb.convert(Fp - Fm) / (2 * fb.convert(step))]

    return _fd_check(f'energy_dilaton(g={g})', start, 0, [], fb, expected, estimate, _fd_steps(eps), {})


def check_energy_homogeneity(ctx: RecursionContext, g: int, lam: Any = 2) -> CheckReport:
    '''F^(g)(lam V, lam hbar) = lam^(2 - 2g) F^(g)(V, hbar)'''
    start = time.perf_counter()
    fb = _fd_backend(ctx)
    lam = Fraction(lam)
    F = fb.convert(free_energy(resolve(ctx, backend=fb), g))
    F_scaled = fb.convert(free_energy(resolve(ctx, potential=ctx.sys.potential.scaled(lam), hbar=fb.convert(ctx.sys.hbar) * fb.convert(lam), backend=fb), g))
    residual = fb.rel_diff(F_scaled, F * fb.convert(lam) ** (2 - 2 * g))
    return _report(f'energy_homogeneity(g={g})', residual, DEFAULTS['check_rel_tol'], start, params={'lambda': lam})


def _record_scalar(rec: Mapping[str, Any], key: str) -> tuple[Backend, Any]:
    b = get_backend(rec['backend'], rec.get('bits'))
    return b, scalar_from_json(rec[key], b)


def _scalar_diff(a: tuple[Backend, Any], c: tuple[Backend, Any]) -> float:
    (ba, va), (bc, vc) = a, c
    if ba.exact and bc.exact: return ba.rel_diff(va, vc)
    za, zc = complex(va), complex(vc)
    return abs(za - zc) / max(1., abs(za), abs(zc))


def _record_diff(golden: Mapping[str, Any], current: Mapping[str, Any]) -> float:
    worst = 0.
    for key in ('analytic', 'value'):
        if golden.get(key) is None or current.get(key) is None: continue
        worst = max(worst, _scalar_diff(_record_scalar(golden, key), _record_scalar(current, key)))
    if 'logs' in golden:
        if len(golden['logs']) != len(current.get('logs', [])): return math.inf
        bg, bc = get_backend(golden['backend'], golden.get('bits')), get_backend(current['backend'], current.get('bits'))
        for lg, lc in zip(golden['logs'], current['logs']):
            for x, y in zip(lg, lc):
                worst = max(worst, _scalar_diff((bg, scalar_from_json(x, bg)), (bc, scalar_from_json(y, bc))))
    return worst


def check_golden(ctx: RecursionContext, document: Mapping[str, Any]) -> CheckReport:
    '''
    Compares tensors and energies with a document read by nc_io.load_document
    '''
    start = time.perf_counter()
    b = ctx.backend
    residual = 0.
    for T in document.get('tensors', []):
        W = compute_w(ctx, T.g, T.n)
        residual = max(residual, _tensor_diff(W, _tensor_on(T, b) if T.backend.spec() != b.spec() else replace(T, backend=b)))
    exact = b.exact
    for rec in document.get('energies', []):
        current = energy_record(ctx, int(rec['g']))
        exact = exact and rec['backend'] == 'rational' and current['backend'] == 'rational'
        residual = max(residual, _record_diff(rec, current))
    tol = 0. if exact else DEFAULTS['check_rel_tol']
    return _report('golden', residual, tol, start, params={'tensors': len(document.get('tensors', [])),
                                                           'energies': len(document.get('energies', []))})


def is_gaudin_one_point(V: Potential) -> bool:
    '''True for V'(x) = x - s^2 / x'''
    return (len(V.poly) == 2 and V.poly[0] == 0 and V.poly[1] == 1 and len(V.poles) == 1 and V.poles[0][0] == 0
            and V.poles[0][1] != 0)


def oracle_partition_function(ctx: RecursionContext, Ns: Sequence[int] = (8, 16, 32), beta: Any = 4, n_ref: int = 2,
                              genera: Sequence[int] = (1, 2, 3), bits: int | None = None) -> CheckReport:
    '''
    Compares ln Z_N of the one dimensional integral Z = int_0^inf x^(a s^2) exp(-a x^2 / 2) dx, a = N sqrt(beta_N),
    with 1/2 ln(2 pi / (beta_N - 1)) + sum_{g <= G} N^(2 - 2g) F^(g) at fixed hbar = (sqrt(beta) - 1 / sqrt(beta)) / n_ref.
    beta_N is set by hbar = (sqrt(beta_N) - 1 / sqrt(beta_N)) / N.  The truncation at G leaves a deficit decaying like
    N^(-2G); its log log slope, fitted by OLS, must be within 1 of -2G for every G in genera.

    Args:
        ctx: context of a one root system with V'(x) = x - s^2 / x
        Ns: matrix sizes, at least two
        beta: the beta of the ensemble, != 1
        n_ref: the N at which hbar corresponds to beta
    '''
    start = time.perf_counter()
    name = f'oracle(beta={beta})'
    beta = Fraction(str(beta))
    if beta == 1:
        return _report(name, math.inf, 1., start, status=FAIL, message='beta = 1 is the classical point hbar = 0, refused')
    V = ctx.sys.potential
    assert_(ctx.sys.m == 1 and is_gaudin_one_point(V), "oracle needs one root and V'(x) = x - s^2 / x")
    assert_(len(Ns) >= 2, 'need at least two values of N')
    bf = BigFloatBackend(bits if bits is not None else DEFAULTS['bigfloat_bits'])
    c = bf.ctx
    sb = c.sqrt(bf.convert(beta))
    hbar = (sb - 1 / sb) / n_ref
    fctx = resolve(ctx, hbar=hbar, backend=bf)
    s2 = -bf.convert(V.poles[0][1])
    F = [bf.convert(free_energy(fctx, g)) for g in range(max(genera) + 1)]
    deficits: dict[int, list[float]] = {G: [] for G in genera}
    for N in Ns:
        sbN = (N * hbar + c.sqrt(N * N * hbar * hbar + 4)) / 2
        a = N * sbN
        e = (a * s2 + 1) / 2
        ln_z = c.loggamma(e) + e * c.log(2 / a) - c.log(2)
        base = c.log(2 * c.pi / (sbN * sbN - 1)) / 2
        for G in genera:
            pred = base + sum(c.mpf(N) ** (2 - 2 * g) * F[g] for g in range(G + 1))
            deficits[G].append(max(float(abs(ln_z - pred)), 1e-300))
    x = np.log(np.array(Ns, dtype=float))
    slopes: dict[int, float] = {}
    for G in genera:
        y = np.log(np.array(deficits[G]))
        fit = smapi.OLS(endog=y, exog=np.column_stack([x, np.ones(len(x))]), hasconst=True).fit()
        slopes[G] = float(fit.params[0])
    residual = max(abs(slopes[G] + 2 * G) for G in genera)
    params = {'hbar': c.nstr(hbar, 12), 'slopes': {G: round(v, 4) for G, v in slopes.items()},
              'deficits': {G: [f'{d:.3e}' for d in v] for G, v in deficits.items()}}
    return _report(name, residual, 1., start, params=params)


CHECK_NAMES = ['symmetry', 'loop_equation', 'kernel_independence', 'w30_forms', 'variational', 'resy', 'dilaton', 'asymptotics',
               'omega_identity', 'ricatti', 'kernel_ode', 'pole_reconstruction', 'energy_variational', 'energy_dilaton',
               'energy_homogeneity', 'oracle', 'golden']


def _guarded(name: str, fn: Callable[[], CheckReport]) -> CheckReport:
    start = time.perf_counter()
    try:
        return fn()
    except NCException as e:
        _logger.warning(f'{name}: {type(e).__name__}: {e}')
        return CheckReport(name, FAIL, math.inf, 0., params=e.diagnostic(), runtime_ms=(time.perf_counter() - start) * 1000.,
                           message=str(e))


def plan_checks(ctx: RecursionContext, names: Sequence[str] | str = 'all', targets: Sequence[tuple[int, int]] = ((0, 3), (1, 1)),
                energies: Sequence[int] = (), seed: int = 0, probes: int | None = None, golden: Mapping[str, Any] | None = None,
                oracle_args: Mapping[str, Any] | None = None) -> list[tuple[str, Callable[[], CheckReport]]]:
    '''
    The (name, job) list run_checks executes.  'all' means every check that applies: oracle only for V'(x) = x - s^2 / x
    with one root, golden only when a document is given.  Per target (g, n) checks run for each target they apply to
    '''
    if isinstance(names, str):
        assert_(names == 'all', f'unknown check set {names}')
        names = [n for n in CHECK_NAMES if n != 'golden' or golden is not None]
        if ctx.sys.m != 1 or not is_gaudin_one_point(ctx.sys.potential): names = [n for n in names if n != 'oracle']
    unknown = set(names) - set(CHECK_NAMES)
    assert_(not unknown, f'unknown checks: {sorted(unknown)}')
    jobs: list[tuple[str, Callable[[], CheckReport]]] = []
    P = functools.partial
    for name in names:
        if name == 'symmetry':
            jobs += [(f'{name}(g={g},n={n})', P(check_symmetry, ctx, g, n, probes, seed)) for g, n in targets if n >= 2]
        elif name == 'loop_equation':
            jobs += [(f'{name}(g={g},n={n})', P(check_loop_equation, ctx, g, n - 1, probes, seed)) for g, n in targets]
        elif name == 'kernel_independence':
            jobs.append((name, P(check_kernel_independence, ctx, list(targets), 2, seed)))
        elif name == 'w30_forms':
            jobs.append((name, P(check_w30_forms, ctx, probes, seed)))
        elif name == 'variational':
            jobs += [(f'{name}(g={g},n={n})', P(check_variational, ctx, g, n, 2, None, probes, seed)) for g, n in targets]
        elif name == 'resy':
            jobs += [(f'{name}(g={g},n={n},k={k})', P(check_resy, ctx, g, n, k, probes, seed)) for g, n in targets for k in (0, 1)]
        elif name == 'dilaton':
            jobs += [(f'{name}(g={g},n={n})', P(check_dilaton, ctx, g, n, None, probes, seed)) for g, n in targets]
        elif name == 'asymptotics':
            jobs += [(f'{name}(g={g})', P(check_asymptotics, ctx, g)) for g, n in targets if n == 1]
        elif name == 'omega_identity':
            jobs.append((name, P(check_omega_identity, ctx, probes, seed)))
        elif name == 'ricatti':
            jobs.append((name, P(check_ricatti, ctx, probes, seed)))
        elif name == 'kernel_ode':
            jobs.append((name, P(check_kernel_ode, ctx, seed)))
        elif name == 'pole_reconstruction':
            jobs += [(f'{name}(g={g},n={n})', P(check_pole_reconstruction, ctx, g, n, probes, seed)) for g, n in targets]
        elif name == 'energy_variational':
            jobs += [(f'{name}(g={g})', P(check_energy_variational, ctx, g)) for g in energies]
        elif name == 'energy_dilaton':
            jobs += [(f'{name}(g={g})', P(check_energy_dilaton, ctx, g)) for g in energies]
        elif name == 'energy_homogeneity':
            jobs += [(f'{name}(g={g})', P(check_energy_homogeneity, ctx, g)) for g in energies]
        elif name == 'oracle':
            jobs.append((name, P(oracle_partition_function, ctx, **(oracle_args or {}))))
        elif name == 'golden':
            assert_(golden is not None, 'golden check needs a document')
            jobs.append((name, P(check_golden, ctx, golden)))
    return jobs


def run_checks(ctx: RecursionContext, names: Sequence[str] | str = 'all', targets: Sequence[tuple[int, int]] = ((0, 3), (1, 1)),
               energies: Sequence[int] = (), threads: int = 1, seed: int = 0, probes: int | None = None,
               golden: Mapping[str, Any] | None = None, oracle_args: Mapping[str, Any] | None = None) -> list[CheckReport]:
    '''
    Runs the requested checks, in a thread pool when threads > 1.  Reports come back in request order;
    a check that raises is reported as failed with the error as message.
    '''
    jobs = plan_checks(ctx, names, targets, energies, seed, probes, golden, oracle_args)
    if threads <= 1: return [_guarded(name, fn) for name, fn in jobs]
    with concurrent.futures.ThreadPoolExecutor(threads) as executor:
        return list(executor.map(lambda job: _guarded(*job), jobs))


def df_reports(reports: Sequence[CheckReport]) -> pd.DataFrame:
    '''
    >>> df_reports([CheckReport('ricatti', PASS, 0., 0.)])[['name', 'status']]
          name status
    0  ricatti   pass
    '''
    return pd.DataFrame([r.to_dict() for r in reports])


def _gaudin(hbar: Any = '1/10') -> RecursionContext:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    return RecursionContext(solve_bethe(Potential.gaudin_one_point(1, RationalBackend()), 1, hbar, ['0.9']))


def _taylor(hbar: Any = '1/7') -> RecursionContext:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    v = {2: 1, 3: Fraction(1, 2), 4: Fraction(1, 3), 5: Fraction(1, 4), 6: Fraction(1, 5), 7: Fraction(1, 6)}
    return RecursionContext(solve_bethe(Potential.from_taylor(v, RationalBackend()), 1, hbar, ['0.1']))


def _quartic() -> RecursionContext:
    from pynctr.numfield import DoubleBackend
    from pynctr.bethe import solve_bethe
    return RecursionContext(solve_bethe(Potential.create([0, -1, 0, 1], [], DoubleBackend()), 2, '1/20', ['-0.9', '0.9']))


def test_exact_checks() -> None:
    for ctx in [_gaudin(), _taylor()]:
        reports = [check_symmetry(ctx, 0, 3), check_symmetry(ctx, 1, 2), check_loop_equation(ctx, 0, 0), check_loop_equation(ctx, 0, 2),
                   check_loop_equation(ctx, 1, 0), check_loop_equation(ctx, 1, 1), check_kernel_independence(ctx, [(0, 3), (1, 1)]),
                   check_w30_forms(ctx), check_resy(ctx, 0, 2, 0), check_resy(ctx, 1, 1, 1), check_resy(ctx, 0, 1, 1),
                   check_omega_identity(ctx), check_ricatti(ctx), check_kernel_ode(ctx), check_pole_reconstruction(ctx, 0, 3)]
        reports += [check_asymptotics(ctx, g) for g in (0, 1, 2, 3)]
        for r in reports:
            assert_(r.passed and r.residual == 0., f'{r.name}: {r.status} {r.residual}')


def test_gaudin_w30_value() -> None:
    ctx = _gaudin()
    b = ctx.backend
    X = [b.convert(2), b.convert(3), b.convert(4)]
    hbar = Fraction(1, 10)
    expected = hbar / 2 * (1 + Fraction(1, 2) + Fraction(1, 3) + Fraction(1, 2)) / (1 * 4 * 9)
    assert_(w_eval(compute_w(ctx, 0, 3), X) == expected)
    assert_(w30_rauch(ctx, X) == expected and w30_explicit(ctx, X) == expected)


def test_quartic_checks() -> None:
    ctx = _quartic()
    reports = run_checks(ctx, ['symmetry', 'loop_equation', 'kernel_independence', 'w30_forms', 'resy', 'asymptotics', 'omega_identity',
                               'ricatti', 'kernel_ode'], targets=[(0, 3), (1, 1), (1, 2)], seed=7)
    for r in reports: assert_(r.passed, f'{r.name}: {r.residual}')
    # same requests in a thread pool give the same residuals in the same order
    again = run_checks(ctx, ['symmetry', 'w30_forms', 'resy'], targets=[(0, 3), (1, 1)], seed=7, threads=3)
    first = run_checks(ctx, ['symmetry', 'w30_forms', 'resy'], targets=[(0, 3), (1, 1)], seed=7)
    assert_([(r.name, r.residual) for r in again] == [(r.name, r.residual) for r in first])


def test_finite_difference_checks() -> None:
    gaudin = _gaudin()
    for r in [check_variational(gaudin, 0, 1, 2), check_variational(gaudin, 0, 2, 1), check_dilaton(gaudin, 0, 1), check_dilaton(gaudin, 1, 1),
              check_dilaton(gaudin, 0, 2), check_energy_variational(gaudin, 0), check_energy_variational(gaudin, 1),
              check_energy_dilaton(gaudin, 1), check_energy_homogeneity(gaudin, 0), check_energy_homogeneity(gaudin, 1)]:
        assert_(r.passed, f'{r.name}: {r.status} {r.residual} {r.params}')
    quartic = _quartic()
    for r in [check_variational(quartic, 1, 1, 2), check_dilaton(quartic, 0, 2)]:
        assert_(r.passed, f'{r.name}: {r.status} {r.residual} {r.params}')


def test_energy_checks_high_genus() -> None:
    ctx = _gaudin()
    for r in [check_energy_dilaton(ctx, 2), check_energy_homogeneity(ctx, 2), check_energy_variational(ctx, 2)]:
        assert_(r.passed, f'{r.name}: {r.status} {r.residual} {r.params}')


def test_negative_controls() -> None:
    delta = Fraction(1, 10**6)
    ctx = _gaudin()
    assert_(not check_symmetry(ctx.with_corruption(0, 3, delta), 0, 3).passed)
    assert_(not check_loop_equation(ctx.with_corruption(1, 1, delta), 1, 0).passed)
    assert_(not check_loop_equation(ctx.with_corruption(0, 2, delta), 0, 1).passed)
    assert_(not check_kernel_independence(ctx.with_corruption(0, 3, delta), [(0, 3)]).passed)
    assert_(not check_w30_forms(ctx.with_corruption(0, 3, delta)).passed)
    assert_(not check_resy(ctx.with_corruption(0, 3, delta), 0, 2, 0).passed)
    assert_(not check_resy(ctx.with_corruption(0, 3, delta), 0, 2, 1).passed)
    assert_(not check_asymptotics(ctx.with_corruption(2, 1, delta), 2).passed)
    assert_(not check_omega_identity(ctx.with_corruption(0, 1, delta)).passed)
    assert_(not check_ricatti(ctx.with_corruption(0, 1, delta)).passed)
    bad_table = ctx.table.with_entry(0, 3, (0, 3), ctx.table.entry(0, 3, 0, 3) + delta)
    assert_(not check_kernel_ode(ctx.clone(table=bad_table)).passed)
    assert_(not check_pole_reconstruction(ctx.with_corruption(0, 3, delta), 0, 3).passed)
    assert_(not check_pole_reconstruction(ctx.with_corruption(1, 1, delta), 1, 1).passed)
    fd_reports = [check_variational(ctx.with_corruption(0, 2, delta), 0, 1, 2), check_dilaton(ctx.with_corruption(1, 1, delta), 1, 1),
                  check_energy_dilaton(ctx.with_corruption(0, 0, delta), 0), check_energy_variational(ctx.with_corruption(0, 1, delta), 0)]
    for r in fd_reports: assert_(r.status == FAIL, f'{r.name}: {r.status} {r.residual}')
    assert_(not check_energy_homogeneity(ctx.with_corruption(0, 0, delta), 0).passed)


def test_oracle() -> None:
    ctx = _gaudin()
    report = oracle_partition_function(ctx, Ns=(8, 16, 32), beta=4, genera=(1, 2, 3))
    assert_(report.passed, f'{report.residual} {report.params}')
    assert_(not oracle_partition_function(ctx, beta=1).passed)
    shifted = oracle_partition_function(ctx.with_corruption(2, 0, 1), Ns=(8, 16, 32), beta=4, genera=(2, 3))
    assert_(not shifted.passed, f'{shifted.params}')


def test_guarded_failure() -> None:
    ctx = _quartic()
    reports = run_checks(ctx, ['oracle', 'ricatti'])
    assert_(reports[0].status == FAIL and 'oracle needs' in reports[0].message and reports[1].passed)
    df = df_reports(reports)
    assert_(list(df.status) == [FAIL, PASS])


if __name__ == "__main__":
    test_exact_checks()
    test_gaudin_w30_value()
    test_quartic_checks()
    test_finite_difference_checks()
    test_energy_checks_high_genus()
    test_negative_controls()
    test_oracle()
    test_guarded_failure()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
