from __future__ import annotations
import numpy as np
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Any
from collections.abc import Mapping, Sequence
from pynctr.nc_utils import assert_, get_child_logger, BetheConsistencyViolation, DEFAULTS
from pynctr.numfield import (Backend, Scalar, Matrix, RatFun, LaurentSeries, local_expand, potential_taylor)
from pynctr.bethe import BetheSystem, omega, random_probes

_logger = get_child_logger(__name__)

# A function of x0 in the pole basis: {(j, k'): c}  ->  sum c / (x0 - s_j)^k'
Terms = dict[tuple[int, int], Scalar]


def _axpy(out: Terms, a: Scalar, terms: Mapping[tuple[int, int], Scalar]) -> None:
    for key, v in terms.items():
        out[key] = out[key] + a * v if key in out else a * v


def _drop_zeros(terms: Terms) -> Terms:
    return {key: v for key, v in sorted(terms.items()) if v != 0}


def _terms_eval(terms: Mapping[tuple[int, int], Scalar], roots: Sequence[Scalar], x0: Scalar, zero: Scalar) -> Scalar:
    acc = zero
    for (j, kp), v in sorted(terms.items()): acc = acc + v / (x0 - roots[j]) ** kp
    return acc


def _terms_diff(a: Mapping[tuple[int, int], Scalar], b: Mapping[tuple[int, int], Scalar], backend: Backend) -> float:
    keys = set(a) | set(b)
    if not keys: return 0.
    return max(backend.rel_diff(a.get(key, backend.zero), b.get(key, backend.zero)) for key in keys)


def _ode_coefficients(sys: BetheSystem, i: int, count: int) -> list[Scalar]:
    '''c_l = -2 hbar sum_{a != i} 1 / (s_a - s_i)^(l+1) - V^(l+1)(s_i) / l!,  l < count'''
    b = sys.backend
    s = sys.roots
    vp = potential_taylor(sys.potential, s[i], max(count - 1, 0), b, with_constant=False).vprime
    out = []
    for l_ in range(count):
        acc = -vp.coeff(l_)
        for a in range(sys.m):
            if a != i: acc = acc - 2 * sys.hbar / (s[a] - s[i]) ** (l_ + 1)
        out.append(acc)
    return out


def _g_coefficient(sys: BetheSystem, i: int, n: int) -> Terms:
    '''Coefficient of (x - s_i)^n in the expansion of G(x0, x), as a function of x0'''
    b = sys.backend
    s, A = sys.roots, sys.A
    out: Terms = {}
    if n == -1:
        for j in range(sys.m): out[(j, 2)] = 2 * A[i][j]
        return out
    out[(i, n + 1)] = -b.one
    for j in range(sys.m):
        acc = b.zero
        for a in range(sys.m):
            if a != i: acc = acc + A[a][j] / (s[a] - s[i]) ** (n + 1)
        if acc != 0: out[(j, 2)] = out.get((j, 2), b.zero) - 2 * acc
    return out


@dataclass(frozen=True)
class KernelTable:
    '''
    Taylor coefficients K_{i,k}(x0) of the recursion kernel K(x0, x) = sum_k K_{i,k}(x0) (x - s_i)^k near each root,
    each one a pole basis function of x0.  coeffs[i][k] maps (j, k') to K_{i,k;j,k'}.
    free_k2[i] holds the value chosen for the unconstrained K_{i,2}.
    '''
    hbar: Scalar
    m: int
    k_max: int
    coeffs: tuple[tuple[Terms, ...], ...]
    free_k2: tuple[Terms, ...]
    k1_residual: float
    backend: Backend = field(compare=False, repr=False)

    def K(self, i: int, k: int) -> Terms:
        assert_(0 <= k <= self.k_max, f'kernel order {k} beyond k_max {self.k_max}')
        return self.coeffs[i][k]

    def entry(self, i: int, k: int, j: int, kp: int) -> Scalar:
        return self.K(i, k).get((j, kp), self.backend.zero)

    def extended(self, sys: BetheSystem, k_max: int) -> KernelTable:
        '''A new table with more orders and the same free coefficients.  Never mutates self'''
        if k_max <= self.k_max: return self
        _logger.debug(f'extending kernel table from k_max: {self.k_max} to {k_max}')
        return build_kernel_table(sys, k_max, free_k2=self.free_k2)

    def with_entry(self, i: int, k: int, key: tuple[int, int], value: Scalar) -> KernelTable:
        '''Copy with one coefficient replaced, for negative controls'''
        coeffs = [list(row) for row in self.coeffs]
        terms = dict(coeffs[i][k])
        terms[key] = value
        coeffs[i][k] = terms
        return KernelTable(self.hbar, self.m, self.k_max, tuple(tuple(row) for row in coeffs), self.free_k2, self.k1_residual, self.backend)


def build_kernel_table(sys: BetheSystem, k_max: int | None = None, free_k2: Sequence[Mapping[tuple[int, int], Any]] | None = None) -> KernelTable:
    '''
    Solve the kernel ODE (2 omega - V' - hbar d/dx) K(x0, x) = G(x0, x) order by order at every root.

    With e = x - s_i, matching the coefficient of e^n gives
    hbar (1 - n) K_{n+1} + sum_{l=0}^{n} c_l K_{n-l} = G_n, so K_0 and K_1 follow from n = -1, 0,
    K_2 is free and n = 1 is a consistency condition equivalent to T A = 1.

    Args:
        sys: solved Bethe system
        k_max: highest Taylor order, >= 3
        free_k2: per root value of K_{i,2} as {(j, k'): c}, default all zero

    >>> from pynctr.numfield import RationalBackend
    >>> from pynctr.bethe import Potential, solve_bethe
    >>> b = RationalBackend()
    >>> sys = solve_bethe(Potential.from_taylor({2: 2, 3: 1}, b), 1, '1/3', ['0.1'])
    >>> table = build_kernel_table(sys, 4)
    >>> table.K(0, 0), table.K(0, 1)
    ({(0, 2): Fraction(1, 2)}, {(0, 1): Fraction(-3, 1)})
    '''
    if k_max is None: k_max = DEFAULTS['k_max']
    assert_(k_max >= 3, f'k_max must be >= 3, got {k_max}')
    b = sys.backend
    hbar = sys.hbar
    if free_k2 is None: free_k2 = [{} for _ in range(sys.m)]
    assert_(len(free_k2) == sys.m, 'need one free K_2 value per root')
    free = tuple({key: b.convert(v) for key, v in f.items()} for f in free_k2)
    inv_hbar = b.inv(hbar)
    coeffs = []
    worst = 0.
    for i in range(sys.m):
        c = _ode_coefficients(sys, i, k_max)
        K: list[Terms] = []
        K.append({key: v * inv_hbar / 2 for key, v in _g_coefficient(sys, i, -1).items()})
        k1 = dict(_g_coefficient(sys, i, 0))
        _axpy(k1, -c[0], K[0])
        K.append(_drop_zeros({key: v * inv_hbar for key, v in k1.items()}))
        # order e^1: c_0 K_1 + c_1 K_0 = G_1
        lhs: Terms = {}
        _axpy(lhs, c[0], K[1])
        _axpy(lhs, c[1], K[0])
        residual = _terms_diff(lhs, _g_coefficient(sys, i, 1), b)
        tol = 0. if b.exact else DEFAULTS['check_rel_tol']
        if residual > tol:
            raise BetheConsistencyViolation(f'kernel not analytic at root {i}, Bethe equations violated', module='kernel',
                                            operation='build_kernel_table', params={'root': i, 'residual': residual})
        worst = max(worst, residual)
        K.append(dict(free[i]))
        for k in range(3, k_max + 1):
            rhs = dict(_g_coefficient(sys, i, k - 1))
            for l_ in range(k):
                _axpy(rhs, -c[l_], K[k - 1 - l_])
            K.append(_drop_zeros({key: v * inv_hbar / (2 - k) for key, v in rhs.items()}))
        coeffs.append(tuple(K))
    _logger.debug(f'kernel table built m: {sys.m} k_max: {k_max}')
    return KernelTable(hbar, sys.m, k_max, tuple(coeffs), free, worst, b)


def random_free_k2(sys: BetheSystem, rng: np.random.Generator) -> list[Terms]:
    '''Random rational values for the unconstrained K_{i,2}, for kernel independence checks'''
    b = sys.backend
    out = []
    for i in range(sys.m):
        terms: Terms = {}
        for j in range(sys.m):
            for kp in (1, 2):
                terms[(j, kp)] = b.convert(Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 7))))
        terms[(i, 3)] = b.convert(Fraction(int(rng.integers(1, 10)), int(rng.integers(1, 7))))
        out.append(terms)
    return out


@dataclass
class KernelValidation:
    '''Outcome of validate_kernel.  Residuals are relative'''
    order: int
    max_ode_residual: float
    k1_closed_form_residual: float
    k3_closed_form_residual: float
    probes: list[Scalar]

    def passed(self, tol: float) -> bool:
        return max(self.max_ode_residual, self.k1_closed_form_residual, self.k3_closed_form_residual) <= tol


def _kernel_series(table: KernelTable, sys: BetheSystem, i: int, x0: Scalar, order: int) -> LaurentSeries:
    b = sys.backend
    vals = [_terms_eval(table.K(i, k), sys.roots, x0, b.zero) for k in range(order + 1)]
    return LaurentSeries(sys.roots[i], 0, tuple(vals), order, b)


def _g_ratfun(sys: BetheSystem, x0: Scalar) -> RatFun:
    '''G(x0, x) as a rational function of x for fixed x0'''
    b = sys.backend
    out = RatFun.pole(x0, 1, 1, b)
    for a in range(sys.m):
        for j in range(sys.m):
            out = out + RatFun.pole(sys.roots[a], 1, 2 * sys.A[a][j] / (x0 - sys.roots[j]) ** 2, b)
    return out


def validate_kernel(table: KernelTable, sys: BetheSystem, order: int | None = None, probes: Sequence[Scalar] | None = None,
                    seed: int = 0) -> KernelValidation:
    '''
    Re-expand both sides of the kernel ODE at every root with the generic series machinery, at probe values of x0,
    and compare.  Also compares K_{i,1} and K_{i,3} with their closed forms in terms of K_{i,0}, K_{i,1}.
    '''
    b = sys.backend
    if order is None: order = table.k_max
    assert_(3 <= order <= table.k_max, f'order must be in [3, {table.k_max}], got {order}')
    if probes is None: probes = random_probes(b, DEFAULTS['num_probes'], sys.roots, np.random.default_rng(seed))
    w = omega(sys)
    worst_ode = 0.
    for i in range(sys.m):
        s = sys.roots[i]
        vp = potential_taylor(sys.potential, s, order, b, with_constant=False).vprime
        lin = local_expand(w, s, order, b).scale(2) - vp
        for x0 in probes:
            K = _kernel_series(table, sys, i, x0, order)
            lhs = lin * K - K.derivative().scale(sys.hbar)
            rhs = local_expand(_g_ratfun(sys, x0), s, order, b)
            for e in range(-1, order):
                worst_ode = max(worst_ode, b.rel_diff(lhs.coeff(e), rhs.coeff(e)))

    worst_k1, worst_k3 = 0., 0.
    for i in range(sys.m):
        s = sys.roots[i]
        # hbar K_{i,1;j,k'} = -[k'=1][i=j] - 2 [k'=2] sum_{a != i} A_{a,j} / (s_a - s_i)
        k1: Terms = {(i, 1): -b.one}
        for j in range(sys.m):
            acc = b.zero
            for a in range(sys.m):
                if a != i: acc = acc + sys.A[a][j] / (sys.roots[a] - s)
            if acc != 0: k1[(j, 2)] = -2 * acc
        worst_k1 = max(worst_k1, _terms_diff({key: v * sys.hbar for key, v in table.K(i, 1).items()}, k1, b))

        sum2, sum3 = b.zero, b.zero
        for a in range(sys.m):
            if a != i:
                sum2 = sum2 + 2 / (sys.roots[a] - s) ** 2
                sum3 = sum3 + 2 / (sys.roots[a] - s) ** 3
        v2 = sys.potential.derivative_at(s, 1)
        v3 = sys.potential.derivative_at(s, 2)
        k3: Terms = {(i, 3): b.one}
        _axpy(k3, -(sys.hbar * sum2 + v2), table.K(i, 1))
        _axpy(k3, -(sys.hbar * sum3 + v3 / 2), table.K(i, 0))
        for j in range(sys.m):
            acc = b.zero
            for a in range(sys.m):
                if a != i: acc = acc + sys.A[a][j] / (sys.roots[a] - s) ** 3
            if acc != 0: k3[(j, 2)] = k3.get((j, 2), b.zero) + 2 * acc
        worst_k3 = max(worst_k3, _terms_diff({key: v * sys.hbar for key, v in table.K(i, 3).items()}, _drop_zeros(k3), b))

    _logger.info(f'kernel validation order: {order} ode residual: {worst_ode:.3e} k1: {worst_k1:.3e} k3: {worst_k3:.3e}')
    return KernelValidation(order, worst_ode, worst_k1, worst_k3, list(probes))


@dataclass(frozen=True)
class BKernel:
    '''
    The kernels G(x0, x) = 1 / (x - x0) + 2 sum A_ij / ((x - s_i) (x0 - s_j)^2) and
    B(x0, x) = -1/2 dG/dx = 1 / (2 (x - x0)^2) + sum A_ij / ((x - s_i)^2 (x0 - s_j)^2).
    The universal parts 1 / (x - x0) and 1 / (2 (x - x0)^2) are implicit, the tensors hold the root pole parts only.
    '''
    roots: tuple[Scalar, ...]
    A: Matrix
    backend: Backend = field(compare=False, repr=False)

    def b_terms(self) -> dict[tuple[tuple[int, int], ...], Scalar]:
        m = len(self.roots)
        return {((i, 2), (j, 2)): self.A[i][j] for i in range(m) for j in range(m) if self.A[i][j] != 0}

    def g_terms(self) -> dict[tuple[tuple[int, int], ...], Scalar]:
        '''Index order is (x0 slot, x slot)'''
        m = len(self.roots)
        return {((j, 2), (i, 1)): 2 * self.A[i][j] for i in range(m) for j in range(m) if self.A[i][j] != 0}

    def b_eval(self, x1: Scalar, x2: Scalar) -> Scalar:
        acc = 1 / (2 * (x1 - x2) ** 2)
        for ((i, ki), (j, kj)), c in sorted(self.b_terms().items()):
            acc = acc + c / ((x1 - self.roots[i]) ** ki * (x2 - self.roots[j]) ** kj)
        return acc

    def g_eval(self, x0: Scalar, x: Scalar) -> Scalar:
        acc = 1 / (x - x0)
        for ((j, kj), (i, ki)), c in sorted(self.g_terms().items()):
            acc = acc + c / ((x0 - self.roots[j]) ** kj * (x - self.roots[i]) ** ki)
        return acc

    def is_symmetric(self, rel_tol: float | None = None) -> bool:
        terms = self.b_terms()
        return all(self.backend.isclose(c, terms.get((key[1], key[0]), self.backend.zero), rel_tol) for key, c in terms.items())

    def derivative_relation_holds(self) -> bool:
        '''B = -1/2 d/dx G, checked on the tensors: d/dx c / (x - s) = -c / (x - s)^2'''
        derived = {((i, 2), (j, 2)): -(-c) / 2 for ((j, _), (i, _)), c in self.g_terms().items()}
        b_terms = self.b_terms()
        return set(derived) == set(b_terms) and all(self.backend.isclose(derived[key], b_terms[key]) for key in b_terms)


def b_kernel(sys: BetheSystem) -> BKernel:
    '''
    >>> from pynctr.numfield import RationalBackend
    >>> from pynctr.bethe import Potential, solve_bethe
    >>> b = RationalBackend()
    >>> sys = solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9'])
    >>> b_kernel(sys).b_eval(b.convert(2), b.convert(3))
    Fraction(41, 80)
    '''
    return BKernel(sys.roots, sys.A, sys.backend)


def g_kernel(sys: BetheSystem) -> dict[tuple[tuple[int, int], ...], Scalar]:
    return b_kernel(sys).g_terms()


def test_kernel_examples() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import Potential, solve_bethe
    b = RationalBackend()
    v2 = Fraction(3, 2)
    sys = solve_bethe(Potential.from_taylor({2: v2, 3: '1/2', 4: '1/3'}, b), 1, '1/7', ['0.05'])
    table = build_kernel_table(sys, 6)
    assert_(table.K(0, 0) == {(0, 2): 1 / v2})
    assert_(table.K(0, 1) == {(0, 1): -7})
    assert_(table.K(0, 2) == {})
    report = validate_kernel(table, sys, 6)
    assert_(report.passed(0.), f'{report}')
    # any K_{i,k;j,k'} with k' > 2 only appears for j == i
    quartic = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    t2 = build_kernel_table(quartic, 6)
    for i in range(2):
        for k in range(7):
            assert_(all(j == i for (j, kp) in t2.K(i, k) if kp > 2))
    assert_(validate_kernel(t2, quartic).passed(0.))


def test_kernel_free_coefficient() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import Potential, solve_bethe
    b = RationalBackend()
    sys = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    t0 = build_kernel_table(sys, 5)
    t1 = build_kernel_table(sys, 5, free_k2=random_free_k2(sys, np.random.default_rng(3)))
    assert_(t0.K(0, 2) != t1.K(0, 2) and t0.K(0, 4) != t1.K(0, 4))
    assert_(validate_kernel(t1, sys, 5).passed(0.))
    corrupt = t0.with_entry(0, 4, (0, 5), t0.entry(0, 4, 0, 5) + Fraction(1, 10**6))
    assert_(validate_kernel(corrupt, sys, 5).max_ode_residual > 0)
    assert_(t0.extended(sys, 7).K(1, 5) == t0.K(1, 5))


def test_b_kernel() -> None:
    from pynctr.numfield import RationalBackend, DoubleBackend
    from pynctr.bethe import Potential, solve_bethe
    b = RationalBackend()
    sys = solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9'])
    bk = b_kernel(sys)
    assert_(bk.b_terms() == {((0, 2), (0, 2)): Fraction(1, 20)})
    assert_(bk.is_symmetric() and bk.derivative_relation_holds())
    d = DoubleBackend()
    sys = solve_bethe(Potential.create([0, -1, 0, 1], [], d), 2, '1/20', ['-0.9', '0.9'])
    bk = b_kernel(sys)
    assert_(bk.is_symmetric(1e-12) and bk.derivative_relation_holds())
    x1, x2 = 2.5, -3.25
    assert_(d.isclose(bk.b_eval(x1, x2), bk.b_eval(x2, x1)))
    h = 1e-5
    fd = -(bk.g_eval(x1, x2 + h) - bk.g_eval(x1, x2 - h)) / (4 * h)
    assert_(abs(fd - bk.b_eval(x1, x2)) <= 1e-7)


if __name__ == "__main__":
    test_kernel_examples()
    test_kernel_free_coefficient()
    test_b_kernel()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
