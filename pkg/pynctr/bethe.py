from __future__ import annotations
import math
import numpy as np
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Any
from collections.abc import Sequence, Mapping
from pynctr.nc_utils import (assert_, get_child_logger, NCException, NoConvergence, ExactRootsUnavailable,
                             RootCollision, RootAtPotentialPole, SingularHessian, DEFAULTS)
from pynctr.numfield import (Backend, DoubleBackend, RatFun, PoleBasis, Scalar, Matrix, local_expand,
                             poly_eval, poly_trim, potential_taylor)

_logger = get_child_logger(__name__)


@dataclass(frozen=True)
class Potential:
    '''
    V'(x) = sum_k poly[k] x^k + sum_p S_p / (x - alpha_p).  V itself is the antiderivative with S_p ln(x - alpha_p) terms.

    Args:
        poly: coefficients t_0..t_d of the polynomial part of V'
        poles: (alpha_p, S_p) pairs, alpha_p pairwise distinct

    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> V = Potential.gaudin_one_point(1, b)
    >>> V.vprime_at(b.convert(2))
    Fraction(3, 2)
    >>> V.derivative_at(b.convert(1), 1)
    Fraction(2, 1)
    '''
    poly: tuple[Scalar, ...]
    poles: tuple[tuple[Scalar, Scalar], ...]
    backend: Backend = field(compare=False, repr=False)

    @staticmethod
    def create(poly: Sequence[Any], poles: Sequence[tuple[Any, Any]], backend: Backend) -> Potential:
        p = tuple(poly_trim([backend.convert(c) for c in poly]))
        pl = tuple((backend.convert(a), backend.convert(s)) for a, s in poles)
        alphas = [a for a, _ in pl]
        for i in range(len(alphas)):
            for j in range(i):
                assert_(alphas[i] != alphas[j], f'potential poles must be distinct, got {alphas[i]} twice')
        assert_(len(p) > 0 or len(pl) > 0, 'potential is empty')
        return Potential(p, pl, backend)

    @staticmethod
    def gaudin(poles: Sequence[tuple[Any, Any]], backend: Backend, linear: Any = 1) -> Potential:
        '''V'(x) = linear * x + sum S_p / (x - alpha_p)'''
        return Potential.create([0, linear], poles, backend)

    @staticmethod
    def gaudin_one_point(s: Any, backend: Backend) -> Potential:
        '''V'(x) = x - s^2 / x, i.e. V(x) = x^2 / 2 - s^2 ln x.  Single Bethe root at s'''
        s_ = backend.convert(s)
        return Potential.create([0, 1], [(0, -s_ * s_)], backend)

    @staticmethod
    def from_taylor(v: Mapping[int, Any], backend: Backend, center: Any = 0) -> Potential:
        '''
        V'(x) = sum_{k >= 2} v_k (x - center)^(k-1), so V'(center) = 0 and V^(k)(center) / (k-1)! = v_k

        >>> from pynctr.numfield import RationalBackend
        >>> Potential.from_taylor({2: 1, 3: 2}, RationalBackend(), center=1).poly
        (Fraction(1, 1), Fraction(-3, 1), Fraction(2, 1))
        '''
        assert_(all(k >= 2 for k in v), 'taylor coefficients of V start at v_2')
        c = backend.convert(center)
        deg = max(v) - 1 if v else 0
        poly = [backend.zero] * (deg + 1)
        for k, vk in v.items():
            vk = backend.convert(vk)
            # (x - c)^(k-1) = sum_a C(k-1, a) x^a (-c)^(k-1-a)
            for a in range(k):
                poly[a] = poly[a] + vk * math.comb(k - 1, a) * (-c) ** (k - 1 - a)
        return Potential.create(poly, [], backend)

    def scaled(self, lam: Any) -> Potential:
        lam = self.backend.convert(lam)
        return Potential.create([c * lam for c in self.poly], [(a, s * lam) for a, s in self.poles], self.backend)

    def perturbed(self, p: int, eps: Any) -> Potential:
        '''V + eps x^p, which adds p eps x^(p-1) to V\''''
        assert_(p >= 1, f'perturbation power must be >= 1, got {p}')
        poly = list(self.poly) + [self.backend.zero] * max(0, p - len(self.poly))
        poly[p - 1] = poly[p - 1] + self.backend.convert(eps) * p
        return Potential.create(poly, list(self.poles), self.backend)

    def with_backend(self, backend: Backend) -> Potential:
        return Potential.create(list(self.poly), list(self.poles), backend)

    def vprime(self) -> RatFun:
        out = RatFun.polynomial(self.poly, self.backend) if self.poly else RatFun.const(0, self.backend)
        for alpha, s in self.poles: out = out + RatFun.pole(alpha, 1, s, self.backend)
        return out

    def vprime_at(self, x: Scalar) -> Scalar:
        acc = poly_eval(self.poly, x, self.backend.zero)
        for alpha, s in self.poles: acc = acc + s / (x - alpha)
        return acc

    def derivative_at(self, x: Scalar, k: int) -> Scalar:
        '''k-th derivative of V' at x'''
        series = potential_taylor(self, x, k, self.backend, with_constant=False).vprime
        return series.coeff(k) * math.factorial(k)

    def divided_difference(self, s: Scalar) -> RatFun:
        '''
        (V'(x) - V'(s)) / (x - s), built term by term so no cancellation is needed
        '''
        b = self.backend
        d = len(self.poly)
        poly = [b.zero] * max(d - 1, 0)
        for k in range(1, d):
            for a in range(k):
                poly[a] = poly[a] + self.poly[k] * s ** (k - 1 - a)
        out = RatFun.polynomial(poly, b) if poly else RatFun.const(0, b)
        for alpha, sp in self.poles:
            out = out + RatFun.pole(alpha, 1, -sp / (s - alpha), b)
        return out

    def is_polynomial(self) -> bool:
        return all(s == 0 for _, s in self.poles)


@dataclass(frozen=True)
class BetheSystem:
    '''
    A solved Bethe system.  `seeds` records the Newton starting point, which selects the solution branch
    '''
    potential: Potential
    hbar: Scalar
    roots: tuple[Scalar, ...]
    T: Matrix
    A: Matrix
    residual: float
    seeds: tuple[Scalar, ...]
    iterations: int = 0

    @property
    def m(self) -> int:
        return len(self.roots)

    @property
    def backend(self) -> Backend:
        return self.potential.backend


def bethe_residuals(V: Potential, hbar: Scalar, roots: Sequence[Scalar]) -> list[Scalar]:
    '''F_i = V'(s_i) - 2 hbar sum_{j != i} 1 / (s_i - s_j)'''
    out = []
    for i, si in enumerate(roots):
        acc = V.vprime_at(si)
        for j, sj in enumerate(roots):
            if j != i: acc = acc - 2 * hbar / (si - sj)
        out.append(acc)
    return out


def bethe_term_scale(V: Potential, hbar: Scalar, roots: Sequence[Scalar]) -> float:
    '''
    Size of the individual terms of the Bethe equations at roots, at least 1.  Residuals are measured against it,
    since the terms of V' can be much larger than the residual they cancel down to
    '''
    b = V.backend
    scale = 1.
    for i, si in enumerate(roots):
        size = sum((b.abs(t) * b.abs(si) ** k for k, t in enumerate(V.poly)), 0.)
        size += sum((b.abs(S / (si - a)) for a, S in V.poles), 0.)
        size += sum((b.abs(2 * hbar / (si - sj)) for j, sj in enumerate(roots) if j != i), 0.)
        scale = max(scale, float(size))
    return scale


def _hessian(V: Potential, hbar: Scalar, roots: Sequence[Scalar]) -> Matrix:
    b = V.backend
    m = len(roots)
    T: Matrix = [[b.zero] * m for _ in range(m)]
    for i in range(m):
        acc = V.derivative_at(roots[i], 1) / hbar
        for j in range(m):
            if j == i: continue
            inv2 = 1 / (roots[i] - roots[j]) ** 2
            acc = acc + 2 * inv2
            T[i][j] = -2 * inv2
        T[i][i] = acc
    return T


def _check_root_guard(V: Potential, roots: Sequence[Scalar], guard: float) -> None:
    b = V.backend
    scale = max([1.] + [b.abs(s) for s in roots])
    for i in range(len(roots)):
        for j in range(i):
            dist = b.abs(roots[i] - roots[j])
            if dist <= guard * scale:
                raise RootCollision(f'roots {j} and {i} collided', module='bethe', operation='solve_bethe',
                                    params={'distance': dist, 'i': i, 'j': j})
        for alpha, _ in V.poles:
            dist = b.abs(roots[i] - alpha)
            if dist <= guard * scale:
                raise RootAtPotentialPole(f'root {i} reached a pole of V\'', module='bethe', operation='solve_bethe',
                                          params={'alpha': alpha, 'distance': dist})


def _default_tol(b: Backend) -> float:
    if b.exact: return 0.
    if b.name == 'double': return 1e-13
    return 2.0 ** (-getattr(b, 'bits', 53) + 16)


def _newton(V: Potential, hbar: Scalar, seeds: Sequence[Scalar], max_iter: int, tol: float,
            guard: float, halvings: int) -> tuple[list[Scalar], float, int]:
    '''
    Damped Newton iteration, the Jacobian of the Bethe equations is hbar T.  Converged once the residual is
    within tol of the size of the terms that cancel in it
    '''
    b = V.backend
    s = list(seeds)
    F = bethe_residuals(V, hbar, s)
    norm = max(b.abs(f) for f in F)
    for it in range(max_iter):
        _logger.debug(f'newton iteration: {it} residual: {norm:.3e}')
        if norm <= tol * bethe_term_scale(V, hbar, s): return s, norm, it
        J = [[hbar * t for t in row] for row in _hessian(V, hbar, s)]
        try:
            step = b.solve(J, [-f for f in F])
        except SingularHessian as e:
            raise NoConvergence(f'singular Jacobian at iteration {it}', module='bethe', operation='solve_bethe',
                                params={'iteration': it, 'residual': norm}) from e
        lam = b.one
        guard_error: NCException | None = None
        for _ in range(halvings + 1):
            trial = [si + lam * di for si, di in zip(s, step)]
            try:
                _check_root_guard(V, trial, guard)
            except (RootCollision, RootAtPotentialPole) as e:
                guard_error = e
                lam = lam / 2
                continue
            F_trial = bethe_residuals(V, hbar, trial)
            norm_trial = max(b.abs(f) for f in F_trial)
            if norm_trial < norm: break
            lam = lam / 2
        else:
            if guard_error is not None: raise guard_error
            raise NoConvergence(f'damped step stalled at iteration {it}', module='bethe', operation='solve_bethe',
                                params={'iteration': it, 'residual': norm})
        s, F, norm = trial, F_trial, norm_trial
    if norm <= tol * bethe_term_scale(V, hbar, s): return s, norm, max_iter
    raise NoConvergence(f'no convergence after {max_iter} iterations', module='bethe', operation='solve_bethe',
                        params={'max_iter': max_iter, 'residual': norm})


def _rationalize(x: Any, max_den: int = 10**6) -> Fraction:
    assert_(not isinstance(x, complex) or x.imag == 0, 'complex root cannot be rational')
    return Fraction(float(x.real if isinstance(x, complex) else x)).limit_denominator(max_den)


def solve_bethe(V: Potential, m: int, hbar: Any, seeds: Sequence[Any], max_iter: int | None = None, tol: float | None = None,
                root_guard: float | None = None) -> BetheSystem:
    '''
    Solve the Bethe equations V'(s_i) = 2 hbar sum_{j != i} 1 / (s_i - s_j) by damped Newton iteration from seeds.

    On the rational backend Newton runs in double precision and the result is accepted only if its rationalization
    solves the equations exactly.

    Args:
        V: potential
        m: number of roots
        hbar: deformation parameter, nonzero
        seeds: m distinct starting points, they select the solution branch
        max_iter: Newton iteration limit
        tol: max Bethe residual accepted relative to bethe_term_scale (float backends)
        root_guard: relative distance below which roots are considered collided

    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> sys = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    >>> sys.roots
    (Fraction(-1, 2), Fraction(1, 2))
    >>> sys.A
    [[Fraction(3, 16), Fraction(1, 16)], [Fraction(1, 16), Fraction(3, 16)]]
    '''
    b = V.backend
    assert_(m >= 1, f'need at least one root, got m={m}')
    assert_(len(seeds) == m, f'need {m} seeds, got {len(seeds)}')
    hbar = b.convert(hbar)
    assert_(hbar != 0, 'hbar must be nonzero')
    if max_iter is None: max_iter = DEFAULTS['newton_max_iter']
    if root_guard is None: root_guard = DEFAULTS['root_guard']
    if tol is None: tol = _default_tol(b)
    seeds_ = tuple(b.convert(s) for s in seeds)
    _check_root_guard(V, seeds_, root_guard)
    params = {'m': m, 'hbar': hbar}
    if b.exact:
        if all(f == 0 for f in bethe_residuals(V, hbar, seeds_)):
            roots, iterations = list(seeds_), 0
        else:
            d = DoubleBackend()
            Vd = V.with_backend(d)
            approx, _, iterations = _newton(Vd, d.convert(hbar), [d.convert(s) for s in seeds_], max_iter, _default_tol(d),
                                            root_guard, DEFAULTS['damping_halvings'])
            try:
                roots = [_rationalize(x) for x in approx]
            except NCException as e:
                raise ExactRootsUnavailable('roots are not rational, use a float backend', module='bethe',
                                            operation='solve_bethe', params=params) from e
            _check_root_guard(V, roots, root_guard)
            if any(f != 0 for f in bethe_residuals(V, hbar, roots)):
                raise ExactRootsUnavailable('rationalized roots do not solve the Bethe equations exactly, use a float backend',
                                            module='bethe', operation='solve_bethe', params=params)
        residual = 0.
    else:
        roots, residual, iterations = _newton(V, hbar, list(seeds_), max_iter, tol, root_guard, DEFAULTS['damping_halvings'])
    roots_t = tuple(roots)
    T = _hessian(V, hbar, roots_t)
    try:
        A = b.inverse(T)
    except SingularHessian as e:
        raise SingularHessian('Hessian of the Bethe action is singular', module='bethe', operation='inverse_hessian',
                              params={'roots': [str(s) for s in roots_t]}) from e
    _logger.info(f'solved bethe system m: {m} hbar: {hbar} backend: {b} iterations: {iterations} residual: {residual:.3e}')
    return BetheSystem(V, hbar, roots_t, T, A, residual, seeds_, iterations)


def hessian(sys: BetheSystem) -> Matrix:
    '''T_ii = V''(s_i) / hbar + 2 sum_{j != i} 1 / (s_i - s_j)^2,  T_ij = -2 / (s_i - s_j)^2'''
    return sys.T


def inverse_hessian(sys: BetheSystem) -> Matrix:
    return sys.A


def omega(sys: BetheSystem) -> PoleBasis:
    '''
    omega(x) = hbar sum_i 1 / (x - s_i)

    >>> from pynctr.numfield import RationalBackend, pb_eval
    >>> b = RationalBackend()
    >>> sys = solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9'])
    >>> pb_eval(omega(sys), b.convert(2), b)
    Fraction(1, 10)
    '''
    return PoleBasis({(i, 1): sys.hbar for i in range(sys.m)}, sys.roots)


def build_y_u(sys: BetheSystem) -> tuple[RatFun, RatFun]:
    '''
    Y = V' - 2 omega and U = V'^2 - 2 hbar V'' - 4 hbar sum_i (V'(x) - V'(s_i)) / (x - s_i).  U has no poles at the roots
    '''
    b = sys.backend
    V = sys.potential
    vp = V.vprime()
    Y = vp - omega(sys).to_ratfun(b) * 2
    U = vp * vp - vp.derivative() * (2 * sys.hbar)
    for s in sys.roots: U = U - V.divided_difference(s) * (4 * sys.hbar)
    for i, s in enumerate(sys.roots):
        principal = local_expand(U, s, 0, b).principal_part()
        assert_(not principal, f'U has a pole at root {i}')
    return Y, U


def random_probes(backend: Backend, count: int, avoid: Sequence[Scalar], rng: np.random.Generator, min_dist: float = 0.25) -> list[Scalar]:
    '''
    Random rational probe points, distinct and at least min_dist away from `avoid` and from each other
    '''
    out: list[Scalar] = []
    while len(out) < count:
        x = backend.convert(Fraction(int(rng.integers(-97, 98)), int(rng.integers(7, 23))))
        if all(backend.abs(x - a) >= min_dist for a in list(avoid) + out): out.append(x)
    return out


def _identity_residual(lhs: RatFun, rhs: RatFun, probes: Sequence[Scalar]) -> float:
    b = lhs.backend
    if b.exact and (lhs - rhs).is_zero(): return 0.
    return max(b.rel_diff(lhs(p), rhs(p)) for p in probes)


def ricatti_residual(sys: BetheSystem, probes: Sequence[Scalar]) -> float:
    '''Relative residual of Y^2 - 2 hbar Y' = U; exactly 0. on the rational backend when the identity holds'''
    Y, U = build_y_u(sys)
    return _identity_residual(Y * Y - Y.derivative() * (2 * sys.hbar), U, probes)


def omega_identity_residual(sys: BetheSystem, probes: Sequence[Scalar]) -> float:
    '''Relative residual of omega^2 + hbar omega' = hbar sum_i V'(s_i) / (x - s_i)'''
    b = sys.backend
    w = omega(sys).to_ratfun(b)
    lhs = w * w + w.derivative() * sys.hbar
    rhs = RatFun.const(0, b)
    for s in sys.roots: rhs = rhs + RatFun.pole(s, 1, sys.hbar * sys.potential.vprime_at(s), b)
    return _identity_residual(lhs, rhs, probes)


def test_solve_examples() -> None:
    from pynctr.numfield import RationalBackend, BigFloatBackend
    b = RationalBackend()
    gaudin = solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9'])
    assert_(gaudin.roots == (1,) and gaudin.A == [[Fraction(1, 20)]])
    sys = solve_bethe(Potential.create([0, 1], [], b), 1, 3, ['0.3'])
    assert_(sys.roots == (0,))
    sys = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    assert_(sys.T == [[6, -2], [-2, 6]] and sys.residual == 0.)
    for backend in [DoubleBackend(), BigFloatBackend(200)]:
        V = Potential.create([0, -1, 0, 1], [], backend)  # quartic V = x^4/4 - x^2/2
        sys = solve_bethe(V, 2, '1/20', ['-0.9', '0.9'])
        assert_(max(backend.abs(f) for f in bethe_residuals(V, sys.hbar, sys.roots)) <= 1e-12)
        TA = [[sum((sys.T[i][k] * sys.A[k][j] for k in range(2)), backend.zero) for j in range(2)] for i in range(2)]
        assert_(all(backend.isclose(TA[i][j], backend.convert(int(i == j))) for i in range(2) for j in range(2)))
        assert_(backend.isclose(sys.A[0][1], sys.A[1][0]))


def test_solve_scaled_potential() -> None:
    from pynctr.numfield import BigFloatBackend
    for backend in [DoubleBackend(), BigFloatBackend(120)]:
        for k in [1, 1000, 10**6]:
            V = Potential.create([0, -k, 0, k], [], backend)
            sys = solve_bethe(V, 2, '1/20', ['-0.9', '0.9'])
            scale = bethe_term_scale(V, sys.hbar, sys.roots)
            assert_(scale >= k / 2 and sys.residual <= _default_tol(backend) * scale, f'k={k} residual={sys.residual}')
            assert_(all(abs(backend.abs(s) - 1) < 0.05 for s in sys.roots))


def test_solve_errors() -> None:
    from pynctr.numfield import RationalBackend
    b = RationalBackend()
    V = Potential.create([0, 1], [], b)
    try:
        solve_bethe(V, 2, '1/4', ['0.4', '0.4'])
        raise AssertionError('coincident seeds accepted')
    except RootCollision:
        pass
    try:
        solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0'])
        raise AssertionError('seed at a pole accepted')
    except RootAtPotentialPole:
        pass
    try:
        # roots are +-sqrt(hbar), irrational
        solve_bethe(V, 2, '1/3', ['-0.5', '0.5'])
        raise AssertionError('irrational roots accepted on the rational backend')
    except ExactRootsUnavailable as e:
        assert_(isinstance(e, NoConvergence))


def test_y_u() -> None:
    from pynctr.numfield import RationalBackend
    b = RationalBackend()
    rng = np.random.default_rng(1)
    gaudin = solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9'])
    Y, U = build_y_u(gaudin)
    assert_(Y(b.convert(2)) == Fraction(13, 10))
    probes = random_probes(b, 5, gaudin.roots, rng)
    assert_(ricatti_residual(gaudin, probes) == 0. and omega_identity_residual(gaudin, probes) == 0.)
    V = Potential.gaudin([(2, '1/2'), (-3, '1/3')], b)
    assert_(V.divided_difference(b.one)(b.convert(5)) == (V.vprime_at(b.convert(5)) - V.vprime_at(b.one)) / 4)
    d = DoubleBackend()
    sys = solve_bethe(V.with_backend(d), 2, '1/20', ['0.15', '1.75'])
    probes = random_probes(d, 20, sys.roots, rng)
    assert_(ricatti_residual(sys, probes) <= 1e-10 and omega_identity_residual(sys, probes) <= 1e-10)


def test_potential_constructors() -> None:
    from pynctr.numfield import RationalBackend
    b = RationalBackend()
    V = Potential.from_taylor({2: 1, 3: '1/2', 4: '1/3'}, b)
    assert_(V.vprime_at(b.zero) == 0 and V.derivative_at(b.zero, 1) == 1 and V.derivative_at(b.zero, 2) == 1)
    W = V.perturbed(3, '1/10')
    assert_(W.vprime_at(b.one) - V.vprime_at(b.one) == Fraction(3, 10))
    assert_(V.scaled(2).vprime_at(b.one) == 2 * V.vprime_at(b.one))
    try:
        Potential.create([], [(1, 1), (1, 2)], b)
        raise AssertionError('duplicate poles accepted')
    except NCException:
        pass


if __name__ == "__main__":
    test_solve_examples()
    test_solve_scaled_potential()
    test_solve_errors()
    test_y_u()
    test_potential_constructors()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
