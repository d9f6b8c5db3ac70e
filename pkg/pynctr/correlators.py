from __future__ import annotations
import threading
import itertools
import concurrent.futures
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Any
from collections.abc import Sequence, Mapping
from sortedcontainers import SortedDict
from pynctr.nc_utils import (assert_, get_child_logger, NCException, SymmetryViolation, CapExceeded, PoleOrderOverflow,
                             LogUnavailable, EvaluationAtPole, DEFAULTS)
from pynctr.numfield import Backend, Scalar, RatFun, PoleBasis, potential_taylor, local_expand
from pynctr.bethe import BetheSystem, Potential, omega
from pynctr.kernel import KernelTable, build_kernel_table, b_kernel

_logger = get_child_logger(__name__)

Index = tuple[tuple[int, int], ...]
Series = dict[int, Scalar]


@dataclass(frozen=True)
class WTensor:
    '''
    A correlator W_n^(g) as a coefficient tensor over the pole basis:
    sum over indices ((j_1, k_1), ..., (j_n, k_n)) of c / prod_a (x_a - s_{j_a})^{k_a}.
    For (g, n) = (0, 2) universal_part marks the implicit 1 / (2 (x_1 - x_2)^2), so the stored terms are W-bar.
    '''
    g: int
    n: int
    terms: SortedDict
    roots: tuple[Scalar, ...]
    universal_part: bool = False
    backend: Backend = field(compare=False, repr=False, default=None)  # type: ignore

    @staticmethod
    def create(g: int, n: int, terms: Mapping[Index, Scalar], roots: Sequence[Scalar], backend: Backend,
               universal_part: bool = False) -> WTensor:
        for idx in terms:
            assert_(len(idx) == n, f'index {idx} does not have {n} slots')
        return WTensor(g, n, SortedDict({idx: v for idx, v in terms.items() if v != 0}), tuple(roots), universal_part, backend)

    def coeff(self, idx: Index) -> Scalar:
        return self.terms.get(idx, self.backend.zero)

    def max_order(self) -> int:
        return max((k for idx in self.terms for (_, k) in idx), default=0)

    def scalar(self) -> Scalar:
        '''Value of a tensor with no slots (result of contracting away every variable)'''
        assert_(self.n == 0, f'tensor has {self.n} slots')
        return self.coeff(())

    def permuted(self, perm: Sequence[int]) -> WTensor:
        '''Slot a of the result is slot perm[a] of self'''
        terms = {tuple(idx[p] for p in perm): v for idx, v in self.terms.items()}
        return WTensor(self.g, self.n, SortedDict(terms), self.roots, self.universal_part, self.backend)

    def to_pole_basis(self) -> PoleBasis:
        assert_(self.n == 1, 'only one slot tensors are pole basis functions')
        return PoleBasis({idx[0]: v for idx, v in self.terms.items()}, self.roots)

    def restrict(self, slot: int, points: Sequence[Scalar]) -> PoleBasis:
        '''
        The pole basis function of the variable in `slot`, with every other slot set to the given points (in slot order,
        skipping `slot`).  The universal part is not included.
        '''
        assert_(len(points) == self.n - 1, f'need {self.n - 1} points')
        out: dict[tuple[int, int], Scalar] = {}
        for idx, v in self.terms.items():
            others = idx[:slot] + idx[slot + 1:]
            c = v
            for (j, k), x in zip(others, points): c = c / (x - self.roots[j]) ** k
            out[idx[slot]] = out[idx[slot]] + c if idx[slot] in out else c
        return PoleBasis(out, self.roots)

    def with_shift(self, idx: Index, delta: Scalar) -> WTensor:
        terms = dict(self.terms)
        terms[idx] = terms.get(idx, self.backend.zero) + delta
        return WTensor(self.g, self.n, SortedDict(terms), self.roots, self.universal_part, self.backend)

    def __len__(self) -> int:
        return len(self.terms)


def w_eval(W: WTensor, points: Sequence[Scalar]) -> Scalar:
    '''
    Value of W at the given points, including the universal part when flagged

    >>> from pynctr.numfield import RationalBackend
    >>> from pynctr.bethe import Potential, solve_bethe
    >>> b = RationalBackend()
    >>> ctx = RecursionContext(solve_bethe(Potential.gaudin_one_point(1, b), 1, '1/10', ['0.9']))
    >>> w_eval(compute_w(ctx, 0, 2), [b.convert(2), b.convert(3)])
    Fraction(41, 80)
    '''
    b = W.backend
    assert_(len(points) == W.n, f'W_{W.n}^({W.g}) needs {W.n} points, got {len(points)}')
    acc = b.zero
    for idx, v in W.terms.items():
        term = v
        for (j, k), x in zip(idx, points):
            d = x - W.roots[j]
            if d == 0: _raise_at_pole(W, j)
            term = term / d ** k
        acc = acc + term
    if W.universal_part:
        d = points[0] - points[1]
        if d == 0: _raise_at_pole(W, -1)
        acc = acc + 1 / (2 * d ** 2)
    return acc


def w_eval_derivative(W: WTensor, slot: int, points: Sequence[Scalar]) -> Scalar:
    '''Partial derivative of W in `slot` at points, universal part included'''
    b = W.backend
    acc = b.zero
    for idx, v in W.terms.items():
        term = v
        for a, ((j, k), x) in enumerate(zip(idx, points)):
            d = x - W.roots[j]
            term = term * (-k) / d ** (k + 1) if a == slot else term / d ** k
        acc = acc + term
    if W.universal_part and slot in (0, 1):
        d = points[0] - points[1]
        acc = acc + (-1 if slot == 0 else 1) / d ** 3
    return acc


def _raise_at_pole(W: WTensor, j: int) -> None:
    raise EvaluationAtPole(f'W_{W.n}^({W.g}) evaluated at a pole', module='correlators', operation='w_eval', params={'root': j})


def symmetry_defect(W: WTensor) -> float:
    '''Max relative coefficient change under adjacent slot transpositions, which generate all permutations'''
    b = W.backend
    worst = 0.
    for a in range(W.n - 1):
        for idx, v in W.terms.items():
            p = list(idx)
            p[a], p[a + 1] = p[a + 1], p[a]
            worst = max(worst, b.rel_diff(v, W.terms.get(tuple(p), b.zero)))
    return worst


def _first_asymmetric_index(W: WTensor) -> Index:
    for idx in W.terms:
        if any(tuple(idx[p] for p in perm) != idx for perm in itertools.permutations(range(W.n))): return idx
    return next(iter(W.terms))


class RecursionContext:
    '''
    Holds a solved Bethe system, its kernel table, and the memo cache of computed correlators.
    The cache allows concurrent reads; inserts are serialized and a (g, n) being computed is marked in flight
    so it is computed at most once.

    Args:
        sys: solved Bethe system
        table: kernel table, built with default k_max when omitted
        cap: max pole order of any local expansion
        k_cap: max kernel order the table may be extended to
        threads: worker threads for the per-root contractions
    '''
    def __init__(self, sys: BetheSystem, table: KernelTable | None = None, cap: int | None = None, k_cap: int | None = None,
                 threads: int = 1) -> None:
        self.sys = sys
        self.table = table if table is not None else build_kernel_table(sys)
        self.cap = cap if cap is not None else DEFAULTS['pole_order_cap']
        self.k_cap = k_cap if k_cap is not None else DEFAULTS['pole_order_cap']
        self.threads = threads
        self.stats: dict[str, int] = {'contractions': 0, 'computed': 0}
        self.energy_shift: dict[int, Scalar] = {}
        self._cache: dict[tuple[int, int], WTensor] = {}
        self._in_flight: dict[tuple[int, int], threading.Event] = {}
        self._lock = threading.Lock()

    @property
    def backend(self) -> Backend:
        return self.sys.backend

    def cached(self) -> list[tuple[int, int]]:
        with self._lock: return sorted(self._cache)

    def clone(self, sys: BetheSystem | None = None, table: KernelTable | None = None, keep_cache: bool = False) -> RecursionContext:
        '''A context with its own cache, optionally with a different system or kernel table'''
        ctx = RecursionContext(sys if sys is not None else self.sys, table if table is not None else (self.table if sys is None else None),
                               self.cap, self.k_cap, self.threads)
        ctx.energy_shift = dict(self.energy_shift)
        if keep_cache:
            with self._lock: ctx._cache = dict(self._cache)
        return ctx

    def with_corruption(self, g: int, n: int, delta: Any) -> RecursionContext:
        '''
        Clone whose W_n^(g) has one coefficient shifted by delta: the first sorted index that is not invariant
        under slot permutations, else the first.  n = 0 shifts the free energy F^(g).  Negative control for checks.
        '''
        ctx = self.clone(keep_cache=True)
        delta = self.backend.convert(delta)
        if n == 0:
            ctx.energy_shift[g] = ctx.energy_shift.get(g, self.backend.zero) + delta
            return ctx
        W = compute_w(ctx, g, n)
        idx = _first_asymmetric_index(W)
        _logger.info(f'corrupting W_{n}^({g}) at {idx} by {delta}')
        with ctx._lock:
            ctx._cache = {key: w for key, w in ctx._cache.items() if 2 * key[0] + key[1] <= 2 * g + n}
            ctx._cache[(g, n)] = W.with_shift(idx, delta)
        return ctx

    def _ensure_kernel(self, k: int) -> KernelTable:
        with self._lock:
            if k > self.table.k_max:
                if k > self.k_cap:
                    raise CapExceeded(f'kernel order {k} needed, cap is {self.k_cap}', module='correlators', operation='compute_w',
                                      params={'k': k, 'k_cap': self.k_cap})
                self.table = self.table.extended(self.sys, k)
            return self.table


def _splits(g: int, nj: int) -> list[tuple[int, int]]:
    '''(h, I) pairs of the recursion, I as a bitmask over the nj external variables, without the two excluded terms'''
    full = (1 << nj) - 1
    return [(h, mask) for h in range(g + 1) for mask in range(full + 1) if not (h == 0 and mask == 0) and not (h == g and mask == full)]


class _Expander:
    '''Memoized expansions of 1 / (x - s_j)^k at x = s_i + e, Taylor part up to e^top'''
    def __init__(self, roots: Sequence[Scalar], i: int, backend: Backend, top: int) -> None:
        self.roots, self.i, self.b, self.top = roots, i, backend, top
        self._memo: dict[tuple[int, int], Series] = {}

    def __call__(self, jk: tuple[int, int]) -> Series:
        out = self._memo.get(jk)
        if out is not None: return out
        j, k = jk
        if j == self.i:
            out = {-k: self.b.one}
        else:
            inv_d = self.b.inv(self.roots[self.i] - self.roots[j])
            p = inv_d ** k
            out = {}
            for t in range(self.top + 1):
                out[t] = p
                p = -p * (k + t) * inv_d / (t + 1)
        self._memo[jk] = out
        return out


def _mul_series(a: Series, b: Series, cutoff: int) -> Series:
    out: Series = {}
    for e1, c1 in a.items():
        for e2, c2 in b.items():
            e = e1 + e2
            if e > cutoff: continue
            out[e] = out[e] + c1 * c2 if e in out else c1 * c2
    return out


def _acc_series(U: dict[Index, Series], R: Index, c: Scalar, s: Series) -> None:
    target = U.setdefault(R, {})
    for e, v in s.items():
        target[e] = target[e] + c * v if e in target else c * v


def _x_series(W: WTensor, exp: _Expander) -> dict[Index, Series]:
    '''Expansion in e of W(x, rest) with x = s_i + e, grouped by the rest indices, universal part included'''
    out: dict[Index, Series] = {}
    for idx, c in W.terms.items():
        _acc_series(out, idx[1:], c, exp(idx[0]))
    if W.universal_part:
        b = exp.b
        # 1 / (2 (x - x_j)^2) = sum_t (t + 1) / 2 e^t / (x_j - s_i)^(t + 2)
        for t in range(exp.top + 1):
            _acc_series(out, ((exp.i, t + 2),), b.one, {t: b.convert(Fraction(t + 1, 2))})
    return out


def _merge(R1: Index, pos1: Sequence[int], R2: Index, pos2: Sequence[int], nj: int) -> Index:
    out: list[Any] = [None] * nj
    for p, v in zip(pos1, R1): out[p] = v
    for p, v in zip(pos2, R2): out[p] = v
    return tuple(out)


def _root_u(ctx: RecursionContext, g: int, n: int, i: int, top: int, deps: Mapping[tuple[int, int], WTensor]) -> dict[Index, Series]:
    '''
    Principal part at s_i of the recursion integrand W-bar_{n+1}^(g-1)(x, x, J) + sum' W(x, I) W(x, J \\ I), as
    e-series (negative powers only) with coefficients indexed by pole indices of the n - 1 external variables J.
    '''
    b = ctx.backend
    exp = _Expander(ctx.sys.roots, i, b, top)
    nj = n - 1
    U: dict[Index, Series] = {}
    if g >= 1:
        for idx, c in deps[(g - 1, n + 1)].terms.items():
            s = _mul_series(exp(idx[0]), exp(idx[1]), -1)
            if s: _acc_series(U, idx[2:], c, s)
    series_memo: dict[tuple[int, int], dict[Index, Series]] = {}
    for h, mask in _splits(g, nj):
        pos1 = [a for a in range(nj) if mask >> a & 1]
        pos2 = [a for a in range(nj) if not mask >> a & 1]
        k1, k2 = (h, len(pos1) + 1), (g - h, len(pos2) + 1)
        for key in (k1, k2):
            if key not in series_memo: series_memo[key] = _x_series(deps[key], exp)
        f1, f2 = series_memo[k1], series_memo[k2]
        for R1, s1 in f1.items():
            for R2, s2 in f2.items():
                s = _mul_series(s1, s2, -1)
                if s: _acc_series(U, _merge(R1, pos1, R2, pos2, nj), b.one, s)
    return U


def _contract(table: KernelTable, i: int, U: Mapping[Index, Series]) -> tuple[dict[Index, Scalar], int]:
    '''W_new[(j0, k0) + R] += sum_k K_{i,k;j0,k0} [e^(-k-1)] U[R]'''
    out: dict[Index, Scalar] = {}
    count = 0
    for R in sorted(U):
        for e, u in sorted(U[R].items()):
            if u == 0: continue
            for jk0, kv in sorted(table.K(i, -e - 1).items()):
                key = (jk0,) + R
                out[key] = out[key] + kv * u if key in out else kv * u
                count += 1
    return out, count


def _dependencies(g: int, n: int) -> list[tuple[int, int]]:
    deps = set()
    if g >= 1: deps.add((g - 1, n + 1))
    for h, mask in _splits(g, n - 1):
        size = bin(mask).count('1')
        deps.add((h, size + 1))
        deps.add((g - h, n - 1 - size + 1))
    return sorted(deps, key=lambda gn: (2 * gn[0] + gn[1], gn))


def _compute(ctx: RecursionContext, g: int, n: int) -> WTensor:
    sys = ctx.sys
    b = ctx.backend
    if (g, n) == (0, 1):
        return WTensor.create(0, 1, {(jk,): v for jk, v in omega(sys).terms.items()}, sys.roots, b)
    if (g, n) == (0, 2):
        return WTensor.create(0, 2, b_kernel(sys).b_terms(), sys.roots, b, universal_part=True)
    deps = {key: compute_w(ctx, *key) for key in _dependencies(g, n)}
    top = max(max(max(W.max_order() for W in deps.values()), 2) - 1, 0)
    roots = range(sys.m)

    def u_job(i: int) -> dict[Index, Series]:
        return _root_u(ctx, g, n, i, top, deps)

    if ctx.threads > 1 and sys.m > 1:
        with concurrent.futures.ThreadPoolExecutor(min(ctx.threads, sys.m)) as executor:
            us = list(executor.map(u_job, roots))
    else:
        us = [u_job(i) for i in roots]

    order = max((-e for U in us for s in U.values() for e in s), default=1)
    if order > ctx.cap:
        raise PoleOrderOverflow(f'pole of order {order} exceeds cap {ctx.cap}', module='correlators', operation='compute_w',
                                params={'g': g, 'n': n})
    table = ctx._ensure_kernel(max(order - 1, 3))

    def c_job(i: int) -> tuple[dict[Index, Scalar], int]:
        return _contract(table, i, us[i])

    if ctx.threads > 1 and sys.m > 1:
        with concurrent.futures.ThreadPoolExecutor(min(ctx.threads, sys.m)) as executor:
            parts = list(executor.map(c_job, roots))
    else:
        parts = [c_job(i) for i in roots]

    terms: dict[Index, Scalar] = {}
    count = 0
    for part, c in parts:
        count += c
        for key, v in part.items(): terms[key] = terms[key] + v if key in terms else v
    W = WTensor.create(g, n, terms, sys.roots, b)
    tol = 0. if b.exact else 1e-10
    defect = symmetry_defect(W)
    if defect > tol:
        raise SymmetryViolation(f'W_{n}^({g}) is not symmetric', module='correlators', operation='compute_w',
                                params={'g': g, 'n': n, 'defect': defect})
    with ctx._lock:
        ctx.stats['contractions'] += count
    _logger.info(f'computed W_{n}^({g}) terms: {len(W)} max pole order: {W.max_order()} contractions: {count}')
    return W


def compute_w(ctx: RecursionContext, g: int, n: int) -> WTensor:
    '''
    The correlator W_n^(g), computed by the recursion over residues at the Bethe roots and memoized in ctx.

    Args:
        ctx: recursion context
        g: genus, >= 0
        n: number of variables, >= 1
    '''
    assert_(g >= 0 and n >= 1, f'need g >= 0 and n >= 1, got g={g} n={n}')
    key = (g, n)
    owner = False
    with ctx._lock:
        W = ctx._cache.get(key)
        if W is not None: return W
        event = ctx._in_flight.get(key)
        if event is None:
            event = threading.Event()
            ctx._in_flight[key] = event
            owner = True
    if not owner:
        event.wait()
        with ctx._lock:
            W = ctx._cache.get(key)
        if W is None: raise NCException(f'concurrent computation of W_{n}^({g}) failed', module='correlators', operation='compute_w')
        return W
    try:
        W = _compute(ctx, g, n)
        with ctx._lock:
            ctx._cache[key] = W
            ctx.stats['computed'] += 1
    finally:
        with ctx._lock:
            ctx._in_flight.pop(key, None)
        event.set()
    return W


def w_residue_moment(W: WTensor, slot: int, weight: RatFun | Potential) -> WTensor:
    '''
    sum_i Res_{x -> s_i} weight(x) W(..., x, ...) with x in `slot`, as a tensor in the remaining n - 1 slots.

    Only the principal part of W in `slot` contributes, through the Taylor coefficients of the weight at each root.
    A Potential weight means V itself (with its log terms), which needs a float backend when V' has poles.

    >>> from pynctr.numfield import RationalBackend
    >>> from pynctr.bethe import Potential, solve_bethe
    >>> b = RationalBackend()
    >>> ctx = RecursionContext(solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4']))
    >>> w_residue_moment(compute_w(ctx, 0, 1), 0, RatFun.const(1, b)).scalar()
    Fraction(1, 2)
    '''
    b = W.backend
    assert_(0 <= slot < W.n, f'slot {slot} out of range for W_{W.n}')
    orders = {i: 0 for i in range(len(W.roots))}
    for idx in W.terms:
        j, k = idx[slot]
        orders[j] = max(orders[j], k)
    taylor: dict[int, Any] = {}
    for i, top in orders.items():
        if top == 0: continue
        if isinstance(weight, Potential):
            try:
                taylor[i] = potential_taylor(weight, W.roots[i], top - 1, b).v
            except LogUnavailable as e:
                raise LogUnavailable('residue against V needs log constants, use a float backend', module='correlators',
                                     operation='w_residue_moment', params={'g': W.g, 'n': W.n}) from e
        else:
            taylor[i] = local_expand(weight, W.roots[i], top - 1, b)
            assert_(taylor[i].valuation >= 0 or not taylor[i].principal_part(), f'weight has a pole at root {i}')
    out: dict[Index, Scalar] = {}
    for idx, c in W.terms.items():
        j, k = idx[slot]
        rest = idx[:slot] + idx[slot + 1:]
        v = c * taylor[j].coeff(k - 1)
        out[rest] = out[rest] + v if rest in out else v
    return WTensor.create(W.g, W.n - 1, out, W.roots, b)


def test_gaudin_closed_forms() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    b = RationalBackend()
    hbar = Fraction(1, 10)
    ctx = RecursionContext(solve_bethe(Potential.gaudin_one_point(1, b), 1, hbar, ['0.9']))
    assert_(dict(compute_w(ctx, 0, 1).terms) == {((0, 1),): hbar})
    assert_(dict(compute_w(ctx, 0, 2).terms) == {((0, 2), (0, 2)): hbar / 2})
    # W_3^(0) = hbar / (2 prod (x_a - 1)^2) (sum_a 1 / (x_a - 1) + 1 / 2)
    w3 = compute_w(ctx, 0, 3)
    expected = {((0, 2), (0, 2), (0, 2)): hbar / 4}
    for a in range(3):
        idx = [(0, 2)] * 3
        idx[a] = (0, 3)
        expected[tuple(idx)] = hbar / 2
    assert_(dict(w3.terms) == expected, f'{dict(w3.terms)}')
    # W_1^(1) = 1 / (hbar (x - 1)) + 1 / (4 (x - 1)^2) + 1 / (2 (x - 1)^3)
    w11 = compute_w(ctx, 1, 1)
    assert_(dict(w11.terms) == {((0, 1),): 1 / hbar, ((0, 2),): Fraction(1, 4), ((0, 3),): Fraction(1, 2)}, f'{dict(w11.terms)}')
    assert_(w_residue_moment(w11, 0, RatFun.const(1, b)).scalar() == 1 / hbar)


def test_taylor_potential() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    b = RationalBackend()
    v2, v3, v4 = Fraction(1), Fraction(1, 2), Fraction(1, 3)
    hbar = Fraction(1, 7)
    ctx = RecursionContext(solve_bethe(Potential.from_taylor({2: v2, 3: v3, 4: v4}, b), 1, hbar, ['0.1']))
    w11 = compute_w(ctx, 1, 1)
    assert_(dict(w11.terms) == {((0, 1),): 1 / hbar, ((0, 2),): -v3 / v2 ** 2, ((0, 3),): 1 / v2})
    # W_3^(0) = 2 hbar / (v2^2 prod x^2) sum 1 / x - 2 hbar v3 / (v2^3 prod x^2)
    w3 = compute_w(ctx, 0, 3)
    x = [b.convert(2), b.convert('-1/3'), b.convert(5)]
    prod = (x[0] * x[1] * x[2]) ** 2
    expected = 2 * hbar / (v2 ** 2 * prod) * sum(1 / xi for xi in x) - 2 * hbar * v3 / (v2 ** 3 * prod)
    assert_(w_eval(w3, x) == expected)


def test_symmetry_and_threads() -> None:
    from pynctr.numfield import DoubleBackend
    from pynctr.bethe import solve_bethe
    d = DoubleBackend()
    sys = solve_bethe(Potential.create([0, -1, 0, 1], [], d), 2, '1/20', ['-0.9', '0.9'])
    ctx1 = RecursionContext(sys)
    ctx4 = RecursionContext(sys, threads=4)
    for g, n in [(0, 3), (1, 1), (0, 4), (1, 2)]:
        w1, w4 = compute_w(ctx1, g, n), compute_w(ctx4, g, n)
        assert_(symmetry_defect(w1) <= 1e-10)
        assert_(list(w1.terms.keys()) == list(w4.terms.keys()) and list(w1.terms.values()) == list(w4.terms.values()))
    assert_(ctx1.stats['contractions'] == ctx4.stats['contractions'] > 0)
    # asymptotics: W_1^(1) ~ m / (hbar x)
    w11 = compute_w(ctx1, 1, 1)
    lead = sum(v for idx, v in w11.terms.items() if idx[0][1] == 1)
    assert_(d.isclose(lead, 2 * 20., rel_tol=1e-10))
    big = 1e9
    assert_(abs(w_eval(w11, [big])) <= 100 / big)


def test_corruption_and_caps() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    b = RationalBackend()
    sys = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    ctx = RecursionContext(sys)
    w3 = compute_w(ctx, 0, 3)
    bad = ctx.with_corruption(0, 3, Fraction(1, 10**6))
    assert_(symmetry_defect(compute_w(bad, 0, 3)) > 0 and symmetry_defect(w3) == 0)
    try:
        compute_w(bad, 0, 4)
        raise AssertionError('corrupted W_3 went unnoticed')
    except SymmetryViolation:
        pass
    tight = RecursionContext(sys, table=build_kernel_table(sys, 3), k_cap=3)
    try:
        compute_w(tight, 1, 1)
        compute_w(tight, 2, 1)
        raise AssertionError('kernel cap not enforced')
    except CapExceeded:
        pass
    try:
        compute_w(RecursionContext(sys, cap=2), 1, 1)
        raise AssertionError('pole order cap not enforced')
    except PoleOrderOverflow:
        pass


def test_config_file_defaults() -> None:
    import pathlib
    import tempfile
    from pynctr.nc_utils import apply_config, get_temp_dir
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import solve_bethe
    temp_dir = pathlib.Path(tempfile.mkdtemp(dir=get_temp_dir()))
    with open(temp_dir / 'pynctr.yml', 'w') as f:
        f.write('pole_order_cap: 2\n')
    sys = solve_bethe(Potential.create([0, 1], [], RationalBackend()), 2, '1/4', ['-0.4', '0.4'])
    try:
        apply_config([temp_dir])
        ctx = RecursionContext(sys)
        assert_(ctx.cap == 2 and ctx.k_cap == 2)
        try:
            compute_w(ctx, 1, 1)
            raise AssertionError('pole order cap from pynctr.yml not enforced')
        except PoleOrderOverflow:
            pass
    finally:
        apply_config()


if __name__ == "__main__":
    test_gaudin_closed_forms()
    test_taylor_potential()
    test_symmetry_and_threads()
    test_corruption_and_caps()
    test_config_file_defaults()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
