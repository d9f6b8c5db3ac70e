from __future__ import annotations
import math
import concurrent.futures
import multiprocessing as mp
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Any
from pynctr.nc_utils import assert_, get_child_logger, LogUnavailable, NotLaurentPolynomial, DEFAULTS
from pynctr.numfield import Backend, BigFloatBackend, Scalar, poly_eval
from pynctr.bethe import BetheSystem, Potential, solve_bethe
from pynctr.correlators import RecursionContext, compute_w, w_residue_moment
from pynctr.nc_io import scalar_to_json, scalar_from_json

_logger = get_child_logger(__name__)


@dataclass(frozen=True)
class LogValue:
    '''
    analytic + sum c * ln(arg), kept unevaluated so that exact backends can carry free energies with logarithms.

    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> LogValue(Fraction(-1, 20), ((Fraction(1, 10), b.one),), b).collapse()
    Fraction(-1, 20)
    '''
    analytic: Scalar
    logs: tuple[tuple[Scalar, Scalar], ...]
    backend: Backend = field(compare=False, repr=False)

    def __post_init__(self) -> None:
        for _, arg in self.logs: assert_(arg != 0, 'log of zero')

    def __add__(self, other: LogValue) -> LogValue:
        return LogValue(self.analytic + other.analytic, self.logs + other.logs, self.backend)

    def scale(self, c: Scalar) -> LogValue:
        return LogValue(self.analytic * c, tuple((a * c, arg) for a, arg in self.logs), self.backend)

    def is_collapsible(self) -> bool:
        '''True if collapse() works on this backend'''
        return not self.backend.exact or all(c == 0 or arg == 1 for c, arg in self.logs)

    def collapse(self) -> Scalar:
        '''The value as a single scalar, principal branch of ln for negative or complex arguments'''
        b = self.backend
        acc = self.analytic
        for c, arg in self.logs:
            if c == 0 or arg == 1: continue
            try:
                acc = acc + c * b.log(arg)
            except LogUnavailable as e:
                raise LogUnavailable(f'ln({arg}) does not collapse on the {b} backend', module='energies', operation='collapse') from e
        return acc


def f0(sys: BetheSystem) -> LogValue:
    '''
    F^(0) = hbar^2 sum_{i != j} ln(s_i - s_j) - hbar sum_i V(s_i), over ordered pairs (i, j)

    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> F = f0(solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4']))
    >>> F.analytic, F.logs
    (Fraction(-1, 16), ((Fraction(1, 16), Fraction(-1, 1)), (Fraction(1, 16), Fraction(1, 1))))
    '''
    b = sys.backend
    h = sys.hbar
    V = sys.potential
    logs: list[tuple[Scalar, Scalar]] = []
    for i, si in enumerate(sys.roots):
        for j, sj in enumerate(sys.roots):
            if i != j: logs.append((h * h, si - sj))
    antiderivative = [b.zero] + [c / (k + 1) for k, c in enumerate(V.poly)]
    analytic = b.zero
    for s in sys.roots:
        analytic = analytic - h * poly_eval(antiderivative, s, b.zero)
        for alpha, sp in V.poles:
            if sp != 0: logs.append((-h * sp, s - alpha))
    return LogValue(analytic, tuple(logs), b)


def f1(sys: BetheSystem) -> LogValue:
    '''
    F^(1) = 1/2 ln det A + ln Delta(s)^2 + F^(0) / hbar^2, Delta the Vandermonde determinant of the roots

    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> f1(solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])).logs[0]
    (Fraction(1, 2), Fraction(1, 32))
    '''
    b = sys.backend
    logs: list[tuple[Scalar, Scalar]] = [(b.convert(Fraction(1, 2)), b.det(sys.A))]
    if sys.m > 1:
        delta2 = b.one
        for i in range(sys.m):
            for j in range(i): delta2 = delta2 * (sys.roots[i] - sys.roots[j]) ** 2
        logs.append((b.one, delta2))
    return LogValue(b.zero, tuple(logs), b) + f0(sys).scale(1 / (sys.hbar * sys.hbar))


@dataclass
class HbarProfile:
    '''
    Samples of R(h) = sum_i Res V(x) W_1^(g)(x) on a geometric grid of hbar values around `hbar`, and their fit
    by a Laurent polynomial sum_k r_k h^k.  Coefficients are stored scaled, rho_k = r_k hbar^k.
    '''
    g: int
    hbar: Scalar
    powers: list[int]
    grid: list[Scalar]
    values: list[Scalar]
    heldout_grid: list[Scalar]
    heldout_values: list[Scalar]
    rho: dict[int, Scalar]
    residual: float
    tolerance: float
    backend: Backend = field(repr=False)

    @property
    def usable(self) -> bool:
        return self.residual <= self.tolerance

    def coeff(self, k: int) -> Scalar:
        '''r_k'''
        return self.rho[k] / self.hbar ** k

    def predict(self, h: Scalar) -> Scalar:
        u = h / self.hbar
        acc = self.backend.zero
        for k in self.powers: acc = acc + self.rho[k] * u ** k
        return acc

    @property
    def resonant_power(self) -> int:
        return 2 - 2 * self.g

    def energy(self) -> Scalar:
        '''sum over k != 2 - 2g of r_k hbar^k / (k + 2g - 2), the term wise antiderivative of the dilaton equation'''
        acc = self.backend.zero
        for k in self.powers:
            if k == self.resonant_power: continue
            acc = acc + self.rho[k] / (k + 2 * self.g - 2)
        return acc


def _profile_backend(b: Backend, bits: int | None) -> BigFloatBackend:
    if isinstance(b, BigFloatBackend) and (bits is None or bits == b.bits): return b
    return BigFloatBackend(bits if bits is not None else DEFAULTS['bigfloat_bits'])


def _sample_residue(job: dict[str, Any]) -> Any:
    '''Runs the full pipeline at one hbar value.  Takes and returns plain data so it can run in a worker process'''
    b = BigFloatBackend(job['bits'])
    V = Potential.create([scalar_from_json(c, b) for c in job['poly']],
                         [(scalar_from_json(a, b), scalar_from_json(s, b)) for a, s in job['poles']], b)
    sys = solve_bethe(V, len(job['seeds']), scalar_from_json(job['hbar'], b), [scalar_from_json(s, b) for s in job['seeds']])
    ctx = RecursionContext(sys, cap=job['cap'], k_cap=job['k_cap'])
    R = w_residue_moment(compute_w(ctx, job['g'], 1), 0, V).scalar()
    return scalar_to_json(R, b)


def _run_samples(jobs: list[dict[str, Any]], processes: int) -> list[Any]:
    import platform
    if platform.system() == 'Windows': processes = 1
    if processes <= 1: return [_sample_residue(job) for job in jobs]
    out: list[Any] = [None] * len(jobs)
    # fork so workers inherit the package state and logging setup
    with concurrent.futures.ProcessPoolExecutor(processes, mp_context=mp.get_context('fork')) as executor:
        fut_map = {executor.submit(_sample_residue, job): i for i, job in enumerate(jobs)}
        for future in concurrent.futures.as_completed(fut_map):
            i = fut_map[future]
            try:
                out[i] = future.result()
            except Exception as e:
                raise type(e)(f'Exception: {str(e)} with hbar sample: {jobs[i]["hbar"]}') from e
    return out


def _fit(b: BigFloatBackend, rows: list[list[Scalar]], values: list[Scalar]) -> list[Scalar]:
    ctx = b.ctx
    A = ctx.matrix(rows)
    y = ctx.matrix(values)
    if all(ctx.im(v) == 0 for v in values):
        sol, _ = ctx.qr_solve(A, ctx.matrix([ctx.re(v) for v in values]))
    else:
        AH = A.H
        sol = ctx.lu_solve(AH * A, AH * y)
    return [sol[i] for i in range(len(rows[0]))]


def hbar_profile(ctx: RecursionContext, g: int, hbar: Any = None, q: int | None = None, max_power: int = 1,
                 processes: int = 1, bits: int | None = None) -> HbarProfile:
    '''
    Samples R(h) on the grid hbar * 1.05^j, j = -q..q, plus two held out points at j = +-(q + 1), and fits
    sum_{k = 1 - 2g}^{max_power} rho_k (h / hbar)^k by least squares.  The pipeline at every sample runs on the
    bigfloat backend, seeded at the roots of ctx.

    Args:
        ctx: recursion context whose potential and roots are used
        g: genus, >= 2
        hbar: center of the grid, default the hbar of ctx
        q: half width of the grid, default the smallest with two more samples than unknowns
        max_power: highest power of h in the fit
        processes: worker processes for the samples
        bits: bigfloat precision, default the precision of ctx if bigfloat, else the package default
    '''
    assert_(g >= 2, f'hbar profiles are for g >= 2, got {g}')
    b = _profile_backend(ctx.backend, bits)
    V = ctx.sys.potential.with_backend(b)
    h0 = b.convert(ctx.sys.hbar if hbar is None else hbar)
    powers = list(range(1 - 2 * g, max_power + 1))
    unknowns = len(powers)
    if q is None: q = math.ceil((unknowns + 1) / 2)
    assert_(2 * q + 1 >= unknowns + 2, f'grid with q={q} too small for {unknowns} coefficients')
    ratio = b.convert(Fraction(21, 20))
    grid = [h0 * ratio ** j for j in range(-q, q + 1)]
    heldout = [h0 * ratio ** (-q - 1), h0 * ratio ** (q + 1)]
    base = {'bits': b.bits,
            'poly': [scalar_to_json(c, b) for c in V.poly],
            'poles': [[scalar_to_json(a, b), scalar_to_json(s, b)] for a, s in V.poles],
            'seeds': [scalar_to_json(b.convert(s), b) for s in ctx.sys.roots],
            'g': g,
            'cap': ctx.cap,
            'k_cap': ctx.k_cap}
    jobs = [dict(base, hbar=scalar_to_json(h, b)) for h in grid + heldout]
    results = [scalar_from_json(r, b) for r in _run_samples(jobs, processes)]
    values, heldout_values = results[:len(grid)], results[len(grid):]
    rows = [[(h / h0) ** k for k in powers] for h in grid]
    rho = dict(zip(powers, _fit(b, rows, values)))
    profile = HbarProfile(g, h0, powers, grid, values, heldout, heldout_values, rho, 0., DEFAULTS['profile_rel_tol'], b)
    residual = 0.
    for h, v in zip(heldout, heldout_values):
        residual = max(residual, b.abs(profile.predict(h) - v) / max(b.abs(v), b.zero_tol))
    profile.residual = residual
    _logger.info(f'fitted hbar profile g: {g} hbar: {b.ctx.nstr(h0, 8)} samples: {len(jobs)} held out residual: {residual:.3e}')
    return profile


def fg_high(ctx: RecursionContext, g: int, hbar: Any = None, q: int | None = None, max_power: int = 1, processes: int = 1,
            bits: int | None = None, allow_resonant: bool = False) -> tuple[Scalar, HbarProfile]:
    '''
    F^(g) for g >= 2 from the hbar profile of sum_i Res V W_1^(g), returned with the profile.

    The value is in the bigfloat backend of the profile, converted back for a double ctx.

    Args:
        allow_resonant: drop a significant h^(2 - 2g) coefficient with a warning instead of raising
    '''
    profile = hbar_profile(ctx, g, hbar, q, max_power, processes, bits)
    b = profile.backend
    params = {'g': g, 'hbar': str(ctx.sys.hbar if hbar is None else hbar)}
    if not profile.usable:
        raise NotLaurentPolynomial(f'held out residual {profile.residual:.3e} exceeds {profile.tolerance:.1e}, '
                                   f'sum Res V W_1 is not a Laurent polynomial in hbar', module='energies', operation='fg_high',
                                   params=params)
    scale = max(b.abs(v) for v in profile.rho.values())
    resonant = b.abs(profile.rho[profile.resonant_power])
    if resonant > profile.tolerance * scale:
        _logger.warning(f'resonant term hbar^{profile.resonant_power} of F^({g}) is {resonant:.3e} relative to {scale:.3e}')
        if not allow_resonant:
            raise NotLaurentPolynomial(f'resonant term hbar^{profile.resonant_power} present, F^({g}) would need ln(hbar)',
                                       module='energies', operation='fg_high', params=params)
    value = profile.energy()
    if ctx.backend.name == 'double': value = ctx.backend.convert(value)
    return value, profile


def free_energy(ctx: RecursionContext, g: int, **kwargs: Any) -> Scalar:
    '''
    F^(g) as a single scalar, plus any shift injected into ctx.  kwargs go to fg_high for g >= 2.
    For g >= 2 on the rational backend the result is a bigfloat.
    '''
    assert_(g >= 0, f'genus must be >= 0, got {g}')
    if g == 0: value = f0(ctx.sys).collapse()
    elif g == 1: value = f1(ctx.sys).collapse()
    else: value, _ = fg_high(ctx, g, **kwargs)
    shift = ctx.energy_shift.get(g)
    if shift is not None: value = value + shift
    return value


def residue_against_potential(ctx: RecursionContext, g: int) -> Scalar:
    '''sum_i Res_{x -> s_i} V(x) W_1^(g)(x)'''
    return w_residue_moment(compute_w(ctx, g, 1), 0, ctx.sys.potential).scalar()


def resolve(ctx: RecursionContext, potential: Potential | None = None, hbar: Any = None, backend: Backend | None = None) -> RecursionContext:
    '''
    A fresh context for a changed potential, hbar or backend, solved from the roots of ctx so it stays on the same branch.
    Injected energy shifts carry over.
    '''
    b = backend if backend is not None else ctx.backend
    V = (potential if potential is not None else ctx.sys.potential).with_backend(b)
    h = b.convert(ctx.sys.hbar if hbar is None else hbar)
    sys = solve_bethe(V, ctx.sys.m, h, [b.convert(s) for s in ctx.sys.roots])
    new = RecursionContext(sys, cap=ctx.cap, k_cap=ctx.k_cap, threads=ctx.threads)
    new.energy_shift = {g: b.convert(v) for g, v in ctx.energy_shift.items()}
    return new


def float_context(ctx: RecursionContext, bits: int | None = None) -> RecursionContext:
    '''ctx itself on a float backend, else the same system re-solved on bigfloat'''
    if not ctx.backend.exact: return ctx
    return resolve(ctx, backend=BigFloatBackend(bits if bits is not None else DEFAULTS['bigfloat_bits']))


def _backend_fields(b: Backend) -> dict[str, Any]:
    out: dict[str, Any] = {'backend': b.name}
    if isinstance(b, BigFloatBackend): out['bits'] = b.bits
    return out


def energy_record(ctx: RecursionContext, g: int, **kwargs: Any) -> dict[str, Any]:
    '''
    JSON record of F^(g).  For g <= 1 the analytic part and log terms are kept, plus the collapsed value when the
    backend can take the logs; for g >= 2 only the value, in the backend the profile was computed in.

    >>> from pynctr.numfield import RationalBackend
    >>> ctx = RecursionContext(solve_bethe(Potential.gaudin_one_point(1, RationalBackend()), 1, '1/10', ['0.9']))
    >>> energy_record(ctx, 0)
    {'backend': 'rational', 'g': 0, 'analytic': '-1/20', 'logs': [['1/10', '1/1']], 'value': '-1/20'}
    '''
    b = ctx.backend
    shift = ctx.energy_shift.get(g)
    if g <= 1:
        lv = f0(ctx.sys) if g == 0 else f1(ctx.sys)
        if shift is not None: lv = LogValue(lv.analytic + shift, lv.logs, b)
        return dict(_backend_fields(b), g=g, analytic=scalar_to_json(lv.analytic, b),
                    logs=[[scalar_to_json(c, b), scalar_to_json(arg, b)] for c, arg in lv.logs],
                    value=scalar_to_json(lv.collapse(), b) if lv.is_collapsible() else None)
    value = free_energy(ctx, g, **kwargs)
    vb = _profile_backend(b, kwargs.get('bits')) if b.exact else b
    return dict(_backend_fields(vb), g=g, value=scalar_to_json(value, vb))


def test_f0_f1_examples() -> None:
    from pynctr.numfield import RationalBackend
    b = RationalBackend()
    hbar = Fraction(1, 10)
    sys = solve_bethe(Potential.gaudin_one_point(1, b), 1, hbar, ['0.9'])
    assert_(f0(sys).collapse() == -hbar / 2)
    F1 = f1(sys)
    assert_(not F1.is_collapsible() and F1.analytic == -1 / (2 * hbar))
    assert_((Fraction(1, 2), hbar / 2) in F1.logs)
    try:
        F1.collapse()
        raise AssertionError('ln(hbar / 2) collapsed on the rational backend')
    except LogUnavailable:
        pass
    fctx = float_context(RecursionContext(sys))
    bf = fctx.backend
    expected = bf.log(bf.convert(hbar / 2)) / 2 - 1 / (2 * bf.convert(hbar))
    assert_(bf.isclose(free_energy(fctx, 1), expected, rel_tol=1e-40))
    # m = 1 quadratic: s = 0, V(0) = 0
    sys2 = solve_bethe(Potential.create([0, 1], [], b), 1, hbar, ['0.1'])
    assert_(f0(sys2).collapse() == 0)


def test_fg_gaudin() -> None:
    bf = BigFloatBackend(160)
    hbar = Fraction(1, 10)
    ctx = RecursionContext(solve_bethe(Potential.gaudin_one_point(1, bf), 1, hbar, ['0.9']))
    h = bf.convert(hbar)
    F2, profile = fg_high(ctx, 2)
    assert_(profile.usable and profile.residual < 1e-25, f'{profile.residual}')
    assert_(bf.isclose(F2, -1 / (12 * h) + 1 / (2 * h ** 3), rel_tol=1e-20))
    # the dilaton equation holds term by term for the fitted coefficients
    R = residue_against_potential(ctx, 2)
    assert_(bf.isclose(profile.predict(h), R, rel_tol=1e-25))
    F3 = free_energy(ctx, 3)
    assert_(bf.isclose(F3, 1 / (12 * h ** 3) - 1 / h ** 5, rel_tol=1e-20))


def test_fg_taylor_potential() -> None:
    from pynctr.numfield import RationalBackend
    b = RationalBackend()
    ctx = RecursionContext(solve_bethe(Potential.from_taylor({2: 1, 3: Fraction(1, 2), 4: Fraction(1, 3)}, b), 1, '1/7', ['0.1']))
    F2 = free_energy(ctx, 2)
    bf = _profile_backend(b, None)
    assert_(bf.isclose(F2, bf.convert(Fraction(-7, 24)), rel_tol=1e-20), f'{F2}')
    F2_parallel, _ = fg_high(ctx, 2, processes=2)
    assert_(F2_parallel == F2)


def test_not_laurent() -> None:
    from pynctr.numfield import DoubleBackend
    d = DoubleBackend()
    # the roots move with hbar, so R is not a Laurent polynomial
    ctx = RecursionContext(solve_bethe(Potential.create([0, -1, 0, 1], [], d), 2, '1/2', ['-1.2', '1.2']))
    try:
        fg_high(ctx, 2, bits=96)
        raise AssertionError('non Laurent profile accepted')
    except NotLaurentPolynomial as e:
        assert_(e.operation == 'fg_high')


if __name__ == "__main__":
    test_f0_f1_examples()
    test_fg_gaudin()
    test_fg_taylor_potential()
    test_not_laurent()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
