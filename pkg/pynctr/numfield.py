from __future__ import annotations
import math
import numpy as np
import numpy.polynomial.polynomial as npp
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Any, TYPE_CHECKING
from collections.abc import Sequence, Mapping
from pynctr.nc_utils import (assert_, get_child_logger, NCException, PoleOrderOverflow,
                             EvaluationAtPole, LogUnavailable, SingularHessian, DEFAULTS)

if TYPE_CHECKING:
    from pynctr.bethe import Potential

_logger = get_child_logger(__name__)

Scalar = Any
Matrix = list[list[Any]]


class Backend:
    '''
    A scalar field.  Subclasses decide how numbers are stored and how approximate equality is judged.
    All algorithms in this package only ever combine backend scalars with each other and with python ints,
    so the same code runs exactly on rationals and approximately on floats.
    '''
    name: str = ''
    exact: bool = False
    default_rel_tol: float = 0.
    zero_tol: float = 0.

    @property
    def zero(self) -> Scalar:
        return self.convert(0)

    @property
    def one(self) -> Scalar:
        return self.convert(1)

    def convert(self, value: Any) -> Scalar:
        raise NotImplementedError()

    def inv(self, a: Scalar) -> Scalar:
        if a == 0: raise NCException('division by zero', module='numfield', operation='inv')
        return self.one / a

    def log(self, a: Scalar) -> Scalar:
        raise NotImplementedError()

    def sqrt(self, a: Scalar) -> Scalar:
        raise NotImplementedError()

    def abs(self, a: Scalar) -> float:
        return float(abs(a))

    def to_complex(self, a: Scalar) -> complex:
        return complex(a)

    def spec(self) -> tuple[Any, ...]:
        '''Picklable description, see get_backend'''
        return (self.name,)

    def is_negligible(self, a: Scalar, scale: float = 1.) -> bool:
        '''Exact zero test on exact backends, relative threshold on approximate ones'''
        if self.exact: return a == 0
        return self.abs(a) <= self.zero_tol * max(1., scale)

    def rel_diff(self, a: Scalar, b: Scalar) -> float:
        '''
        |a - b| / max(1, |a|, |b|) as a float.  Zero exactly when a == b on exact backends

        >>> RationalBackend().rel_diff(Fraction(1, 3), Fraction(1, 3))
        0.0
        '''
        if a == b: return 0.
        return self.abs(a - b) / max(1., self.abs(a), self.abs(b))

    def isclose(self, a: Scalar, b: Scalar, rel_tol: float | None = None) -> bool:
        if rel_tol is None: rel_tol = self.default_rel_tol
        if self.exact and rel_tol == 0: return a == b
        return self.rel_diff(a, b) <= rel_tol

    def inverse(self, matrix: Matrix) -> Matrix:
        raise NotImplementedError()

    def det(self, matrix: Matrix) -> Scalar:
        raise NotImplementedError()

    def solve(self, matrix: Matrix, rhs: list[Scalar]) -> list[Scalar]:
        raise NotImplementedError()

    def __repr__(self) -> str:
        return self.name


class RationalBackend(Backend):
    '''
    Exact arithmetic with fractions.Fraction

    >>> b = RationalBackend()
    >>> b.convert('1/10') + b.convert(0.5)
    Fraction(3, 5)
    >>> b.inverse([[b.convert(6), b.convert(-2)], [b.convert(-2), b.convert(6)]])
    [[Fraction(3, 16), Fraction(1, 16)], [Fraction(1, 16), Fraction(3, 16)]]
    '''
    name = 'rational'
    exact = True
    default_rel_tol = 0.

    def convert(self, value: Any) -> Scalar:
        if isinstance(value, Fraction): return value
        if isinstance(value, (int, str)): return Fraction(value)
        if isinstance(value, float): return Fraction(value)
        if isinstance(value, complex):
            assert_(value.imag == 0, f'rational backend cannot hold complex value {value}')
            return Fraction(value.real)
        if hasattr(value, 'numerator') and hasattr(value, 'denominator'):
            return Fraction(int(value.numerator), int(value.denominator))
        raise NCException(f'cannot convert {value!r} to a rational', module='numfield', operation='convert')

    def log(self, a: Scalar) -> Scalar:
        raise LogUnavailable(f'ln({a}) is not rational', module='numfield', operation='log')

    def sqrt(self, a: Scalar) -> Scalar:
        num, den = math.isqrt(a.numerator), math.isqrt(a.denominator)
        if a >= 0 and num * num == a.numerator and den * den == a.denominator: return Fraction(num, den)
        raise LogUnavailable(f'sqrt({a}) is not rational', module='numfield', operation='sqrt')

    def to_complex(self, a: Scalar) -> complex:
        return complex(float(a))

    def _sympy_matrix(self, matrix: Matrix) -> Any:
        import sympy
        return sympy.Matrix([[sympy.Rational(x.numerator, x.denominator) for x in row] for row in matrix])

    @staticmethod
    def _from_sympy(x: Any) -> Fraction:
        return Fraction(int(x.p), int(x.q))

    def det(self, matrix: Matrix) -> Scalar:
        return self._from_sympy(self._sympy_matrix(matrix).det(method='bareiss'))

    def inverse(self, matrix: Matrix) -> Matrix:
        m = self._sympy_matrix(matrix)
        if m.det(method='bareiss') == 0: raise SingularHessian('matrix is singular', module='numfield', operation='inverse')
        inv = m.inv(method='GE')
        return [[self._from_sympy(inv[i, j]) for j in range(inv.cols)] for i in range(inv.rows)]

    def solve(self, matrix: Matrix, rhs: list[Scalar]) -> list[Scalar]:
        import sympy
        m = self._sympy_matrix(matrix)
        if m.det(method='bareiss') == 0: raise SingularHessian('matrix is singular', module='numfield', operation='solve')
        b = sympy.Matrix([sympy.Rational(x.numerator, x.denominator) for x in rhs])
        sol = m.LUsolve(b)
        return [self._from_sympy(sol[i]) for i in range(len(rhs))]


class DoubleBackend(Backend):
    '''
    Machine precision, python float or complex scalars.  Linear algebra through scipy LU with partial pivoting

    >>> b = DoubleBackend()
    >>> b.isclose(0.1 + 0.2, 0.3)
    True
    >>> b.log(-1.)
    3.141592653589793j
    '''
    name = 'double'
    exact = False
    default_rel_tol = DEFAULTS['float_rel_tol']
    zero_tol = 1e-10

    def convert(self, value: Any) -> Scalar:
        if isinstance(value, (float, complex)): return value
        if isinstance(value, (int, Fraction)): return float(value)
        if isinstance(value, str):
            if '/' in value: return float(Fraction(value))
            if 'j' in value: return complex(value)
            return float(value)
        if hasattr(value, 'imag') and value.imag != 0: return complex(value)
        if hasattr(value, 'real'): return float(value.real)
        return float(value)

    def log(self, a: Scalar) -> Scalar:
        if isinstance(a, complex) or a < 0: return complex(np.log(complex(a)))
        return float(np.log(a))

    def sqrt(self, a: Scalar) -> Scalar:
        if isinstance(a, complex) or a < 0: return complex(np.sqrt(complex(a)))
        return float(np.sqrt(a))

    def _array(self, matrix: Matrix) -> np.ndarray:
        is_complex = any(isinstance(x, complex) for row in matrix for x in row)
        return np.array(matrix, dtype=complex if is_complex else float)

    @staticmethod
    def _to_scalar(x: Any) -> Scalar:
        if np.iscomplexobj(x): return complex(x)
        return float(x)

    def _lu(self, matrix: Matrix) -> tuple[Any, Any]:
        import scipy.linalg
        a = self._array(matrix)
        if not np.all(np.isfinite(a)): raise SingularHessian('matrix has non finite entries', module='numfield', operation='lu')
        if np.linalg.cond(a) > 1e14: raise SingularHessian(f'matrix is singular, condition number: {np.linalg.cond(a):.3g}',
                                                           module='numfield', operation='lu')
        return scipy.linalg.lu_factor(a)

    def det(self, matrix: Matrix) -> Scalar:
        return self._to_scalar(np.linalg.det(self._array(matrix)))

    def inverse(self, matrix: Matrix) -> Matrix:
        import scipy.linalg
        lu_piv = self._lu(matrix)
        inv = scipy.linalg.lu_solve(lu_piv, np.eye(len(matrix)))
        return [[self._to_scalar(x) for x in row] for row in inv]

    def solve(self, matrix: Matrix, rhs: list[Scalar]) -> list[Scalar]:
        import scipy.linalg
        lu_piv = self._lu(matrix)
        b = np.array(rhs, dtype=complex if any(isinstance(x, complex) for x in rhs) else float)
        return [self._to_scalar(x) for x in scipy.linalg.lu_solve(lu_piv, b)]


class BigFloatBackend(Backend):
    '''
    Arbitrary precision floats from mpmath.  Each backend owns a private mpmath context so the working
    precision is never shared through mpmath's global state.

    >>> b = BigFloatBackend(200)
    >>> x = b.convert('1/3')
    >>> b.isclose(3 * x, b.one, rel_tol=1e-50)
    True
    '''
    name = 'bigfloat'
    exact = False
    default_rel_tol = DEFAULTS['float_rel_tol']

    def __init__(self, bits: int | None = None) -> None:
        import mpmath
        if bits is None: bits = DEFAULTS['bigfloat_bits']
        assert_(bits >= 53, f'bigfloat precision must be at least 53 bits, got {bits}')
        self.bits = bits
        self.ctx = mpmath.MPContext()
        self.ctx.prec = bits
        self.zero_tol = 2.0 ** (-bits // 2)

    def __reduce__(self) -> tuple[Any, ...]:
        return (BigFloatBackend, (self.bits,))

    def spec(self) -> tuple[Any, ...]:
        return (self.name, self.bits)

    def convert(self, value: Any) -> Scalar:
        ctx = self.ctx
        if isinstance(value, Fraction): return ctx.mpf(value.numerator) / value.denominator
        if isinstance(value, int): return ctx.mpf(value)
        if isinstance(value, str):
            if '/' in value: return self.convert(Fraction(value))
            if 'j' in value: return ctx.mpc(complex(value))
            return ctx.mpf(value)
        return ctx.convert(value)

    def log(self, a: Scalar) -> Scalar:
        return self.ctx.log(a)

    def sqrt(self, a: Scalar) -> Scalar:
        return self.ctx.sqrt(a)

    def abs(self, a: Scalar) -> float:
        return float(self.ctx.fabs(a))

    def to_complex(self, a: Scalar) -> complex:
        return complex(a)

    def det(self, matrix: Matrix) -> Scalar:
        return self.ctx.det(self.ctx.matrix(matrix))

    def inverse(self, matrix: Matrix) -> Matrix:
        try:
            inv = self.ctx.inverse(self.ctx.matrix(matrix))
        except ZeroDivisionError as e:
            raise SingularHessian('matrix is singular', module='numfield', operation='inverse') from e
        n = len(matrix)
        return [[inv[i, j] for j in range(n)] for i in range(n)]

    def solve(self, matrix: Matrix, rhs: list[Scalar]) -> list[Scalar]:
        try:
            sol = self.ctx.lu_solve(self.ctx.matrix(matrix), self.ctx.matrix(rhs))
        except ZeroDivisionError as e:
            raise SingularHessian('matrix is singular', module='numfield', operation='solve') from e
        return [sol[i] for i in range(len(rhs))]

    def __repr__(self) -> str:
        return f'bigfloat({self.bits})'


def get_backend(name: str, bits: int | None = None) -> Backend:
    '''
    >>> get_backend('bigfloat', 128)
    bigfloat(128)
    >>> get_backend('rational').exact
    True
    '''
    if name == 'rational': return RationalBackend()
    if name == 'double': return DoubleBackend()
    if name == 'bigfloat': return BigFloatBackend(bits if bits is not None else DEFAULTS['bigfloat_bits'])
    raise NCException(f'unknown backend: {name}', module='numfield', operation='get_backend')


# Dense univariate polynomials, coefficient lists in ascending powers.  The arithmetic runs through
# numpy.polynomial on object arrays so Fraction and mpf coefficients stay exact or at full precision.

def _series(a: Sequence[Scalar]) -> np.ndarray:
    out = np.empty(len(a), dtype=object)
    out[:] = list(a)
    return out


def poly_trim(p: Sequence[Scalar]) -> list[Scalar]:
    out = list(p)
    while out and out[-1] == 0: out.pop()
    return out


def poly_add(a: Sequence[Scalar], b: Sequence[Scalar]) -> list[Scalar]:
    if not len(a) or not len(b): return poly_trim(a if len(a) else b)
    return poly_trim(npp.polyadd(_series(a), _series(b)))


def poly_neg(a: Sequence[Scalar]) -> list[Scalar]:
    return [-c for c in a]


def poly_scale(a: Sequence[Scalar], c: Scalar) -> list[Scalar]:
    return poly_trim([x * c for x in a])


def poly_mul(a: Sequence[Scalar], b: Sequence[Scalar]) -> list[Scalar]:
    '''
    >>> poly_mul([1, 1], [-1, 1])
    [-1, 0, 1]
    '''
    if not len(a) or not len(b): return []
    return poly_trim(npp.polymul(_series(a), _series(b)))


def poly_deriv(a: Sequence[Scalar]) -> list[Scalar]:
    '''
    >>> poly_deriv([5, 0, 3])
    [0, 6]
    '''
    if len(a) < 2: return []
    return poly_trim(npp.polyder(_series(a)))


def poly_eval(a: Sequence[Scalar], x: Scalar, zero: Scalar = 0) -> Scalar:
    if not len(a): return zero
    return npp.polyval(x, _series(a))


def poly_shift(a: Sequence[Scalar], c: Scalar) -> list[Scalar]:
    '''
    Coefficients of a(c + e) in powers of e (Taylor shift), same length as a

    >>> poly_shift([0, 0, 1], 3)
    [9, 6, 1]
    '''
    out: list[Scalar] = []
    for coef in reversed(a): out = poly_add(poly_mul(out, [c, 1]), [coef])
    return out + [0 * c] * (len(a) - len(out))


def _series_divide(num: Sequence[Scalar], den: Sequence[Scalar], terms: int, backend: Backend) -> list[Scalar]:
    '''
    First `terms` coefficients of num / den as power series, den[0] != 0.
    The truncated series is the reversed quotient of the reversed polynomials.
    '''
    if terms <= 0: return []
    den = poly_trim([backend.one * c for c in den])
    top = [backend.one * c for c in list(num[:terms])] + [backend.zero] * (terms - min(len(num), terms))
    quot, _ = npp.polydiv(_series([backend.zero] * (len(den) - 1) + top[::-1]), _series(den[::-1]))
    q = list(quot)[::-1]
    return [backend.zero] * (terms - len(q)) + q


def _poly_to_sympy(a: Sequence[Fraction], x: Any) -> Any:
    import sympy
    coeffs = [sympy.Rational(c.numerator, c.denominator) for c in reversed(a)] if len(a) else [0]
    return sympy.Poly(coeffs, x, domain='QQ')


def _poly_from_sympy(p: Any) -> list[Fraction]:
    return poly_trim([Fraction(int(c.p), int(c.q)) for c in reversed(p.all_coeffs())])


@dataclass(frozen=True)
class RatFun:
    '''
    A univariate rational function num(x) / den(x) with dense coefficient lists in ascending powers.
    Use RatFun.create (or the arithmetic operators), which normalize: monic denominator, and on the exact
    backend no common factor between numerator and denominator.

    >>> b = RationalBackend()
    >>> x = RatFun.x(b)
    >>> f = x - RatFun.const(1, b) / x  # the Gaudin V' with s = 1
    >>> f(b.convert(2))
    Fraction(3, 2)
    >>> (f * x).den
    (Fraction(1, 1),)
    '''
    num: tuple[Scalar, ...]
    den: tuple[Scalar, ...]
    backend: Backend = field(compare=False, repr=False)

    @staticmethod
    def create(num: Sequence[Any], den: Sequence[Any], backend: Backend) -> RatFun:
        n = poly_trim([backend.convert(c) for c in num])
        d = poly_trim([backend.convert(c) for c in den])
        assert_(len(d) > 0, 'denominator of a rational function cannot be zero')
        if not n: return RatFun((), (backend.one,), backend)
        if backend.exact and len(d) > 1:
            import sympy
            x = sympy.Symbol('x')
            p, q = _poly_to_sympy(n, x), _poly_to_sympy(d, x)
            g = p.gcd(q)
            if g.degree() > 0:
                n, d = _poly_from_sympy(p.exquo(g)), _poly_from_sympy(q.exquo(g))
        lead = backend.inv(d[-1])
        return RatFun(tuple(c * lead for c in n), tuple(c * lead for c in d), backend)

    @staticmethod
    def const(c: Any, backend: Backend) -> RatFun:
        return RatFun.create([c], [1], backend)

    @staticmethod
    def x(backend: Backend) -> RatFun:
        return RatFun.create([0, 1], [1], backend)

    @staticmethod
    def polynomial(coeffs: Sequence[Any], backend: Backend) -> RatFun:
        return RatFun.create(coeffs, [1], backend)

    @staticmethod
    def pole(center: Scalar, order: int, coeff: Any, backend: Backend) -> RatFun:
        '''coeff / (x - center)^order'''
        den: list[Scalar] = [backend.one]
        for _ in range(order): den = poly_mul(den, [-backend.convert(center), backend.one])
        return RatFun.create([coeff], den, backend)

    def _coerce(self, other: Any) -> RatFun:
        if isinstance(other, RatFun): return other
        return RatFun.const(other, self.backend)

    def __add__(self, other: Any) -> RatFun:
        o = self._coerce(other)
        if self.den == o.den: return RatFun.create(poly_add(self.num, o.num), self.den, self.backend)
        num = poly_add(poly_mul(self.num, o.den), poly_mul(o.num, self.den))
        return RatFun.create(num, poly_mul(self.den, o.den), self.backend)

    __radd__ = __add__

    def __neg__(self) -> RatFun:
        return RatFun(tuple(poly_neg(self.num)), self.den, self.backend)

    def __sub__(self, other: Any) -> RatFun:
        return self + (-self._coerce(other))

    def __rsub__(self, other: Any) -> RatFun:
        return self._coerce(other) - self

    def __mul__(self, other: Any) -> RatFun:
        o = self._coerce(other)
        return RatFun.create(poly_mul(self.num, o.num), poly_mul(self.den, o.den), self.backend)

    __rmul__ = __mul__

    def reciprocal(self) -> RatFun:
        assert_(len(self.num) > 0, 'reciprocal of the zero function')
        return RatFun.create(self.den, self.num, self.backend)

    def __truediv__(self, other: Any) -> RatFun:
        return self * self._coerce(other).reciprocal()

    def __rtruediv__(self, other: Any) -> RatFun:
        return self._coerce(other) * self.reciprocal()

    def __pow__(self, k: int) -> RatFun:
        assert_(k >= 0)
        out = RatFun.const(1, self.backend)
        for _ in range(k): out = out * self
        return out

    def derivative(self) -> RatFun:
        num = poly_add(poly_mul(poly_deriv(self.num), self.den), poly_neg(poly_mul(self.num, poly_deriv(self.den))))
        return RatFun.create(num, poly_mul(self.den, self.den), self.backend)

    def __call__(self, x: Scalar) -> Scalar:
        zero = self.backend.zero
        d = poly_eval(self.den, x, zero)
        if d == 0: raise EvaluationAtPole(f'rational function evaluated at a pole {x}', module='numfield', operation='ratfun_eval')
        return poly_eval(self.num, x, zero) / d

    def is_zero(self) -> bool:
        return len(self.num) == 0

    def with_backend(self, backend: Backend) -> RatFun:
        '''Same coefficients converted to another backend (no renormalization)'''
        return RatFun(tuple(backend.convert(c) for c in self.num), tuple(backend.convert(c) for c in self.den), backend)

    def __repr__(self) -> str:
        return f'RatFun(num={list(self.num)}, den={list(self.den)})'


@dataclass(frozen=True)
class PoleBasis:
    '''
    A finite sum  sum_(j, k) c_(j,k) / (x - s_j)^k  over the roots s_j, all orders k >= 1.

    >>> b = RationalBackend()
    >>> f = PoleBasis({(0, 2): b.one}, (b.zero,))
    >>> pb_eval(f, b.convert(2), b)
    Fraction(1, 4)
    '''
    terms: Mapping[tuple[int, int], Scalar]
    roots: tuple[Scalar, ...]

    def __post_init__(self) -> None:
        for (j, k) in self.terms:
            assert_(k >= 1, f'pole orders must be >= 1, got {k}')
            assert_(0 <= j < len(self.roots), f'root index {j} out of range')

    def __add__(self, other: PoleBasis) -> PoleBasis:
        terms = dict(self.terms)
        for key, c in other.terms.items(): terms[key] = terms[key] + c if key in terms else c
        return PoleBasis(terms, self.roots)

    def scale(self, c: Scalar) -> PoleBasis:
        return PoleBasis({key: v * c for key, v in self.terms.items()}, self.roots)

    def derivative(self) -> PoleBasis:
        '''d/dx c/(x-s)^k = -k c/(x-s)^(k+1)'''
        return PoleBasis({(j, k + 1): -k * c for (j, k), c in self.terms.items()}, self.roots)

    def max_order(self, j: int | None = None) -> int:
        orders = [k for (jj, k) in self.terms if j is None or jj == j]
        return max(orders) if orders else 0

    def to_ratfun(self, backend: Backend) -> RatFun:
        out = RatFun.const(0, backend)
        for (j, k), c in sorted(self.terms.items()):
            out = out + RatFun.pole(self.roots[j], k, c, backend)
        return out


def pb_eval(f: PoleBasis, x: Scalar, backend: Backend) -> Scalar:
    acc = backend.zero
    for (j, k), c in sorted(f.terms.items()):
        d = x - f.roots[j]
        if d == 0: raise EvaluationAtPole(f'pole basis function evaluated at root {j}', module='numfield', operation='pb_eval')
        acc = acc + c / d ** k
    return acc


@dataclass(frozen=True)
class LaurentSeries:
    '''
    Truncated Laurent expansion  sum_{e=valuation}^{order} coeffs[e - valuation] (x - center)^e + O((x - center)^(order + 1))

    >>> b = RationalBackend()
    >>> s = LaurentSeries.from_dict(0, {-1: b.convert(3), 0: b.convert(5)}, 2, b)
    >>> residue(s)
    Fraction(3, 1)
    >>> (s * s).as_dict()
    {-2: Fraction(9, 1), -1: Fraction(30, 1), 0: Fraction(25, 1)}
    '''
    center: Scalar
    valuation: int
    coeffs: tuple[Scalar, ...]
    order: int
    backend: Backend = field(compare=False, repr=False)

    @staticmethod
    def from_dict(center: Scalar, coeffs: Mapping[int, Any], order: int, backend: Backend) -> LaurentSeries:
        low = min(coeffs) if coeffs else order + 1
        low = min(low, order + 1)
        vals = [backend.convert(coeffs.get(e, 0)) for e in range(low, order + 1)]
        return LaurentSeries(center, low, tuple(vals), order, backend)

    def coeff(self, e: int) -> Scalar:
        assert_(e <= self.order, f'coefficient of exponent {e} beyond truncation order {self.order}')
        if e < self.valuation: return self.backend.zero
        return self.coeffs[e - self.valuation]

    def as_dict(self) -> dict[int, Scalar]:
        return {self.valuation + i: c for i, c in enumerate(self.coeffs) if c != 0}

    def __add__(self, other: LaurentSeries) -> LaurentSeries:
        order = min(self.order, other.order)
        low = min(self.valuation, other.valuation)
        vals = [self.coeff(e) + other.coeff(e) for e in range(low, order + 1)]
        return LaurentSeries(self.center, low, tuple(vals), order, self.backend)

    def __neg__(self) -> LaurentSeries:
        return LaurentSeries(self.center, self.valuation, tuple(-c for c in self.coeffs), self.order, self.backend)

    def __sub__(self, other: LaurentSeries) -> LaurentSeries:
        return self + (-other)

    def scale(self, c: Scalar) -> LaurentSeries:
        return LaurentSeries(self.center, self.valuation, tuple(x * c for x in self.coeffs), self.order, self.backend)

    def __mul__(self, other: LaurentSeries) -> LaurentSeries:
        low = self.valuation + other.valuation
        order = min(self.order + other.valuation, other.order + self.valuation)
        vals = []
        for e in range(low, order + 1):
            acc = self.backend.zero
            for a in range(self.valuation, e - other.valuation + 1):
                if a > self.order: break
                acc = acc + self.coeff(a) * other.coeff(e - a)
            vals.append(acc)
        return LaurentSeries(self.center, low, tuple(vals), order, self.backend)

    def derivative(self) -> LaurentSeries:
        vals = [e * self.coeff(e) for e in range(self.valuation, self.order + 1)]
        return LaurentSeries(self.center, self.valuation - 1, tuple(vals), self.order - 1, self.backend)

    def times_power(self, k: int) -> LaurentSeries:
        '''Multiply by (x - center)^k'''
        return LaurentSeries(self.center, self.valuation + k, self.coeffs, self.order + k, self.backend)

    def inverse(self) -> LaurentSeries:
        nz = [i for i, c in enumerate(self.coeffs) if c != 0]
        assert_(len(nz) > 0, 'cannot invert a series with no known nonzero coefficient')
        lead = nz[0]
        a = self.coeffs[lead:]
        v = self.valuation + lead
        b = _series_divide([self.backend.one], a, len(a), self.backend)
        return LaurentSeries(self.center, -v, tuple(b), self.order - 2 * v, self.backend)

    def principal_part(self) -> dict[int, Scalar]:
        return {e: c for e, c in self.as_dict().items() if e < 0}

    def truncate(self, order: int) -> LaurentSeries:
        order = min(order, self.order)
        n = max(order - self.valuation + 1, 0)
        return LaurentSeries(self.center, self.valuation, self.coeffs[:n], order, self.backend)


def residue(series: LaurentSeries) -> Scalar:
    '''
    Coefficient of (x - center)^(-1)

    >>> b = RationalBackend()
    >>> residue(local_expand(PoleBasis({(0, 2): b.one}, (b.zero,)), b.zero, 0, b))
    Fraction(0, 1)
    '''
    if series.valuation > -1: return series.backend.zero
    return series.coeff(-1)


def local_expand(f: RatFun | PoleBasis, center: Scalar, order: int, backend: Backend, cap: int | None = None) -> LaurentSeries:
    '''
    Laurent expansion of f at center, principal part plus Taylor part up to (x - center)^order.

    Args:
        f: a RatFun or a PoleBasis function
        center: the expansion point
        order: highest exponent kept, >= 0
        backend: scalar backend
        cap: maximum admissible pole order at center (default from DEFAULTS['pole_order_cap'])

    >>> b = RationalBackend()
    >>> xj = b.convert(3)
    >>> local_expand(RatFun.pole(xj, 2, 1, b), b.zero, 2, b).as_dict()
    {0: Fraction(1, 9), 1: Fraction(2, 27), 2: Fraction(1, 27)}
    '''
    assert_(order >= 0, f'expansion order must be >= 0, got {order}')
    if cap is None: cap = DEFAULTS['pole_order_cap']
    center = backend.convert(center)
    if isinstance(f, PoleBasis): return _expand_pole_basis(f, center, order, backend, cap)
    den = poly_shift(f.den, center)
    num = poly_shift(f.num, center)
    scale = max([backend.abs(c) for c in den] + [1.])
    q = 0
    while q < len(den) - 1 and backend.is_negligible(den[q], scale): q += 1
    if q > cap:
        raise PoleOrderOverflow(f'pole of order {q} exceeds cap {cap}', module='numfield', operation='local_expand', params={'center': center})
    vals = _series_divide(num, den[q:], order + q + 1, backend) if num else [backend.zero] * (order + q + 1)
    return LaurentSeries(center, -q, tuple(vals), order, backend)


def _expand_pole_basis(f: PoleBasis, center: Scalar, order: int, backend: Backend, cap: int) -> LaurentSeries:
    principal: dict[int, Scalar] = {}
    taylor = [backend.zero] * (order + 1)
    for (j, k), c in sorted(f.terms.items()):
        d = center - f.roots[j]
        if d == 0:
            if k > cap:
                raise PoleOrderOverflow(f'pole of order {k} exceeds cap {cap}', module='numfield', operation='local_expand',
                                        params={'root': j})
            principal[-k] = principal.get(-k, backend.zero) + c
            continue
        inv_d = backend.inv(d)
        p = c * inv_d ** k
        for t in range(order + 1):
            # (-1)^t C(k+t-1, t) d^(-k-t)
            taylor[t] = taylor[t] + p
            p = -p * (k + t) * inv_d / (t + 1)
    low = min(principal) if principal else 0
    vals = [principal.get(e, backend.zero) for e in range(low, 0)] + taylor
    return LaurentSeries(center, low, tuple(vals), order, backend)


@dataclass(frozen=True)
class PotentialTaylor:
    '''Taylor data of V and V' at a point'''
    v: LaurentSeries
    vprime: LaurentSeries


def potential_taylor(V: Potential, center: Scalar, order: int, backend: Backend, with_constant: bool = True) -> PotentialTaylor:
    '''
    Taylor coefficients of V (antiderivative of V', with S_p ln(x - alpha_p) for each simple pole) and of V' at center.

    Args:
        with_constant: if False the constant term V(center) is set to 0, which keeps the rational backend usable
          for potentials with poles (only derivatives of V of order >= 1 are then meaningful)

    >>> from pynctr.bethe import Potential
    >>> b = RationalBackend()
    >>> pt = potential_taylor(Potential.create([0, 1], [], b), 0, 3, b)
    >>> pt.v.as_dict(), pt.vprime.as_dict()
    ({2: Fraction(1, 2)}, {1: Fraction(1, 1)})
    '''
    center = backend.convert(center)
    vp = [backend.zero] * (order + 1)
    for k, c in enumerate(poly_shift(V.poly, center)[:order + 1]): vp[k] = c
    log_terms = []
    for alpha, s in V.poles:
        d = center - alpha
        if d == 0: raise EvaluationAtPole('potential expanded at one of its poles', module='numfield', operation='potential_taylor')
        inv_d = backend.inv(d)
        p = s * inv_d
        for l_ in range(order + 1):
            vp[l_] = vp[l_] + p
            p = -p * inv_d
        if s != 0: log_terms.append((s, d))
    const = backend.zero
    if with_constant:
        const = poly_eval([backend.zero] + [c / (k + 1) for k, c in enumerate(V.poly)], center, backend.zero)
        if log_terms and backend.exact:
            raise LogUnavailable('V(x) has log terms, use a float backend', module='numfield', operation='potential_taylor')
        for s, d in log_terms: const = const + s * backend.log(d)
    v = [const] + [vp[l_ - 1] / l_ for l_ in range(1, order + 1)]
    return PotentialTaylor(LaurentSeries(center, 0, tuple(v), order, backend), LaurentSeries(center, 0, tuple(vp), order, backend))


def contour_residue(f: RatFun, center: Any, radius: float = 1e-2, points: int = 64, bits: int = 200) -> complex:
    '''
    Residue of f at center by trapezoid quadrature of f(z) dz / (2 pi i) on a circle, in mpmath at `bits` precision.
    Independent of local_expand, used to cross check it.
    '''
    backend = BigFloatBackend(bits)
    ctx = backend.ctx
    g = f.with_backend(backend)
    c = backend.convert(center)
    acc = ctx.mpc(0)
    for t in range(points):
        w = ctx.expjpi(ctx.mpf(2 * t) / points) * radius
        z = c + w
        acc += poly_eval(g.num, z, ctx.mpf(0)) / poly_eval(g.den, z, ctx.mpf(0)) * w
    return complex(acc / points)


def test_local_expand_examples() -> None:
    b = RationalBackend()
    s = local_expand(PoleBasis({(0, 1): b.one}, (b.zero,)), b.zero, 2, b)
    assert_(s.as_dict() == {-1: 1})
    xj, si = b.convert(5), b.convert(2)
    s = local_expand(RatFun.pole(xj, 2, 1, b), si, 2, b)
    d = xj - si
    assert_(s.as_dict() == {0: 1 / d ** 2, 1: 2 / d ** 3, 2: 3 / d ** 4})
    x = RatFun.x(b)
    vp = x - RatFun.const(1, b) / x
    s = local_expand(vp, b.one, 1, b)
    assert_(s.coeff(0) == 0 and s.coeff(1) == 2)
    # ring homomorphism up to truncation
    f = RatFun.create([1, 2, 0, 1], [3, 0, 1], b) / RatFun.pole(b.convert(2), 2, 1, b)
    g = RatFun.create([-1, 1], [1, 1, 1], b)
    for c in [b.convert(2), b.convert('1/3')]:
        lhs = local_expand(f * g, c, 4, b)
        rhs = local_expand(f, c, 6, b) * local_expand(g, c, 6, b)
        for e in range(lhs.valuation, 5): assert_(lhs.coeff(e) == rhs.coeff(e), f'{c} {e}')


def test_residues_sum_to_zero() -> None:
    b = RationalBackend()
    poles = [b.convert(0), b.convert(1), b.convert('-1/2')]
    f = RatFun.create([3, -1, 2], [1], b)
    for i, p in enumerate(poles): f = f * RatFun.pole(p, i + 1, 1, b)
    total = sum((residue(local_expand(f, p, 0, b)) for p in poles), b.zero)
    assert_(total == 0, f'sum of residues: {total}')


def test_residue_against_contour() -> None:
    b = RationalBackend()
    rng = np.random.default_rng(7)
    for _ in range(3):
        num = [b.convert(int(v)) for v in rng.integers(-5, 6, size=4)]
        c = b.convert(Fraction(int(rng.integers(-9, 10)), 4))
        other = c + 1
        f = RatFun.create(num, [1], b) * RatFun.pole(c, 3, 1, b) * RatFun.pole(other, 1, 2, b)
        exact = residue(local_expand(f, c, 0, b))
        approx = contour_residue(f, c, radius=0.25, points=128)
        assert_(abs(approx - float(exact)) <= 1e-10 * max(1., abs(float(exact))), f'{approx} {exact}')


def test_potential_taylor() -> None:
    from pynctr.bethe import Potential
    b = RationalBackend()
    V = Potential.create([0, 1], [(3, 2)], b)
    pt = potential_taylor(V, 1, 1, b, with_constant=False)
    assert_(pt.vprime.coeff(0) == 0 and pt.vprime.coeff(1) == Fraction(1, 2))
    try:
        potential_taylor(V, 1, 1, b)
        raise AssertionError('log constant on the rational backend')
    except LogUnavailable:
        pass
    d = DoubleBackend()
    gaudin = Potential.gaudin_one_point(1, d)
    pt = potential_taylor(gaudin, 1., 1, d)
    assert_(d.isclose(pt.v.coeff(0), 0.5) and d.isclose(pt.vprime.coeff(0), 0.))


def test_backends_agree() -> None:
    m = [[6, -2], [-2, 6]]
    for backend in [RationalBackend(), DoubleBackend(), BigFloatBackend(128)]:
        mat = [[backend.convert(x) for x in row] for row in m]
        inv = backend.inverse(mat)
        assert_(backend.isclose(inv[0][0], backend.convert('3/16')) and backend.isclose(inv[0][1], backend.convert('1/16')))
        assert_(backend.isclose(backend.det(mat), backend.convert(32)))
        sol = backend.solve(mat, [backend.convert(4), backend.convert(4)])
        assert_(backend.isclose(sol[0], backend.convert(1)))
    try:
        RationalBackend().inverse([[Fraction(1), Fraction(2)], [Fraction(2), Fraction(4)]])
        raise AssertionError('singular matrix inverted')
    except SingularHessian:
        pass


def test_laurent_inverse() -> None:
    b = RationalBackend()
    s = LaurentSeries.from_dict(0, {-2: 2, -1: 1, 0: 3}, 3, b)
    prod = s * s.inverse()
    assert_(prod.coeff(0) == 1 and all(prod.coeff(e) == 0 for e in range(1, prod.order + 1)))


def test_poly_arithmetic() -> None:
    b = RationalBackend()
    h = Fraction(1, 3)
    p = poly_mul([h, 1], [-h, 1])
    assert_(p == [Fraction(-1, 9), 0, 1], f'{p}')
    assert_(poly_add(p, [Fraction(1, 9), 0, -1]) == [])
    assert_(poly_eval(p, Fraction(2, 3), b.zero) == Fraction(1, 3))
    assert_(poly_deriv(p) == [0, 2])
    assert_(poly_shift([Fraction(1, 2), 0, 0, 1], h) == [Fraction(1, 2) + h ** 3, 3 * h ** 2, 3 * h, 1])
    assert_(_series_divide([1], [1, -1], 4, b) == [1, 1, 1, 1])
    # numerator vanishing at the center, x / (1 - 2x)
    assert_(_series_divide([0, 1], [1, -2], 5, b) == [0, 1, 2, 4, 8])
    assert_(_series_divide([], [2, 1], 3, b) == [0, 0, 0])
    bf = BigFloatBackend(120)
    third = bf.convert(h)
    vals = _series_divide([bf.one], [bf.one, -third], 6, bf)
    assert_(all(bf.isclose(v, third ** k, rel_tol=1e-30) for k, v in enumerate(vals)), f'{vals}')


if __name__ == "__main__":
    test_local_expand_examples()
    test_residues_sum_to_zero()
    test_residue_against_contour()
    test_potential_taylor()
    test_backends_agree()
    test_laurent_inverse()
    test_poly_arithmetic()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
