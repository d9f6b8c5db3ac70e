from __future__ import annotations
import os
import json
import math
import pandas as pd
from fractions import Fraction
from typing import Any
from collections.abc import Sequence, Mapping
from pynctr.nc_utils import assert_, get_child_logger, get_temp_dir, NCException
from pynctr.numfield import Backend, Scalar, get_backend
from pynctr.correlators import WTensor

_logger = get_child_logger(__name__)


def _double_to_json(x: float) -> dict[str, str]:
    return {'dec': repr(x), 'hex': float.hex(x)}


def _bigfloat_digits(backend: Backend) -> int:
    return int(backend.bits * math.log10(2)) + 2  # type: ignore


def scalar_to_json(x: Scalar, backend: Backend) -> Any:
    '''
    JSON representation of a backend scalar.  Rationals are "num/den" strings, doubles carry both the decimal
    and the hex form so they read back bit for bit, bigfloats are decimal strings at full working precision.

    >>> from pynctr.numfield import RationalBackend, DoubleBackend
    >>> scalar_to_json(Fraction(-3, 4), RationalBackend())
    '-3/4'
    >>> scalar_to_json(0.5, DoubleBackend())
    {'dec': '0.5', 'hex': '0x1.0000000000000p-1'}
    '''
    if backend.exact:
        x = backend.convert(x)
        return f'{x.numerator}/{x.denominator}'
    if backend.name == 'double':
        if isinstance(x, complex): return {'re': _double_to_json(x.real), 'im': _double_to_json(x.imag)}
        return _double_to_json(float(x))
    ctx = backend.ctx  # type: ignore
    n = _bigfloat_digits(backend)
    if isinstance(x, type(ctx.mpc(0))):
        return {'re': ctx.nstr(x.real, n), 'im': ctx.nstr(x.imag, n)}
    return ctx.nstr(backend.convert(x), n)


def scalar_from_json(obj: Any, backend: Backend) -> Scalar:
    '''
    Inverse of scalar_to_json

    >>> from pynctr.numfield import DoubleBackend
    >>> b = DoubleBackend()
    >>> scalar_from_json(scalar_to_json(0.1, b), b) == 0.1
    True
    '''
    if isinstance(obj, dict) and 're' in obj:
        re, im = scalar_from_json(obj['re'], backend), scalar_from_json(obj['im'], backend)
        if backend.name == 'bigfloat': return backend.ctx.mpc(re, im)  # type: ignore
        return complex(re, im)
    if isinstance(obj, dict):
        assert_('hex' in obj or 'dec' in obj, f'cannot parse scalar {obj}')
        return backend.convert(float.fromhex(obj['hex']) if 'hex' in obj else float(obj['dec']))
    if isinstance(obj, (int, str)): return backend.convert(obj)
    raise NCException(f'cannot parse scalar {obj!r}', module='nc_io', operation='scalar_from_json')


def tensor_to_json(W: WTensor) -> dict[str, Any]:
    '''
    >>> from pynctr.numfield import RationalBackend
    >>> b = RationalBackend()
    >>> W = WTensor.create(0, 1, {((0, 1),): Fraction(1, 10)}, [b.one], b)
    >>> tensor_to_json(W)
    {'g': 0, 'n': 1, 'universal_part': False, 'terms': [{'idx': [[0, 1]], 'val': '1/10'}]}
    '''
    return {'g': W.g,
            'n': W.n,
            'universal_part': W.universal_part,
            'terms': [{'idx': [list(jk) for jk in idx], 'val': scalar_to_json(v, W.backend)} for idx, v in W.terms.items()]}


def load_tensor(obj: Mapping[str, Any], roots: Sequence[Scalar], backend: Backend) -> WTensor:
    terms = {tuple((int(j), int(k)) for j, k in t['idx']): scalar_from_json(t['val'], backend) for t in obj['terms']}
    return WTensor.create(int(obj['g']), int(obj['n']), terms, roots, backend, bool(obj.get('universal_part', False)))


def _atomic_write(path: str, text: str) -> None:
    tmp = path + '.tmp'
    with open(tmp, 'w', encoding='utf-8') as f:
        f.write(text)
    os.replace(tmp, path)


def write_document(doc: Mapping[str, Any], path: str) -> None:
    '''Writes a result document as sorted key JSON, so identical runs give identical bytes'''
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1) + '\n')
    _logger.info(f'wrote {path}')


def _flat(obj: Any) -> str:
    return obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True)


def document_tables(doc: Mapping[str, Any]) -> dict[str, pd.DataFrame]:
    '''The sections of a result document as flat tables, one row per root, matrix entry, tensor term, energy or check'''
    tables: dict[str, pd.DataFrame] = {}
    tables['roots'] = pd.DataFrame({'i': range(len(doc.get('roots', []))), 'value': [_flat(x) for x in doc.get('roots', [])]})
    A = doc.get('A', [])
    tables['A'] = pd.DataFrame([{'i': i, 'j': j, 'value': _flat(v)} for i, row in enumerate(A) for j, v in enumerate(row)],
                               columns=['i', 'j', 'value'])
    rows = [{'g': t['g'], 'n': t['n'], 'idx': json.dumps(term['idx']), 'value': _flat(term['val'])}
            for t in doc.get('tensors', []) for term in t['terms']]
    tables['tensors'] = pd.DataFrame(rows, columns=['g', 'n', 'idx', 'value'])
    tables['energies'] = pd.DataFrame([{k: _flat(v) if k != 'g' else v for k, v in e.items()} for e in doc.get('energies', [])])
    tables['checks'] = pd.DataFrame([{k: _flat(v) if isinstance(v, (dict, list)) else v for k, v in c.items()}
                                     for c in doc.get('checks', [])])
    return tables


def write_csv(doc: Mapping[str, Any], out: str) -> list[str]:
    '''
    Writes one CSV per document section to <out>.<section>.csv.  Each file goes to a temporary name first
    and is renamed when complete
    '''
    paths = []
    for section, df in document_tables(doc).items():
        path = f'{out}.{section}.csv'
        df.to_csv(path + '.tmp', index=False)
        os.replace(path + '.tmp', path)
        paths.append(path)
    _logger.info(f'wrote {len(paths)} csv files with prefix {out}')
    return paths


def load_document(path: str, backend: Backend | None = None) -> dict[str, Any]:
    '''
    Reads a result document written by write_document.  Roots, A and tensors are parsed back into backend scalars
    and WTensors; the backend defaults to the one recorded in the config echo.
    '''
    with open(path, 'r', encoding='utf-8') as f:
        raw = json.load(f)
    if backend is None:
        echo = raw.get('config_echo', {})
        backend = get_backend(echo.get('backend', 'rational'), echo.get('bits'))
    doc = dict(raw)
    roots = [scalar_from_json(x, backend) for x in raw.get('roots', [])]
    doc['roots'] = roots
    doc['A'] = [[scalar_from_json(v, backend) for v in row] for row in raw.get('A', [])]
    doc['tensors'] = [load_tensor(t, roots, backend) for t in raw.get('tensors', [])]
    doc['backend'] = backend
    return doc


def test_scalar_round_trip() -> None:
    from pynctr.numfield import RationalBackend, DoubleBackend, BigFloatBackend
    r, d, bf = RationalBackend(), DoubleBackend(), BigFloatBackend(160)
    for x in [Fraction(0), Fraction(-7, 24), Fraction(10**30 + 1, 3)]:
        assert_(scalar_from_json(scalar_to_json(x, r), r) == x)
    for y in [0.1, -1e-300, 1 / 3, complex(0.25, -2.5)]:
        assert_(scalar_from_json(json.loads(json.dumps(scalar_to_json(y, d))), d) == y)
    z = bf.convert('1/7')
    assert_(bf.rel_diff(scalar_from_json(scalar_to_json(z, bf), bf), z) < 1e-45)
    w = bf.ctx.mpc(z, -z)
    back = scalar_from_json(scalar_to_json(w, bf), bf)
    assert_(bf.abs(back - w) < 1e-45)


def test_document_files() -> None:
    from pynctr.numfield import RationalBackend
    from pynctr.bethe import Potential, solve_bethe
    from pynctr.correlators import RecursionContext, compute_w
    b = RationalBackend()
    sys = solve_bethe(Potential.create([0, 1], [], b), 2, '1/4', ['-0.4', '0.4'])
    ctx = RecursionContext(sys)
    tensors = [compute_w(ctx, 0, 2), compute_w(ctx, 0, 3)]
    doc = {'config_echo': {'backend': 'rational'},
           'roots': [scalar_to_json(s, b) for s in sys.roots],
           'A': [[scalar_to_json(v, b) for v in row] for row in sys.A],
           'tensors': [tensor_to_json(W) for W in tensors],
           'energies': [],
           'checks': []}
    path = os.path.join(get_temp_dir(), f'pynctr_io_test_{os.getpid()}.json')
    write_document(doc, path)
    with open(path) as f: first = f.read()
    write_document(doc, path)
    with open(path) as f: assert_(f.read() == first)
    back = load_document(path)
    assert_(back['roots'] == list(sys.roots) and back['A'] == sys.A)
    for W, W2 in zip(tensors, back['tensors']):
        assert_(dict(W.terms) == dict(W2.terms) and W.universal_part == W2.universal_part)
    paths = write_csv(doc, path[:-5])
    df = pd.read_csv(paths[2])
    assert_(len(df) == sum(len(W) for W in tensors))
    for p in paths + [path]: os.remove(p)


if __name__ == "__main__":
    test_scalar_round_trip()
    test_document_files()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
