from __future__ import annotations
import os
import re
import sys
import json
import logging
import argparse
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any
from collections.abc import Sequence, Mapping
import yaml
from pynctr.nc_utils import assert_, get_child_logger, get_temp_dir, set_log_level, NCException, ConfigError
from pynctr.numfield import Backend, get_backend
from pynctr.bethe import Potential, BetheSystem, solve_bethe
from pynctr.correlators import RecursionContext, compute_w
from pynctr.energies import energy_record
from pynctr.verify import CHECK_NAMES, FAIL, INCONCLUSIVE, run_checks
from pynctr.nc_io import scalar_to_json, tensor_to_json, write_document, write_csv, load_document

_logger = get_child_logger(__name__)

COMMANDS = ['run', 'solve', 'correlators', 'free-energy', 'verify', 'oracle']

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


@dataclass(kw_only=True)
class RunConfig:
    '''
    A parsed run configuration.  Numbers that must stay exact (potential coefficients, hbar, seeds) are kept
    as the strings or ints given in the file and converted in the chosen backend at run time.

    Args:
        potential: {"poly": [t_0, ...], "poles": [[alpha, S], ...]}, or {"taylor": {"2": v_2, ...}, "center": c},
            or {"gaudin_one_point": s}
        m: number of Bethe roots
        hbar: deformation parameter
        backend: rational, double or bigfloat
        bits: bigfloat precision
        newton: {"seeds": [...], "max_iter": int, "tol": float}
        targets: (g, n) pairs to compute
        energies: genera of free energies to compute
        verify: check names, or "all"
        seed: rng seed for probe points and random kernel choices
        threads: worker threads for contractions and checks
        processes: worker processes for hbar profile samples
        out: output path, stdout when omitted
        format: json or csv
        golden: path of a result document to compare with
        oracle: keyword arguments for the partition function oracle (Ns, beta, n_ref, genera)
        inject_corruption: {"g", "n", "delta"} shifts one coefficient of W_n^(g), or F^(g) for n = 0
        record_runtime: include check runtimes in the output, which makes it non reproducible
    '''
    potential: dict[str, Any]
    m: int
    hbar: Any
    backend: str = 'rational'
    bits: int | None = None
    newton: dict[str, Any] = field(default_factory=dict)
    targets: list[tuple[int, int]] = field(default_factory=list)
    energies: list[int] = field(default_factory=list)
    verify: list[str] | str = field(default_factory=list)
    seed: int = 0
    threads: int = 1
    processes: int = 1
    out: str | None = None
    format: str = 'json'
    golden: str | None = None
    oracle: dict[str, Any] = field(default_factory=dict)
    inject_corruption: dict[str, Any] | None = None
    record_runtime: bool = False

    def echo(self) -> dict[str, Any]:
        '''The config as plain JSON data, with exact numbers as strings'''
        out = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        out['targets'] = [list(t) for t in self.targets]
        return json.loads(json.dumps(out, default=str))

    def make_backend(self) -> Backend:
        return get_backend(self.backend, self.bits)


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_REQUIRED = {'potential', 'm', 'hbar'}
_POTENTIAL_KEYS = {'poly', 'poles', 'taylor', 'center', 'gaudin_one_point'}
_NEWTON_KEYS = {'seeds', 'max_iter', 'tol'}
_ORACLE_KEYS = {'Ns', 'beta', 'n_ref', 'genera', 'bits'}
_CORRUPTION_KEYS = {'g', 'n', 'delta'}


def _key_line(text: str, key: str) -> int | None:
    '''1 based line of the first occurrence of key as a mapping key, if it can be found'''
    pattern = re.compile(r'''(^|[{,\s])["']?''' + re.escape(key) + r'''["']?\s*:''')
    for i, line in enumerate(text.splitlines()):
        if pattern.search(line): return i + 1
    return None


def _check_keys(obj: Any, allowed: set[str], where: str, text: str) -> None:
    if not isinstance(obj, dict): raise ConfigError(f'{where} must be a mapping', field=where, line=_key_line(text, where))
    for key in obj:
        if str(key) not in allowed:
            raise ConfigError(f'unknown key {key!r} in {where}', field=str(key), line=_key_line(text, str(key)))


def _check_number(value: Any, name: str, text: str) -> None:
    '''Exact numbers are ints, "p/q" strings or decimal strings; floats are accepted as decimals'''
    try:
        if isinstance(value, bool): raise ValueError()
        Fraction(str(value))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f'{name} is not a number: {value!r}', field=name, line=_key_line(text, name.split('.')[0])) from e


def _expect(cond: bool, msg: str, name: str, text: str) -> None:
    if not cond: raise ConfigError(msg, field=name, line=_key_line(text, name.split('.')[-1]))


def parse_config(text: str) -> RunConfig:
    '''
    Parses a JSON (or YAML) run configuration, rejecting unknown keys, missing keys and malformed values

    >>> cfg = parse_config('{"potential": {"gaudin_one_point": 1}, "m": 1, "hbar": "1/10", "targets": [[0, 3]]}')
    >>> cfg.targets, cfg.backend
    ([(0, 3)], 'rational')
    '''
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        line = e.problem_mark.line + 1 if hasattr(e, 'problem_mark') and e.problem_mark is not None else None  # type: ignore
        raise ConfigError(f'cannot parse config: {e}', line=line) from e
    if not isinstance(raw, dict): raise ConfigError('config must be a mapping')
    _check_keys(raw, _TOP_KEYS, 'config', text)
    for key in sorted(_REQUIRED - set(raw)): raise ConfigError(f'missing required key {key!r}', field=key)

    pot = raw['potential']
    _check_keys(pot, _POTENTIAL_KEYS, 'potential', text)
    _expect(len({'poly', 'taylor', 'gaudin_one_point'} & set(pot)) == 1 or (set(pot) == {'poles'}),
            'potential needs exactly one of poly, taylor, gaudin_one_point', 'potential', text)
    for i, c in enumerate(pot.get('poly', [])): _check_number(c, f'poly[{i}]', text)
    for i, pole in enumerate(pot.get('poles', [])):
        _expect(isinstance(pole, list) and len(pole) == 2, f'pole {i} must be [alpha, S]', 'poles', text)
        for c in pole: _check_number(c, 'poles', text)
    for k, v in pot.get('taylor', {}).items():
        _expect(str(k).isdigit() and int(k) >= 2, f'taylor key {k} must be an integer >= 2', 'taylor', text)
        _check_number(v, 'taylor', text)
    if 'gaudin_one_point' in pot: _check_number(pot['gaudin_one_point'], 'gaudin_one_point', text)

    _expect(isinstance(raw['m'], int) and not isinstance(raw['m'], bool) and raw['m'] >= 1, 'm must be a positive integer', 'm', text)
    _check_number(raw['hbar'], 'hbar', text)
    _expect(Fraction(str(raw['hbar'])) != 0, 'hbar must be nonzero', 'hbar', text)
    backend = raw.get('backend', 'rational')
    _expect(backend in ('rational', 'double', 'bigfloat'), f'unknown backend {backend!r}', 'backend', text)
    newton = raw.get('newton', {})
    _check_keys(newton, _NEWTON_KEYS, 'newton', text)
    for s in newton.get('seeds', []): _check_number(s, 'seeds', text)
    targets = raw.get('targets', [])
    _expect(isinstance(targets, list) and all(isinstance(t, list) and len(t) == 2 and all(isinstance(x, int) for x in t)
                                              for t in targets), 'targets must be a list of [g, n] pairs', 'targets', text)
    energies = raw.get('energies', [])
    _expect(isinstance(energies, list) and all(isinstance(g, int) and g >= 0 for g in energies), 'energies must be genera >= 0',
            'energies', text)
    verify = raw.get('verify', [])
    if isinstance(verify, str): _expect(verify == 'all', f'verify must be a list of checks or "all", got {verify!r}', 'verify', text)
    else:
        unknown = [v for v in verify if v not in CHECK_NAMES]
        _expect(not unknown, f'unknown checks {unknown}', 'verify', text)
    _expect(raw.get('format', 'json') in ('json', 'csv'), 'format must be json or csv', 'format', text)
    if 'oracle' in raw: _check_keys(raw['oracle'], _ORACLE_KEYS, 'oracle', text)
    if raw.get('inject_corruption') is not None:
        inj = raw['inject_corruption']
        _check_keys(inj, _CORRUPTION_KEYS, 'inject_corruption', text)
        _expect(set(inj) == _CORRUPTION_KEYS, 'inject_corruption needs g, n and delta', 'inject_corruption', text)
        _check_number(inj['delta'], 'delta', text)
    for key in ('seed', 'threads', 'processes'):
        if key in raw: _expect(isinstance(raw[key], int) and raw[key] >= 0, f'{key} must be a non negative integer', key, text)

    kwargs = dict(raw)
    kwargs['targets'] = [(int(g), int(n)) for g, n in targets]
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_config(f.read())


def build_potential(cfg: RunConfig, b: Backend) -> Potential:
    pot = cfg.potential
    if 'gaudin_one_point' in pot: return Potential.gaudin_one_point(str(pot['gaudin_one_point']), b)
    if 'taylor' in pot:
        return Potential.from_taylor({int(k): str(v) for k, v in pot['taylor'].items()}, b, str(pot.get('center', 0)))
    return Potential.create([str(c) for c in pot.get('poly', [])], [(str(a), str(s)) for a, s in pot.get('poles', [])], b)


def solve(cfg: RunConfig, b: Backend) -> BetheSystem:
    V = build_potential(cfg, b)
    newton = cfg.newton
    seeds = [str(s) for s in newton.get('seeds', [])]
    assert_(len(seeds) == cfg.m, f'newton.seeds must hold m = {cfg.m} seeds, got {len(seeds)}')
    return solve_bethe(V, cfg.m, str(cfg.hbar), seeds, max_iter=newton.get('max_iter'), tol=newton.get('tol'))


def _stages(command: str) -> set[str]:
    return {'run': {'targets', 'energies', 'verify'},
            'solve': set(),
            'correlators': {'targets'},
            'free-energy': {'energies'},
            'verify': {'verify'},
            'oracle': {'oracle'}}[command]


def build_document(cfg: RunConfig, command: str = 'run') -> dict[str, Any]:
    '''
    Runs the stages of `command` and returns the result document.  Raises NCException on computational errors
    '''
    assert_(command in COMMANDS, f'unknown command {command}')
    stages = _stages(command)
    b = cfg.make_backend()
    sys_ = solve(cfg, b)
    ctx = RecursionContext(sys_, threads=cfg.threads)
    if cfg.inject_corruption is not None:
        inj = cfg.inject_corruption
        ctx = ctx.with_corruption(int(inj['g']), int(inj['n']), str(inj['delta']))
    doc: dict[str, Any] = {'config_echo': cfg.echo(),
                           'roots': [scalar_to_json(s, b) for s in sys_.roots],
                           'A': [[scalar_to_json(v, b) for v in row] for row in sys_.A],
                           'tensors': [],
                           'energies': [],
                           'checks': []}
    if 'targets' in stages:
        doc['tensors'] = [tensor_to_json(compute_w(ctx, g, n)) for g, n in cfg.targets]
    if 'energies' in stages:
        doc['energies'] = [energy_record(ctx, g, **({'processes': cfg.processes} if g >= 2 else {})) for g in cfg.energies]
    names: list[str] | str | None = None
    if 'verify' in stages: names = cfg.verify
    if 'oracle' in stages: names = ['oracle']
    if names:
        golden = load_document(cfg.golden, b) if cfg.golden is not None else None
        if isinstance(names, list) and 'golden' in names: assert_(golden is not None, 'golden check needs a golden document path')
        reports = run_checks(ctx, names, targets=cfg.targets or [(0, 3), (1, 1)], energies=cfg.energies, threads=cfg.threads,
                             seed=cfg.seed, golden=golden, oracle_args=cfg.oracle)
        doc['checks'] = [r.to_dict(include_runtime=cfg.record_runtime) for r in reports]
    return doc


def _write(doc: Mapping[str, Any], cfg: RunConfig) -> None:
    if cfg.out is None:
        sys.stdout.write(json.dumps(doc, sort_keys=True, indent=1) + '\n')
    elif cfg.format == 'csv':
        write_csv(doc, cfg.out[:-5] if cfg.out.endswith('.json') else cfg.out)
    else:
        write_document(doc, cfg.out)


def run(cfg: RunConfig, command: str = 'run') -> int:
    '''
    Runs a configuration and writes its document.  Returns 0 on success, 2 if any check failed and 1 on a
    computational error or an unusable output setting, in which case the diagnostic is logged and written to stderr
    '''
    try:
        if cfg.format == 'csv' and cfg.out is None:
            raise ConfigError('csv output needs an output path, pass --out', field='format')
        doc = build_document(cfg, command)
    except NCException as e:
        diag = e.diagnostic()
        _logger.error(f'{command} failed: {e}')
        sys.stderr.write(json.dumps(diag, sort_keys=True) + '\n')
        return EXIT_ERROR
    _write(doc, cfg)
    statuses = [c['status'] for c in doc['checks']]
    if INCONCLUSIVE in statuses: _logger.warning(f'{statuses.count(INCONCLUSIVE)} checks inconclusive')
    if FAIL in statuses:
        failed = [c['name'] for c in doc['checks'] if c['status'] == FAIL]
        _logger.warning(f'failed checks: {failed}')
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _backend_flag(value: str) -> tuple[str, int | None]:
    '''
    >>> _backend_flag('bigfloat:200')
    ('bigfloat', 200)
    '''
    name, _, bits = value.partition(':')
    if name not in ('rational', 'double', 'bigfloat'): raise argparse.ArgumentTypeError(f'unknown backend {value}')
    return name, int(bits) if bits else None


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pynctr', description='Deformed topological recursion at Bethe roots')
    sub = parser.add_subparsers(dest='command', required=True)
    helps = {'run': 'solve, compute targets and energies, run checks',
             'solve': 'Bethe roots and the inverse Hessian only',
             'correlators': 'compute the target correlators',
             'free-energy': 'compute the requested free energies',
             'verify': 'run the configured checks',
             'oracle': 'compare free energies with the exact one root partition function'}
    for command in COMMANDS:
        p = sub.add_parser(command, help=helps[command])
        p.add_argument('--config', required=True, help='JSON or YAML run configuration')
        p.add_argument('--backend', type=_backend_flag, help='rational, double or bigfloat[:bits]')
        p.add_argument('--threads', type=int)
        p.add_argument('--seed', type=int)
        p.add_argument('--out')
        p.add_argument('--format', choices=['json', 'csv'])
        verbosity = p.add_mutually_exclusive_group()
        verbosity.add_argument('--verbose', action='store_true', help='debug logging')
        verbosity.add_argument('--quiet', action='store_true', help='warnings only')
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    if args.verbose: set_log_level(logging.DEBUG)
    if args.quiet: set_log_level(logging.WARNING)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        _logger.error(f'bad config {args.config}: {e}')
        if isinstance(e, ConfigError): sys.stderr.write(json.dumps(e.diagnostic(), sort_keys=True) + '\n')
        return EXIT_ERROR
    overrides: dict[str, Any] = {}
    if args.backend is not None: overrides['backend'], overrides['bits'] = args.backend
    for key in ('threads', 'seed', 'out', 'format'):
        if getattr(args, key) is not None: overrides[key] = getattr(args, key)
    cfg = dataclasses.replace(cfg, **overrides)
    return run(cfg, args.command)


def _temp_path(name: str) -> str:
    return os.path.join(get_temp_dir(), f'pynctr_cli_{os.getpid()}_{name}')


def _gaudin_text(**extra: Any) -> str:
    cfg = {'potential': {'gaudin_one_point': 1}, 'm': 1, 'hbar': '1/10', 'newton': {'seeds': ['0.9']}, 'targets': [[0, 3], [1, 1]]}
    cfg.update(extra)
    return json.dumps(cfg, indent=1)


def test_parse_errors() -> None:
    text = '{\n "potential": {"gaudin_one_point": 1},\n "m": 1,\n "hbar": "1/10",\n "colour": "red"\n}'
    try:
        parse_config(text)
        raise AssertionError('unknown key accepted')
    except ConfigError as e:
        assert_(e.field == 'colour' and e.line == 5, f'{e.field} {e.line}')
    for bad in [_gaudin_text(hbar='one tenth'), _gaudin_text(backend='quad'), _gaudin_text(verify=['no_such_check']),
                _gaudin_text(newton={'seeds': ['0.9'], 'damping': 2}), '{"m": 1, "hbar": 1}']:
        try:
            parse_config(bad)
            raise AssertionError(f'accepted {bad}')
        except ConfigError:
            pass


def test_run_gaudin() -> None:
    from pynctr.numfield import RationalBackend
    out = _temp_path('gaudin.json')
    cfg = dataclasses.replace(parse_config(_gaudin_text(energies=[0, 1])), out=out)
    assert_(run(cfg, 'correlators') == EXIT_OK)
    doc = load_document(out)
    b = RationalBackend()
    assert_(doc['roots'] == [b.one] and isinstance(doc['backend'], RationalBackend))
    w3, w11 = doc['tensors']
    assert_(w3.coeff(((0, 2), (0, 2), (0, 2))) == Fraction(1, 40))
    assert_(dict(w11.terms) == {((0, 1),): Fraction(10), ((0, 2),): Fraction(1, 4), ((0, 3),): Fraction(1, 2)})
    assert_(run(cfg, 'free-energy') == EXIT_OK)
    with open(out) as f: energies = json.load(f)['energies']
    assert_(energies[0]['value'] == '-1/20' and energies[1]['value'] is None)


def test_exit_codes() -> None:
    # coincident seeds
    quartic = {'potential': {'poly': [0, -1, 0, 1]}, 'm': 2, 'hbar': '1/20', 'backend': 'double', 'newton': {'seeds': ['0.5', '0.5']}}
    assert_(run(parse_config(json.dumps(quartic)), 'solve') == EXIT_ERROR)
    golden = _temp_path('golden.json')
    cfg = dataclasses.replace(parse_config(_gaudin_text(verify=['golden', 'symmetry'])), out=golden)
    assert_(run(cfg, 'correlators') == EXIT_OK)
    cfg = dataclasses.replace(cfg, golden=golden, out=_temp_path('verify.json'))
    assert_(run(cfg, 'verify') == EXIT_OK)
    with open(golden) as f: doc = json.load(f)
    doc['tensors'][0]['terms'][0]['val'] = '1/41'
    write_document(doc, golden)
    assert_(run(cfg, 'verify') == EXIT_CHECK_FAILED)


def test_determinism() -> None:
    path = _temp_path('config.json')
    with open(path, 'w') as f:
        f.write(_gaudin_text(verify=['symmetry', 'loop_equation', 'resy', 'w30_forms'], seed=11))
    outs = [_temp_path(f'det{i}.json') for i in range(2)]
    for out in outs: assert_(main(['run', '--config', path, '--out', out, '--quiet']) == EXIT_OK)
    with open(outs[0], 'rb') as f0, open(outs[1], 'rb') as f1: assert_(f0.read() == f1.read())
    assert_(main(['verify', '--config', path, '--out', outs[0], '--format', 'csv', '--quiet']) == EXIT_OK)
    assert_(main(['verify', '--config', path, '--format', 'csv', '--quiet']) == EXIT_ERROR)


if __name__ == "__main__":
    test_parse_errors()
    test_run_gaudin()
    test_exit_codes()
    test_determinism()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
