from __future__ import annotations
import os
import sys
import json
import tempfile
import pathlib
import logging
from typing import Any


DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
LOG_FORMAT = '[%(asctime)s.%(msecs)03d %(funcName)s] %(message)s'

# Built in defaults, overridable through pynctr.yml, see get_config
_BUILTIN_DEFAULTS: dict[str, Any] = {
    'pole_order_cap': 64,
    'k_max': 8,
    'float_rel_tol': 1e-12,
    'check_rel_tol': 1e-10,
    'fd_rel_tol': 1e-4,
    'fd_rel_tol_precise': 1e-8,
    'fd_step': 1e-5,
    'bigfloat_bits': 160,
    'num_probes': 3,
    'root_guard': 1e-8,
    'newton_max_iter': 100,
    'damping_halvings': 20,
    'profile_rel_tol': 1e-8,
}

# The defaults every module reads, built in values overlaid with pynctr.yml when the package is imported
DEFAULTS: dict[str, Any] = dict(_BUILTIN_DEFAULTS)


def _add_stream_handler(logger: logging.Logger,
                        log_level: int = logging.INFO,
                        formatter: logging.Formatter | None = None) -> None:
    if formatter is None: formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(formatter)
    stream_handler.setLevel(log_level)
    logger.addHandler(stream_handler)


def get_main_logger() -> logging.Logger:
    main_logger = logging.getLogger('nc')
    if len(main_logger.handlers): return main_logger
    _add_stream_handler(main_logger, log_level=logging.DEBUG)
    main_logger.setLevel(logging.INFO)
    main_logger.propagate = False
    return main_logger


def get_child_logger(child_name: str) -> logging.Logger:
    _ = get_main_logger()  # Init handlers if needed
    full_name = 'nc.' + child_name if child_name else 'nc'
    logger = logging.getLogger(full_name)
    return logger


def set_log_level(level: int) -> None:
    '''Set the level of the package logger, e.g. logging.DEBUG for Newton iteration detail'''
    get_main_logger().setLevel(level)


class NCException(Exception):
    '''
    Base class for all errors raised by this package.  Carries optional structured context
    so the command line front end can report which module and operation failed, and with what inputs.

    >>> e = NCException('bad input', module='bethe', operation='solve_bethe', params={'m': 2})
    >>> print(e)
    bad input [bethe.solve_bethe m=2]
    >>> e.diagnostic()['error']
    'NCException'
    '''
    def __init__(self, msg: str = '', module: str | None = None, operation: str | None = None, params: dict[str, Any] | None = None) -> None:
        super().__init__(msg)
        self.msg = msg
        self.module = module
        self.operation = operation
        self.params = params if params is not None else {}

    def __str__(self) -> str:
        if self.module is None and self.operation is None and not self.params: return self.msg
        where = '.'.join(x for x in [self.module, self.operation] if x)
        params = ' '.join(f'{k}={v}' for k, v in self.params.items())
        ctx = ' '.join(x for x in [where, params] if x)
        return f'{self.msg} [{ctx}]'

    def diagnostic(self) -> dict[str, Any]:
        return {'error': type(self).__name__,
                'message': self.msg,
                'module': self.module,
                'operation': self.operation,
                'params': {k: str(v) for k, v in self.params.items()}}


class PoleOrderOverflow(NCException):
    pass


class EvaluationAtPole(NCException):
    pass


class LogUnavailable(NCException):
    pass


class NoConvergence(NCException):
    pass


class ExactRootsUnavailable(NoConvergence):
    pass


class RootCollision(NCException):
    pass


class RootAtPotentialPole(NCException):
    pass


class SingularHessian(NCException):
    pass


class BetheConsistencyViolation(NCException):
    pass


class SymmetryViolation(NCException):
    pass


class CapExceeded(NCException):
    pass


class NotLaurentPolynomial(NCException):
    pass


class ConfigError(NCException):
    def __init__(self, msg: str = '', field: str | None = None, line: int | None = None) -> None:
        params: dict[str, Any] = {}
        if field is not None: params['field'] = field
        if line is not None: params['line'] = line
        super().__init__(msg, module='cli', operation='parse_config', params=params)
        self.field = field
        self.line = line


def assert_(condition: bool, msg: str | None = None) -> None:
    '''
    Like a python assert but raises an exception that is not turned off by
    using the python optimization switch
    '''
    if msg is None: msg = ''
    if not condition: raise NCException(msg)


def get_temp_dir() -> str:
    if os.access('/tmp', os.W_OK):
        return '/tmp'
    else:
        return tempfile.gettempdir()


def get_config(search_dirs: list[pathlib.Path] | None = None) -> dict[str, Any]:
    '''
    Returns the package defaults, overridden by values from a file called pynctr.yml in your home directory
    and then by a file called pynctr.yml in your local working directory, when these exist.

    Args:
        search_dirs: directories to look in, in increasing order of priority.  Default is home dir then cwd

    >>> config = get_config(search_dirs=[])
    >>> config['pole_order_cap']
    64
    '''
    import yaml
    if search_dirs is None: search_dirs = [pathlib.Path.home(), pathlib.Path.cwd()]
    config_data = dict(_BUILTIN_DEFAULTS)
    for dir_ in search_dirs:
        config_file = dir_ / 'pynctr.yml'
        if not config_file.is_file(): continue
        with open(config_file, 'r') as f:
            overrides = yaml.safe_load(f)
        if overrides is None: continue
        assert_(isinstance(overrides, dict), f'{config_file} must contain a mapping')
        unknown = set(overrides) - set(_BUILTIN_DEFAULTS)
        if unknown: raise ConfigError(f'unknown keys in {config_file}: {sorted(unknown)}', field=sorted(unknown)[0])
        config_data.update(overrides)
    return config_data


def apply_config(search_dirs: list[pathlib.Path] | None = None) -> dict[str, Any]:
    '''
    Replaces the contents of DEFAULTS with get_config(search_dirs), in place so every module sees the change.
    Called once at import with the home and working directories
    '''
    config = get_config(search_dirs)
    DEFAULTS.clear()
    DEFAULTS.update(config)
    return DEFAULTS


apply_config()


def test_config_override() -> None:
    temp_dir = pathlib.Path(tempfile.mkdtemp(dir=get_temp_dir()))
    with open(temp_dir / 'pynctr.yml', 'w') as f:
        f.write('pole_order_cap: 12\nnum_probes: 5\n')
    config = get_config(search_dirs=[temp_dir])
    assert_(config['pole_order_cap'] == 12 and config['num_probes'] == 5 and config['k_max'] == 8)
    with open(temp_dir / 'pynctr.yml', 'w') as f:
        f.write('no_such_setting: 1\n')
    try:
        get_config(search_dirs=[temp_dir])
        raise AssertionError('unknown key accepted')
    except ConfigError as e:
        assert_(e.field == 'no_such_setting')


def test_exception_context() -> None:
    e = RootCollision('roots too close', module='bethe', operation='solve_bethe', params={'distance': 1e-12})
    diag = e.diagnostic()
    assert_(diag['error'] == 'RootCollision' and diag['params']['distance'] == '1e-12')
    assert_(isinstance(e, NCException))
    json.dumps(diag)
    logger = get_child_logger('test')
    assert_(logger.name == 'nc.test' and len(get_main_logger().handlers) == 1)


if __name__ == "__main__":
    test_config_override()
    test_exception_context()
    import doctest
    doctest.testmod(optionflags=doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS)
