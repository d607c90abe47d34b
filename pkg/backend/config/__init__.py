"""
Configuration
=============
Layered configuration for the style-transfer toolkit.

Precedence: DEFAULT_CONFIG < JSON config file < command-line overrides
(``--set injection.w=0.3``). Every hyperparameter of the method lives here
so a run can be reproduced from its config hash alone.

Main entry point: load_config()
"""

import copy
import hashlib
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, Optional

from components.errors import ConfigError

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = 'COCODIFF_CACHE'

# ============================================================================
# DEFAULTS
# ============================================================================

DEFAULT_CONFIG: Dict[str, Any] = {
    'backbone': {
        'checkpoint': 'CompVis/stable-diffusion-v1-4',
        'resolution': 512,
        'num_steps': 50,
        'seed': 42,
        'device': 'cuda',
        'dtype': 'float32',
        # candidate sets for the (t*, l*) grid search
        'timesteps': [1, 11, 21, 31, 41],
        'layers': ['up_blocks.0', 'up_blocks.1', 'up_blocks.2', 'up_blocks.3'],
        # where captured K/V banks are parked between inversion and sampling
        'bank_device': 'cpu',
    },
    'correspondence': {
        'alpha': 0.1,
        'locator_cache': 'cache/locator.json',
        'locator': None,            # {"timestep": t, "layer": l} skips the cache
        'workers': 1,
    },
    'injection': {
        'w': 0.6,
        'gamma': 0.7,
        'start_step': 49,
        'blocks': None,             # None -> DEFAULT_INJECTION_BLOCKS
        'score_modulated': False,
    },
    'losses': {
        'style_layers': ['relu1_1', 'relu2_1', 'relu3_1', 'relu4_1', 'relu5_1'],
        'gram_normalize': True,
        'use_sobel': True,
        'use_gram': True,
    },
    'cycle': {
        'tau_c': None,
        'tau_s': None,
        'max_iters': 5,
        'comparator': 'paper',      # 'paper' | 'conventional'
        'adain': True,
        'adaptive': True,
        'matching': 'indirect',     # 'indirect' | 'direct'
        'calibration_step': 3,
    },
    'metrics': {
        'lpips_net': 'alex',
        'cfsd_layer': 'relu3_4',
        'cfsd_size': 256,
        'assets': 'assets.json',
        'device': 'cuda',
    },
    'pipeline': {
        'output_dir': 'outputs',
        'workers': 1,
        'cell_size': 256,
        'grid_columns': 3,
        'ablation': {
            'w': [0.3, 0.6, 1.8, 2.4, 3.0],
            'start_step': [1, 10, 25, 40, 49],
            'iterations': [1, 2, 3, 4, 5],
        },
    },
}


# ============================================================================
# LOADING
# ============================================================================

def _merge(base: Dict, update: Dict, path: str = '') -> Dict:
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"Unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def parse_override(text: str) -> Dict:
    """
    Turn ``a.b.c=value`` into a nested dict. The value is parsed as JSON when
    possible so numbers, booleans, null and lists work; otherwise it stays a
    string.
    """
    if '=' not in text:
        raise ConfigError(f"Override must look like key.path=value, got '{text}'")
    key_path, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw

    nested: Dict = {}
    cursor = nested
    keys = [k for k in key_path.strip().split('.') if k]
    if not keys:
        raise ConfigError(f"Empty key in override '{text}'")
    for key in keys[:-1]:
        cursor = cursor.setdefault(key, {})
    cursor[keys[-1]] = value
    return nested


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Iterable[str]] = None
) -> Dict[str, Any]:
    """
    Build the effective configuration.

    Args:
        path: Optional JSON config file (see config.example.json)
        overrides: Optional ``key.path=value`` strings applied last

    Returns:
        Fully populated config dict (a fresh copy, safe to mutate)
    """
    config = copy.deepcopy(DEFAULT_CONFIG)

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path) as f:
                file_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        if not isinstance(file_config, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        _merge(config, file_config)
        logger.info(f"Loaded config from {path}")

    for item in overrides or []:
        _merge(config, parse_override(item))

    validate_config(config)
    return config


def with_overrides(config: Dict[str, Any], values: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of ``config`` with dotted keys replaced, e.g. {'injection.w': 0.3}."""
    updated = copy.deepcopy(config)
    for dotted, value in values.items():
        keys = dotted.split('.')
        cursor = updated
        for key in keys[:-1]:
            cursor = cursor[key]
        if keys[-1] not in cursor:
            raise ConfigError(f"Unknown config key: {dotted}")
        cursor[keys[-1]] = value
    validate_config(updated)
    return updated


def get_option(config: Dict[str, Any], dotted: str, default: Any = None) -> Any:
    cursor: Any = config
    for key in dotted.split('.'):
        if not isinstance(cursor, dict) or key not in cursor:
            return default
        cursor = cursor[key]
    return cursor


def _type_name(value: Any) -> str:
    if isinstance(value, bool):
        return 'boolean'
    if isinstance(value, int):
        return 'integer'
    if isinstance(value, float):
        return 'number'
    if isinstance(value, str):
        return 'string'
    if isinstance(value, list):
        return 'list'
    return type(value).__name__


def _check_types(config: Dict, defaults: Dict, path: str = '') -> None:
    """Every value must have the type of the default it replaces; None defaults are free."""
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        value = config.get(key)
        if default is None or key not in config:
            continue
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping, got {value!r}")
            _check_types(value, default, where)
            continue
        expected = _type_name(default)
        actual = _type_name(value)
        if expected == 'number' and actual == 'integer':
            continue
        if expected != actual:
            raise ConfigError(f"{where} must be a {expected}, got {value!r}")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_config(config: Dict[str, Any]) -> None:
    _check_types(config, DEFAULT_CONFIG)

    backbone = config['backbone']
    if backbone['num_steps'] < 1:
        raise ConfigError("backbone.num_steps must be >= 1")
    if not backbone['timesteps'] or not backbone['layers']:
        raise ConfigError("backbone.timesteps and backbone.layers must be non-empty")

    injection = config['injection']
    if injection['w'] < 0:
        raise ConfigError("injection.w must be >= 0")
    if not 0 < injection['gamma'] <= 1:
        raise ConfigError("injection.gamma must be in (0, 1]")
    if not 1 <= injection['start_step'] <= backbone['num_steps']:
        raise ConfigError("injection.start_step must be in [1, num_steps]")

    cycle = config['cycle']
    if cycle['max_iters'] < 1:
        raise ConfigError("cycle.max_iters must be >= 1")
    if cycle['comparator'] not in ('paper', 'conventional'):
        raise ConfigError("cycle.comparator must be 'paper' or 'conventional'")
    if cycle['matching'] not in ('indirect', 'direct'):
        raise ConfigError("cycle.matching must be 'indirect' or 'direct'")
    for key in ('tau_c', 'tau_s'):
        value = cycle[key]
        if value is not None and (not _is_number(value) or not math.isfinite(value) or value < 0):
            raise ConfigError(f"cycle.{key} must be finite and >= 0")

    if config['correspondence']['alpha'] <= 0:
        raise ConfigError("correspondence.alpha must be > 0")


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form; stable across key order."""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def cache_dir(default: str = '~/.cache/cocodiff') -> str:
    return os.path.expanduser(os.environ.get(CACHE_ENV_VAR, default))


__all__ = [
    'DEFAULT_CONFIG',
    'load_config',
    'with_overrides',
    'get_option',
    'parse_override',
    'validate_config',
    'config_hash',
    'cache_dir',
]
