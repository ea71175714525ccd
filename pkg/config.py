"""
Unified configuration management for qualret.

Values are layered: built-in defaults, then a JSON config file, then
QUALRET_<KEY> environment variables (a .env file is honoured), then
explicit overrides coming from CLI flags.
"""

import os
import json
import math
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from utils import log, set_debug

INFERENCE_SCALES = [1 / (2 * math.sqrt(2)), 0.5, 1 / math.sqrt(2), 1.0, math.sqrt(2)]

LOSS_KINDS = ('noiretrieval', 'adaface', 'adaface_ema', 'normsoftmax')
QCB_SUPERVISION_KINDS = ('infonce', 'crossentropy')
# first component of every named parameter (encoder.conv1_w, qcb.fuse_w, ...)
PARAM_GROUPS = ('encoder', 'qcb', 'head', 'aux')

DEFAULTS: Dict[str, Any] = {
    # data
    'seed': 0,
    'classes': 32,
    'per_class': 10,
    'distractors': None,  # None -> one per class
    'data_dir': 'data',
    'out_dir': 'runs',
    # optimisation
    'batch': 32,
    'epochs': 30,
    'lr0': 0.05,
    'momentum': 0.9,
    'weight_decay': 1e-4,
    'freeze': [],
    # losses
    's': 30.0,
    'm': 0.15,
    'h': 0.33,
    'tau': 1.0,
    'alpha': 0.2,
    'beta': 0.2,
    'loss': 'noiretrieval',
    'ema_alpha': 0.01,
    # model
    'd': 32,
    'scales': INFERENCE_SCALES,
    'qcb_enabled': True,
    'qcb_supervision': 'infonce',
    'debug': False,
}


class Config:
    """Experiment configuration (training, data and evaluation knobs)."""

    def __init__(self, config_file: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None,
                 use_env: bool = True):
        values = dict(DEFAULTS)
        values['scales'] = list(INFERENCE_SCALES)
        values['freeze'] = []

        self.config_file = config_file
        if config_file is not None:
            values.update(self._read_file(config_file))

        if use_env:
            env_path = Path.cwd() / '.env'
            if env_path.exists():
                load_dotenv(env_path)
            values.update(self._read_env())

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ValueError(f"Unknown config key: {key}")
            values[key] = value

        self._values = values
        self._validate()
        set_debug(self.debug)

    # ========== Loading ==========

    @staticmethod
    def _read_file(config_file: str) -> Dict[str, Any]:
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {config_file}")
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"Config file {config_file} must hold a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ValueError(f"Unknown config keys in {config_file}: {', '.join(unknown)}")
        log('DEBUG', f"[Config] loaded {len(data)} keys from {config_file}")
        return data

    @staticmethod
    def _read_env() -> Dict[str, Any]:
        found = {}
        for key, default in DEFAULTS.items():
            raw = os.getenv(f"QUALRET_{key.upper()}")
            if raw is None:
                continue
            found[key] = _parse_env_value(raw, default)
        return found

    def _validate(self):
        v = self._values
        if v['s'] <= 0:
            raise ValueError(f"s must be > 0, got {v['s']}")
        if not 0 <= v['m'] < math.pi / 2:
            raise ValueError(f"m must lie in [0, pi/2), got {v['m']}")
        if v['h'] <= 0:
            raise ValueError(f"h must be > 0, got {v['h']}")
        if v['tau'] <= 0:
            raise ValueError(f"tau must be > 0, got {v['tau']}")
        if v['alpha'] < 0 or v['beta'] < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {v['alpha']}, {v['beta']}")
        if v['loss'] not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {v['loss']!r}")
        if v['qcb_supervision'] not in QCB_SUPERVISION_KINDS:
            raise ValueError(f"qcb_supervision must be one of {QCB_SUPERVISION_KINDS}")
        if v['batch'] < 2:
            raise ValueError(f"batch must be >= 2, got {v['batch']}")
        if v['epochs'] < 1:
            raise ValueError(f"epochs must be >= 1, got {v['epochs']}")
        if v['classes'] < 2 or v['per_class'] < 6:
            raise ValueError("classes must be >= 2 and per_class >= 6")
        if not v['scales'] or any(scale <= 0 for scale in v['scales']):
            raise ValueError(f"scales must be a non-empty list of positive factors, got {v['scales']}")
        if v['d'] < 1:
            raise ValueError(f"d must be >= 1, got {v['d']}")
        if v['lr0'] <= 0:
            raise ValueError(f"lr0 must be > 0, got {v['lr0']}")
        if not 0 <= v['momentum'] < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {v['momentum']}")
        if v['weight_decay'] < 0:
            raise ValueError(f"weight_decay must be >= 0, got {v['weight_decay']}")
        if not 0 < v['ema_alpha'] <= 1:
            raise ValueError(f"ema_alpha must lie in (0, 1], got {v['ema_alpha']}")
        if v['distractors'] is not None and v['distractors'] < 0:
            raise ValueError(f"distractors must be >= 0, got {v['distractors']}")
        freeze = v['freeze']
        if not isinstance(freeze, list) or not all(isinstance(name, str) for name in freeze):
            raise ValueError(f"freeze must be a list of parameter names, got {freeze!r}")
        unknown = [name for name in freeze if name.split('.')[0] not in PARAM_GROUPS]
        if unknown:
            raise ValueError(f"freeze entries outside {PARAM_GROUPS}: {', '.join(unknown)}")

    # ========== Access ==========

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get('_values')
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def get(self, key: str, default: Any = None) -> Any:
        return self._values.get(key, default)

    def get_distractor_count(self) -> int:
        if self._values['distractors'] is None:
            return self._values['classes']
        return int(self._values['distractors'])

    def replace(self, **changes) -> 'Config':
        """Copy with some keys changed (ablation variants)."""
        merged = dict(self._values)
        merged.update(changes)
        return Config(overrides=merged, use_env=False)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(self._values))


def _parse_env_value(raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        return raw.strip().lower() in ('1', 'true', 'yes')
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        raw = raw.strip()
        if raw.startswith('['):
            return json.loads(raw)
        return [_parse_list_item(item) for item in raw.split(',') if item.strip()]
    if default is None:
        return int(raw)
    return raw


def _parse_list_item(item: str) -> Any:
    item = item.strip()
    try:
        return float(item)
    except ValueError:
        return item
