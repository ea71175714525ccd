import json

import pytest

from config import DEFAULTS, INFERENCE_SCALES, Config
from utils import is_debug


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No QUALRET_* variables and no stray .env file."""
    for key in DEFAULTS:
        monkeypatch.delenv(f"QUALRET_{key.upper()}", raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestDefaults:
    def test_defaults(self, clean_env):
        config = Config()
        assert (config.s, config.m, config.h, config.tau) == (30.0, 0.15, 0.33, 1.0)
        assert (config.alpha, config.beta) == (0.2, 0.2)
        assert config.scales == INFERENCE_SCALES
        assert config.loss == 'noiretrieval' and config.qcb_enabled

    def test_distractor_count_follows_classes(self, clean_env):
        assert Config(overrides={'classes': 5}).get_distractor_count() == 5
        assert Config(overrides={'distractors': 2}).get_distractor_count() == 2

    def test_unknown_attribute(self, clean_env):
        with pytest.raises(AttributeError):
            Config().nope

    def test_debug_flag_reaches_log(self, clean_env):
        Config(overrides={'debug': True}, use_env=False)
        assert is_debug()
        Config(use_env=False)
        assert not is_debug()


class TestLayering:
    def test_file_then_env_then_overrides(self, clean_env, monkeypatch):
        path = clean_env / 'c.json'
        path.write_text(json.dumps({'batch': 8, 'epochs': 3, 'm': 0.2}), encoding='utf-8')
        monkeypatch.setenv('QUALRET_EPOCHS', '5')
        config = Config(str(path), overrides={'m': 0.1, 'batch': None})
        assert config.batch == 8
        assert config.epochs == 5
        assert config.m == 0.1

    def test_env_types(self, clean_env, monkeypatch):
        monkeypatch.setenv('QUALRET_QCB_ENABLED', 'false')
        monkeypatch.setenv('QUALRET_SCALES', '1.0, 0.5')
        monkeypatch.setenv('QUALRET_S', '16')
        config = Config()
        assert config.qcb_enabled is False
        assert config.scales == [1.0, 0.5]
        assert config.s == 16.0

    def test_dotenv_file(self, clean_env):
        (clean_env / '.env').write_text('QUALRET_D=12\n', encoding='utf-8')
        try:
            assert Config().d == 12
        finally:
            import os
            os.environ.pop('QUALRET_D', None)

    def test_env_ignored_when_disabled(self, clean_env, monkeypatch):
        monkeypatch.setenv('QUALRET_BATCH', '4')
        assert Config(use_env=False).batch == DEFAULTS['batch']


class TestValidation:
    def test_missing_file(self, clean_env):
        with pytest.raises(FileNotFoundError):
            Config('missing.json')

    def test_unknown_file_key(self, clean_env):
        path = clean_env / 'c.json'
        path.write_text(json.dumps({'batchsize': 8}), encoding='utf-8')
        with pytest.raises(ValueError, match='batchsize'):
            Config(str(path))

    def test_file_must_hold_object(self, clean_env):
        path = clean_env / 'c.json'
        path.write_text('[1, 2]', encoding='utf-8')
        with pytest.raises(ValueError):
            Config(str(path))

    def test_unknown_override(self, clean_env):
        with pytest.raises(ValueError):
            Config(overrides={'lr': 0.1})

    @pytest.mark.parametrize('key,value', [
        ('s', 0.0), ('m', 1.6), ('h', -1.0), ('tau', 0.0), ('beta', -0.5), ('loss', 'arcface'),
        ('qcb_supervision', 'mse'), ('batch', 1), ('epochs', 0), ('per_class', 5), ('scales', []),
        ('scales', [1.0, 0.0]), ('d', 0), ('lr0', 0.0), ('lr0', -1.0), ('momentum', 1.0), ('momentum', 5.0),
        ('momentum', -0.1), ('weight_decay', -1.0), ('ema_alpha', 0.0), ('ema_alpha', 1.5),
        ('distractors', -1), ('freeze', 'encoder'), ('freeze', ['backbone.conv1']), ('freeze', [3]),
    ])
    def test_rejected_values(self, clean_env, key, value):
        with pytest.raises(ValueError):
            Config(overrides={key: value})

    @pytest.mark.parametrize('key,value', [
        ('momentum', 0.0), ('weight_decay', 0.0), ('ema_alpha', 1.0), ('distractors', 0),
        ('freeze', ['encoder.conv1', 'qcb', 'head', 'aux']),
    ])
    def test_boundary_values_accepted(self, clean_env, key, value):
        assert Config(overrides={key: value}).get(key) == value


class TestCopies:
    def test_replace_keeps_other_keys(self, clean_env):
        base = Config(overrides={'batch': 8})
        variant = base.replace(loss='adaface')
        assert variant.batch == 8 and variant.loss == 'adaface'
        assert base.loss == 'noiretrieval'

    def test_to_dict_is_json_safe(self, clean_env):
        data = Config().to_dict()
        assert json.loads(json.dumps(data)) == data
        assert set(data) == set(DEFAULTS)
