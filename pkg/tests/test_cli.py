import csv
import json

import numpy as np
import pytest

from cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, GST_COLUMNS, main
from synthset import MANIFEST_NAME, load_image, save_image


@pytest.fixture(autouse=True)
def isolated_cwd(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv('QUALRET_DEBUG', raising=False)
    return tmp_path


def read_gst(path):
    with open(path, encoding='utf-8') as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


class TestUsage:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(['--help'])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for command in ('gen-data', 'corrupt', 'train', 'eval', 'gradcheck', 'gst-map', 'ablate', 'report'):
            assert command in out

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(['train', '--bogus'])
        assert exc.value.code == EXIT_USAGE

    def test_missing_command(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE

    def test_bad_loss_choice(self):
        with pytest.raises(SystemExit) as exc:
            main(['train', '--loss', 'arcface'])
        assert exc.value.code == EXIT_USAGE


class TestDataErrors:
    def test_missing_checkpoint(self, tmp_path):
        assert main(['eval', '--ckpt', str(tmp_path / 'none.adpt'), '--data', str(tmp_path)]) == EXIT_DATA

    def test_invalid_config_value(self):
        assert main(['train', '--m', '2.0']) == EXIT_DATA

    def test_malformed_config_file(self, tmp_path):
        (tmp_path / 'cfg.json').write_text('{not json', encoding='utf-8')
        assert main(['train', '--config', str(tmp_path / 'cfg.json')]) == EXIT_DATA

    def test_missing_ledger(self, tmp_path):
        assert main(['report', '--db', str(tmp_path / 'none.db')]) == EXIT_DATA


class TestGenDataAndCorrupt:
    def test_gen_data(self, tmp_path, capsys):
        code = main(['gen-data', '--classes', '3', '--per-class', '6', '--seed', '1', '--out', str(tmp_path / 'd')])
        assert code == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary['queries'] == 3
        assert (tmp_path / 'd' / MANIFEST_NAME).exists()

    def test_corrupt(self, tmp_path, image, capsys):
        save_image(tmp_path / 'a.ppm', image)
        code = main(['corrupt', '--in', str(tmp_path / 'a.ppm'), '--out', str(tmp_path / 'b.ppm'),
                     '--kind', 'GaussianBlur', '--severity', '3', '--seed', '7'])
        assert code == EXIT_OK
        specs = json.loads(capsys.readouterr().out)
        assert specs == [{'kind': 'GaussianBlur', 'severity': 3, 'seed': 7}]
        assert load_image(tmp_path / 'b.ppm').shape == image.shape

    def test_corrupt_needs_kind(self, tmp_path, image):
        save_image(tmp_path / 'a.ppm', image)
        assert main(['corrupt', '--in', str(tmp_path / 'a.ppm'), '--out', str(tmp_path / 'b.ppm')]) == EXIT_USAGE

    def test_corrupt_bad_severity(self, tmp_path, image):
        save_image(tmp_path / 'a.ppm', image)
        code = main(['corrupt', '--in', str(tmp_path / 'a.ppm'), '--out', str(tmp_path / 'b.ppm'),
                     '--kind', 'Contrast', '--severity', '9'])
        assert code == EXIT_DATA

    def test_corrupt_random_is_deterministic(self, tmp_path, image):
        save_image(tmp_path / 'a.ppm', image)
        for name in ('b.ppm', 'c.ppm'):
            main(['corrupt', '--in', str(tmp_path / 'a.ppm'), '--out', str(tmp_path / name), '--random',
                  '--seed', '4'])
        assert (tmp_path / 'b.ppm').read_bytes() == (tmp_path / 'c.ppm').read_bytes()


class TestGstMap:
    def test_attenuation_and_saturation(self, tmp_path):
        out = tmp_path / 'gst.csv'
        assert main(['gst-map', '--theta-steps', '16', '--desc-steps', '6', '--out', str(out)]) == EXIT_OK
        rows = read_gst(out)
        assert len(rows) == 16 * 6
        assert list(rows[0]) == list(GST_COLUMNS)
        by_theta = {}
        for row in rows:
            by_theta.setdefault(row['theta'], []).append(row)
        for cells in by_theta.values():
            magnitudes = [c['abs_g'] for c in sorted(cells, key=lambda c: c['desc'])]
            assert all(a >= b for a, b in zip(magnitudes, magnitudes[1:]))
        for row in rows:
            if row['P_target'] == 1.0:
                assert row['g'] == 0.0

    def test_coupled_adaface(self, tmp_path):
        out = tmp_path / 'gst.csv'
        code = main(['gst-map', '--theta-steps', '4', '--desc-steps', '3', '--loss', 'adaface', '--coupled',
                     '--out', str(out)])
        assert code == EXIT_OK
        rows = read_gst(out)
        assert all(0.0 <= r['P_target'] <= 1.0 and np.isfinite(r['g']) for r in rows)

    def test_grid_too_small(self, tmp_path):
        assert main(['gst-map', '--theta-steps', '1', '--out', str(tmp_path / 'g.csv')]) == EXIT_DATA


class TestGradcheckCommand:
    def test_pass(self, capsys):
        assert main(['gradcheck', '--seed', '0']) == EXIT_OK
        assert capsys.readouterr().out.count('PASS') == 7

    def test_tampered(self):
        assert main(['gradcheck', '--tamper', 'infonce']) == EXIT_NUMERIC


class TestTrainAndEval:
    def test_train_then_eval(self, tmp_path, tiny_dataset, capsys):
        out = tmp_path / 'run'
        code = main(['train', '--data', str(tiny_dataset.root), '--out', str(out), '--classes', '4',
                     '--per-class', '6', '--seed', '3', '--batch', '4', '--epochs', '1', '--d', '8',
                     '--scales', '1.0'])
        assert code == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary['final']['epoch'] == 1

        report = tmp_path / 'eval.csv'
        code = main(['eval', '--ckpt', str(out / 'checkpoint.adpt'), '--data', str(tiny_dataset.root),
                     '--protocol', 'all', '--report', str(report), '--quality-stats'])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == 'protocol,noisy,n_queries,map'
        assert len(lines) == 1 + 6 + 1
        assert 'desc_noisy_mean' in json.loads(lines[-1])
        assert report.exists()
