import json

import numpy as np
import numpy.testing as npt
import pytest

from synthset import (
    IMAGE_SIZE, MANIFEST_NAME, Manifest, RetrievalGroundTruth, class_params, generate_dataset,
    load_image, render_instance, save_image, split_sizes,
)


class TestRendering:
    def test_deterministic(self):
        params = class_params(0, 3)
        npt.assert_array_equal(render_instance(params, 99, 'mild'), render_instance(params, 99, 'mild'))

    def test_shape_and_range(self):
        img = render_instance(class_params(1, 0), 5, 'strong')
        assert img.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_jitter_levels_differ(self):
        params = class_params(0, 2)
        assert not np.array_equal(render_instance(params, 7, 'mild'), render_instance(params, 7, 'strong'))

    def test_unknown_jitter(self):
        with pytest.raises(ValueError):
            render_instance(class_params(0, 0), 1, 'wild')

    def test_strong_views_spread_more_than_mild(self):
        params = class_params(4, 1)

        def spread(jitter):
            views = np.stack([render_instance(params, seed, jitter) for seed in range(20)])
            centroid = views.mean(axis=0)
            return np.mean(np.sqrt(((views - centroid) ** 2).sum(axis=-1)))

        assert spread('mild') < spread('strong')

    def test_classes_separable_by_nearest_centroid(self):
        n_classes = 4
        params = [class_params(11, c) for c in range(n_classes)]
        centroids = np.stack([
            np.mean([render_instance(p, 1000 + s, 'mild') for s in range(5)], axis=0) for p in params
        ])
        correct = 0
        trials = 0
        for c, p in enumerate(params):
            for s in range(5):
                view = render_instance(p, 2000 + s, 'mild')
                distances = ((centroids - view) ** 2).sum(axis=(1, 2, 3))
                correct += int(np.argmin(distances) == c)
                trials += 1
        assert correct / trials > 1.0 / n_classes


class TestImageIO:
    def test_ppm_round_trip_is_quantised(self, tmp_path, image):
        save_image(tmp_path / 'x.ppm', image)
        loaded = load_image(tmp_path / 'x.ppm')
        npt.assert_allclose(loaded, np.round(image * 255) / 255, atol=1e-12)
        assert (tmp_path / 'x.ppm').read_bytes()[:2] == b'P6'

    def test_missing_image(self, tmp_path):
        with pytest.raises(FileNotFoundError, match='nope.ppm'):
            load_image(tmp_path / 'nope.ppm')


class TestDataset:
    def test_split_sizes(self):
        assert split_sizes(10) == {'easy': 5, 'hard': 3, 'junk': 1}
        with pytest.raises(ValueError):
            split_sizes(3)

    def test_counts(self, tmp_path):
        manifest = generate_dataset(8, 10, 0, tmp_path, distractors=3)
        assert len(manifest.queries()) == 8
        assert len([e for e in manifest.entries if e.role == 'db']) == 72
        assert len([e for e in manifest.entries if e.role == 'distractor']) == 3

    def test_ground_truth_disjoint_and_medium_non_empty(self, tiny_dataset):
        for query in tiny_dataset.queries():
            gt = tiny_dataset.ground_truth(query.id)
            assert not (gt.easy_ids & gt.hard_ids or gt.easy_ids & gt.junk_ids or gt.hard_ids & gt.junk_ids)
            assert gt.easy_ids | gt.hard_ids

    def test_distractors_outside_every_positive_set(self, tiny_dataset):
        distractors = {e.id for e in tiny_dataset.entries if e.role == 'distractor'}
        assert distractors
        for query in tiny_dataset.queries():
            gt = tiny_dataset.ground_truth(query.id)
            assert not distractors & (gt.easy_ids | gt.hard_ids | gt.junk_ids)

    def test_regeneration_is_byte_identical(self, tmp_path):
        a = generate_dataset(2, 6, 5, tmp_path / 'a')
        generate_dataset(2, 6, 5, tmp_path / 'b')
        assert (tmp_path / 'a' / MANIFEST_NAME).read_bytes() == (tmp_path / 'b' / MANIFEST_NAME).read_bytes()
        for entry in a.entries:
            assert (tmp_path / 'a' / entry.file).read_bytes() == (tmp_path / 'b' / entry.file).read_bytes()

    def test_manifest_read_back(self, tiny_dataset):
        reread = Manifest.read(tiny_dataset.root)
        assert [e.to_json() for e in reread.entries] == [e.to_json() for e in tiny_dataset.entries]

    def test_manifest_lines_are_json_objects(self, tiny_dataset):
        lines = (tiny_dataset.root / MANIFEST_NAME).read_text(encoding='utf-8').splitlines()
        records = [json.loads(line) for line in lines]
        assert all({'id', 'role', 'class_id', 'file', 'jitter'} <= set(r) for r in records)
        assert all({'easy', 'hard', 'junk'} <= set(r) for r in records if r['role'] == 'query')

    def test_training_entries_exclude_queries_junk_and_distractors(self, tiny_dataset):
        for entry in tiny_dataset.training_entries():
            assert entry.role == 'db' and entry.jitter in ('mild', 'strong')

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Manifest.read(tmp_path)

    def test_overlapping_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            RetrievalGroundTruth(0, frozenset({1}), frozenset({1}), frozenset())
