import json
from dataclasses import replace

import numpy as np
import pytest

from promptcount.geometry import iou
from promptcount.scenegen import (
    DatasetFormatError,
    PlacementError,
    SceneConfig,
    filter_min_instances,
    generate_scene,
    generate_scenes,
    load_dataset,
    make_failure_suite,
    save_dataset,
)


class TestGenerateScene:
    def test_deterministic_byte_identical(self):
        cfg = SceneConfig(n_target=(5, 5), seed=7)
        img1, ann1 = generate_scene(cfg)
        img2, ann2 = generate_scene(cfg)
        assert (img1 == img2).all()
        assert ann1.target_boxes == ann2.target_boxes

    def test_no_distractors(self):
        _, ann = generate_scene(SceneConfig(n_distractor=(0, 0), seed=1))
        assert ann.distractor_boxes == []

    def test_count_range_statistics(self):
        counts = []
        for seed in range(100):
            _, ann = generate_scene(
                SceneConfig(n_target=(10, 30), seed=seed)
            )
            counts.append(ann.count)
        assert all(10 <= c <= 30 for c in counts)
        assert 18 <= np.mean(counts) <= 22

    def test_overlap_bound(self):
        cfg = SceneConfig(
            n_target=(15, 15), max_overlap_iou=0.05, seed=3
        )
        _, ann = generate_scene(cfg)
        boxes = ann.target_boxes + ann.distractor_boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou(boxes[i], boxes[j]) <= 0.05

    def test_annotation_covers_shape_pixels(self):
        cfg = SceneConfig(n_target=(8, 8), background="flat", seed=5)
        img, ann = generate_scene(cfg)
        n = cfg.image_size
        for box in ann.target_boxes:
            x0, y0 = int(box.x_min * n), int(box.y_min * n)
            x1, y1 = int(round(box.x_max * n)), int(round(box.y_max * n))
            region = img[y0:y1, x0:x1]
            # the region must contain non-background pixels
            assert (region != 38).any()

    def test_overdense_config_fails_loudly(self):
        cfg = SceneConfig(
            n_target=(200, 200),
            size_range=(0.2, 0.3),
            max_overlap_iou=0.0,
            seed=0,
        )
        with pytest.raises(PlacementError):
            generate_scene(cfg)

    def test_identical_target_distractor_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(
                n_distractor=(1, 2),
                distractor_shape="disc",
                distractor_color=(210, 70, 60),
            )

    def test_distractors_visible(self):
        cfg = SceneConfig(n_distractor=(4, 4), seed=9)
        _, ann = generate_scene(cfg)
        assert len(ann.distractor_boxes) == 4


class TestFailureSuite:
    def test_families_and_determinism(self):
        suite = make_failure_suite(master_seed=0)
        tags = {tag for _, _, tag in suite}
        assert tags == {
            "single-target",
            "dense-multi-object",
            "cross-image-single-target",
        }
        for tag in tags:
            assert sum(1 for _, _, t in suite if t == tag) >= 10

        again = make_failure_suite(master_seed=0)
        for (img1, ann1, t1), (img2, ann2, t2) in zip(suite, again):
            assert t1 == t2
            assert (img1 == img2).all()
            assert ann1.target_boxes == ann2.target_boxes

    def test_single_target_scenes_have_one_instance(self):
        suite = make_failure_suite()
        for _, ann, tag in suite:
            if tag == "single-target":
                assert ann.count == 1

    def test_dense_scenes_are_dense(self):
        suite = make_failure_suite()
        for _, ann, tag in suite:
            if tag == "dense-multi-object":
                assert ann.count >= 30
                assert len(ann.distractor_boxes) >= 30


class TestDatasetRoundTrip:
    def test_save_load_identity(self, tmp_path):
        scenes = generate_scenes(SceneConfig(n_target=(3, 6), seed=0), 10)
        root = save_dataset(scenes, tmp_path / "ds")
        ds = load_dataset(root)
        assert len(ds) == 10
        for (img, ann), rec in zip(scenes, ds):
            assert rec.count == ann.count
            for orig, loaded in zip(ann.target_boxes, rec.target_boxes):
                assert orig.x_min == pytest.approx(loaded.x_min, abs=1e-9)
                assert orig.y_max == pytest.approx(loaded.y_max, abs=1e-9)
            assert (rec.load_image() == img).all()

    def test_exemplars_limited_to_three(self, tmp_path):
        scenes = generate_scenes(SceneConfig(n_target=(8, 8), seed=1), 2)
        ds = load_dataset(save_dataset(scenes, tmp_path / "ds"))
        for rec in ds:
            assert 1 <= len(rec.exemplar_boxes) <= 3

    def test_truncated_json_is_format_error(self, tmp_path):
        scenes = generate_scenes(SceneConfig(seed=2), 2)
        root = save_dataset(scenes, tmp_path / "ds")
        ann_file = root / "annotations.json"
        ann_file.write_text(ann_file.read_text()[:100])
        with pytest.raises(DatasetFormatError):
            load_dataset(root)

    def test_negative_bbox_size_names_record(self, tmp_path):
        scenes = generate_scenes(SceneConfig(seed=3), 1)
        root = save_dataset(scenes, tmp_path / "ds")
        ann_file = root / "annotations.json"
        payload = json.loads(ann_file.read_text())
        payload["annotations"][2]["bbox"][2] = -5.0
        ann_file.write_text(json.dumps(payload))
        with pytest.raises(DatasetFormatError, match="record 2"):
            load_dataset(root)

    def test_version_mismatch(self, tmp_path):
        scenes = generate_scenes(SceneConfig(seed=4), 1)
        root = save_dataset(scenes, tmp_path / "ds")
        ann_file = root / "annotations.json"
        payload = json.loads(ann_file.read_text())
        payload["format_version"] = 99
        ann_file.write_text(json.dumps(payload))
        with pytest.raises(DatasetFormatError, match="version"):
            load_dataset(root)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / "nope")


class TestFilterMinInstances:
    def _dataset_with_counts(self, tmp_path, counts):
        scenes = [
            generate_scene(SceneConfig(n_target=(c, c), seed=i))
            for i, c in enumerate(counts)
        ]
        return load_dataset(save_dataset(scenes, tmp_path / "ds"))

    def test_threshold_ten(self, tmp_path):
        ds = self._dataset_with_counts(tmp_path, [3, 10, 25])
        kept = filter_min_instances(ds, 10)
        assert [r.count for r in kept] == [10, 25]

    def test_zero_is_identity(self, tmp_path):
        ds = self._dataset_with_counts(tmp_path, [3, 5])
        assert len(filter_min_instances(ds, 0)) == len(ds)

    def test_all_filtered(self, tmp_path):
        ds = self._dataset_with_counts(tmp_path, [3, 5])
        assert len(filter_min_instances(ds, 100)) == 0

    def test_in_memory_scenes(self):
        scenes = [
            generate_scene(SceneConfig(n_target=(c, c), seed=c))
            for c in (2, 12)
        ]
        kept = filter_min_instances(scenes, 10)
        assert len(kept) == 1 and kept[0][1].count == 12

    def test_negative_k_rejected(self):
        with pytest.raises(ValueError):
            filter_min_instances([], -1)
