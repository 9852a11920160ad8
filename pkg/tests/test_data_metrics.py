"""Synthetic scene generation, caching, and IoU evaluation."""

import numpy as np
import pytest

from rcil.data import ScenePool, SynthSceneSpec, build_pool, generate_scene, load_pool, save_pool
from rcil.metrics import evaluate, write_report_csv
from rcil.protocol import build_schedule


class TestGenerateScene:
    def test_bit_identical_regeneration(self):
        spec = SynthSceneSpec(seed=7)
        img1, mask1 = generate_scene(spec, 3)
        img2, mask2 = generate_scene(spec, 3)
        assert np.array_equal(img1, img2) and np.array_equal(mask1, mask2)

    def test_label_range(self):
        spec = SynthSceneSpec(seed=1, n_classes=4, shapes_min=1, shapes_max=3)
        for i in range(20):
            _, mask = generate_scene(spec, i)
            assert set(np.unique(mask).tolist()) <= {0, 1, 2, 3, 4}

    def test_domains_share_masks_differ_in_statistics(self):
        a = SynthSceneSpec(seed=5, domain_id=0)
        b = SynthSceneSpec(seed=5, domain_id=1)
        img_a, mask_a = generate_scene(a, 2)
        img_b, mask_b = generate_scene(b, 2)
        assert np.array_equal(mask_a, mask_b)
        bg = mask_a == 0
        assert abs(img_a[:, bg].mean() - img_b[:, bg].mean()) > 1e-3

    def test_image_range_and_shapes(self):
        spec = SynthSceneSpec(seed=2, image_size=(48, 40))
        img, mask = generate_scene(spec, 0)
        assert img.shape == (3, 48, 40) and mask.shape == (48, 40)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_every_class_reachable(self):
        spec = SynthSceneSpec(seed=3, n_classes=10)
        seen = set()
        for i in range(200):
            _, mask = generate_scene(spec, i)
            seen |= set(np.unique(mask).tolist())
        assert seen >= set(range(1, 11))


class TestPoolCache:
    def test_roundtrip(self, tmp_path):
        spec = SynthSceneSpec(seed=11, n_classes=4)
        pool = build_pool(spec, 6)
        save_pool(tmp_path / "cache", pool, spec.content_hash())
        loaded = load_pool(tmp_path / "cache", spec.content_hash())
        assert np.array_equal(loaded.images, pool.images)
        assert np.array_equal(loaded.masks, pool.masks)

    def test_spec_hash_mismatch_rejected(self, tmp_path):
        spec = SynthSceneSpec(seed=11, n_classes=4)
        save_pool(tmp_path / "cache", build_pool(spec, 2), spec.content_hash())
        with pytest.raises(ValueError):
            load_pool(tmp_path / "cache", "deadbeef")

    def test_train_val_salts_differ(self):
        spec = SynthSceneSpec(seed=11, n_classes=4)
        train = build_pool(spec, 4, salt=0)
        val = build_pool(spec, 4, salt=1)
        assert not np.array_equal(train.images, val.images)


class _OracleNet:
    """Produces one-hot logits straight from stored channel-space maps."""

    def __init__(self, maps, n_channels):
        self.maps = maps
        self.n_channels = n_channels
        self.calls = 0

    def forward(self, x, training=False):
        n = x.data.shape[0]
        sel = self.maps[self.calls : self.calls + n]
        self.calls += n
        logits = np.zeros((n, self.n_channels) + sel.shape[1:])
        for ch in range(self.n_channels):
            logits[:, ch][sel == ch] = 10.0
        from rcil.autograd import Tensor

        return Tensor(logits), []


class TestEvaluate:
    def test_perfect_predictor_scores_one(self):
        sched = build_schedule("2-1", 4)
        rng = np.random.default_rng(0)
        masks = rng.integers(0, 3, (4, 8, 8))  # classes of steps <= 0
        pool = ScenePool(images=rng.random((4, 3, 8, 8)), masks=masks,
                         domains=np.zeros(4, dtype=np.int64))
        net = _OracleNet(masks.copy(), n_channels=3)
        report = evaluate(net, pool, sched, t=0)
        assert all(v == 1.0 for v in report.per_class_iou.values())
        assert report.miou_all == 1.0

    def test_constant_background_predictor_counting_oracle(self):
        sched = build_schedule("2-1", 4)
        mask = np.array([[0, 0], [1, 2]], dtype=np.int64)
        pool = ScenePool(images=np.zeros((1, 3, 2, 2)), masks=mask[None],
                         domains=np.zeros(1, dtype=np.int64))
        net = _OracleNet(np.zeros((1, 2, 2), dtype=np.int64), n_channels=3)
        report = evaluate(net, pool, sched, t=0)
        assert report.per_class_iou[0] == pytest.approx(0.5)
        assert report.per_class_iou[1] == 0.0
        assert report.per_class_iou[2] == 0.0

    def test_future_class_pixels_excluded(self):
        sched = build_schedule("2-1", 4)
        mask = np.array([[0, 4], [1, 1]], dtype=np.int64)  # class 4 unseen at t=0
        pool = ScenePool(images=np.zeros((1, 3, 2, 2)), masks=mask[None],
                         domains=np.zeros(1, dtype=np.int64))
        gt_channels = np.array([[[0, 0], [1, 1]]], dtype=np.int64)
        net = _OracleNet(gt_channels, n_channels=3)
        report = evaluate(net, pool, sched, t=0)
        # the unseen pixel is ignored, so the background prediction there is free
        assert report.per_class_iou[0] == pytest.approx(1.0)
        assert report.per_class_iou[1] == pytest.approx(1.0)

    def test_groups_follow_old_new_all_convention(self):
        sched = build_schedule("2-1", 4)
        mask = np.array([[0, 1], [2, 3]], dtype=np.int64)
        pool = ScenePool(images=np.zeros((1, 3, 2, 2)), masks=mask[None],
                         domains=np.zeros(1, dtype=np.int64))
        net = _OracleNet(np.array([[[0, 1], [2, 3]]], dtype=np.int64), n_channels=4)
        report = evaluate(net, pool, sched, t=1)
        assert report.groups[0] == "background"
        assert report.groups[1] == "old" and report.groups[2] == "old"
        assert report.groups[3] == "new"
        assert report.miou_old == 1.0 and report.miou_new == 1.0

    def test_absent_class_excluded_from_means(self):
        sched = build_schedule("2-1", 4)
        mask = np.array([[0, 0], [1, 1]], dtype=np.int64)  # class 2 never appears
        pool = ScenePool(images=np.zeros((1, 3, 2, 2)), masks=mask[None],
                         domains=np.zeros(1, dtype=np.int64))
        net = _OracleNet(np.array([[[0, 0], [1, 1]]], dtype=np.int64), n_channels=3)
        report = evaluate(net, pool, sched, t=0)
        assert 2 not in report.per_class_iou

    def test_csv_emission(self, tmp_path):
        sched = build_schedule("2-1", 4)
        mask = np.array([[0, 1], [1, 2]], dtype=np.int64)
        pool = ScenePool(images=np.zeros((1, 3, 2, 2)), masks=mask[None],
                         domains=np.zeros(1, dtype=np.int64))
        net = _OracleNet(np.array([[[0, 1], [1, 2]]], dtype=np.int64), n_channels=3)
        report = evaluate(net, pool, sched, t=0)
        out = tmp_path / "iou.csv"
        write_report_csv(report, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "class_id,iou,group"
        assert len(lines) == 1 + len(report.per_class_iou)
