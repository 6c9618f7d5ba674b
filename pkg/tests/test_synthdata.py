import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntsnet.geometry import Region
from ntsnet.synthdata import (
    SynthConfig,
    SynthError,
    class_patterns,
    generate_dataset,
    generate_sample,
    load_dataset,
    make_class_pattern,
    nearest_template_accuracy,
    read_pgm,
    sample_seed,
    save_dataset,
    write_pgm,
)

SMALL = SynthConfig(n_train=64, n_test=32)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(SMALL)


class TestPatterns:
    def test_deterministic(self):
        np.testing.assert_array_equal(make_class_pattern(3, 16, 7), make_class_pattern(3, 16, 7))

    def test_values_in_unit_interval(self):
        p = make_class_pattern(5, 16, 0)
        assert p.min() >= 0 and p.max() <= 1

    def test_framed(self):
        p = make_class_pattern(2, 16, 0)
        assert (p[0] == 1).all() and (p[-1] == 1).all() and (p[:, 0] == 1).all() and (p[:, -1] == 1).all()

    def test_pairwise_distance(self):
        bank, _ = class_patterns(SynthConfig())
        flat = bank.reshape(len(bank), -1)
        for i in range(len(bank)):
            for j in range(i + 1, len(bank)):
                assert (flat[i] != flat[j]).mean() >= 0.25

    def test_unknown_class(self):
        with pytest.raises(SynthError):
            make_class_pattern(8, 16, 0, n_classes=8)


class TestSample:
    def test_degenerate_config_is_patch_only(self):
        cfg = SynthConfig(n_distractors=0, noise_amplitude=0.0)
        patterns, _ = class_patterns(cfg)
        s = generate_sample(4, 123, cfg, patterns)
        r = s.gt_region
        x, y = int(r.x_min), int(r.y_min)
        img = s.image[:, :, 0]
        np.testing.assert_array_equal(img[y : y + 16, x : x + 16], patterns[4])
        rest = img.copy()
        rest[y : y + 16, x : x + 16] = 0
        assert not rest.any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 2**63 - 1))
    def test_region_and_pixel_range(self, label, seed):
        s = generate_sample(label, seed, SynthConfig())
        r = s.gt_region
        assert (r.width, r.height) == (16, 16)
        assert 0 <= r.x_min and r.x_max <= 64 and 0 <= r.y_min and r.y_max <= 64
        assert s.image.shape == (64, 64, 1)
        assert s.image.min() >= 0 and s.image.max() <= 1

    def test_same_class_shares_content_not_location(self):
        cfg = SynthConfig()
        a, b = generate_sample(1, 10, cfg), generate_sample(1, 11, cfg)
        assert a.gt_region != b.gt_region

        def patch(s):
            r = s.gt_region
            return s.image[int(r.y_min) : int(r.y_max), int(r.x_min) : int(r.x_max)]

        np.testing.assert_array_equal(patch(a), patch(b))

    def test_distractor_is_partial_template(self):
        cfg = SynthConfig(n_distractors=1, noise_amplitude=0.0)
        patterns, _ = class_patterns(cfg)
        for seed in range(20):
            s = generate_sample(0, seed, cfg, patterns)
            img = s.image[:, :, 0].copy()
            r = s.gt_region
            img[int(r.y_min) : int(r.y_max), int(r.x_min) : int(r.x_max)] = 0
            ys, xs = np.nonzero(img)
            h, w = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
            # one full side and 6 to 10 pixels of the other
            assert sorted([h, w])[1] == 16 and 6 <= min(h, w) <= 10
            piece = img[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
            slices = [p[:h, :w] for p in patterns] + [p[16 - h :, 16 - w :] for p in patterns]
            assert any(np.array_equal(piece, t) for t in slices)

    def test_placement_failure(self):
        cfg = SynthConfig(image_side=20, patch_side=16, n_distractors=2)
        with pytest.raises(SynthError, match="fewer distractors"):
            generate_sample(0, 1, cfg)

    @pytest.mark.parametrize(
        "kwargs", [{"patch_side": 64}, {"n_train": 0}, {"n_classes": 1}, {"noise_amplitude": -1}]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(SynthError):
            SynthConfig(**kwargs)


class TestDataset:
    def test_balanced(self, small_dataset):
        train, _ = small_dataset
        counts = np.bincount([s.label for s in train], minlength=8)
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self, small_dataset):
        train, test = generate_dataset(SMALL)
        for a, b in zip(train + test, small_dataset[0] + small_dataset[1]):
            assert a.label == b.label and a.gt_region == b.gt_region
            np.testing.assert_array_equal(a.image, b.image)

    def test_seeds_disjoint(self):
        train = {sample_seed(0, "train", i) for i in range(2000)}
        test = {sample_seed(0, "test", i) for i in range(500)}
        assert len(train) == 2000 and len(test) == 500 and not train & test

    def test_localization_needed(self):
        cfg = replace(SynthConfig(), n_train=400, n_test=1)
        train, _ = generate_dataset(cfg)
        assert nearest_template_accuracy(train, cfg) >= 0.99
        assert nearest_template_accuracy(train, cfg, at_random=True) <= 2 / cfg.n_classes


class TestFiles:
    def test_pgm_round_trip(self, tmp_path, small_dataset):
        img = small_dataset[0][0].image
        write_pgm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.ppm"), img)
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P5\n64 64\n255\n")

    def test_pgm_comment_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x00\xff")
        assert read_pgm(tmp_path / "c.pgm")[:, :, 0].tolist() == [[0.0, 1.0]]

    def test_not_pgm(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "x.pgm")

    def test_dataset_round_trip(self, tmp_path, small_dataset):
        train, test = small_dataset
        save_dataset(tmp_path, SMALL, train, test)
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["config"]["n_train"] == 64
        header = (tmp_path / "train" / "labels.csv").read_text().splitlines()[0]
        assert header == "index,label,x_min,y_min,x_max,y_max"
        cfg, train2, test2 = load_dataset(tmp_path)
        assert cfg == SMALL
        for a, b in zip(train + test, train2 + test2):
            assert (a.label, a.gt_region, a.seed) == (b.label, b.gt_region, b.seed)
            np.testing.assert_array_equal(a.image, b.image)
        assert isinstance(train2[0].gt_region, Region)
