"""Directory loading, preprocessing, stratified splits and the synthetic generator."""

import numpy as np
import pytest
from PIL import Image

from surfuse.data import (
    DatasetError,
    DatasetWarning,
    ImageDecodeError,
    StratificationError,
    SynthSpec,
    load_directory,
    preprocess_image,
    resize_rgb,
    stratified_split,
    synth_generate,
    write_dataset,
)
from surfuse.features import image_features
from surfuse.tensor import ConfigError, make_rng


def write_png(path, rgb):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)


def make_tree(root, classes, n, size=8):
    rng = make_rng(0)
    for c in classes:
        for i in range(n):
            for side in ("vision", "tactile"):
                write_png(root / c / side / f"s{i}.png", rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


class TestLoadDirectory:
    def test_two_classes_three_pairs(self, tmp_path):
        make_tree(tmp_path, ["wood", "brick"], 3)
        m = load_directory(tmp_path)
        assert len(m) == 6
        assert m.classes == ["brick", "wood"]
        assert set(m.labels.tolist()) == {0, 1}

    def test_unpaired_file_excluded_with_warning(self, tmp_path):
        make_tree(tmp_path, ["a", "b"], 2)
        write_png(tmp_path / "a" / "vision" / "lonely.png", np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.warns(DatasetWarning, match="lonely"):
            m = load_directory(tmp_path)
        assert len(m) == 4
        assert all(s.sample_id != "lonely" for s in m.samples)

    def test_non_image_skipped_with_warning(self, tmp_path):
        make_tree(tmp_path, ["a", "b"], 2)
        (tmp_path / "a" / "vision" / "notes.txt").write_text("hello")
        with pytest.warns(DatasetWarning, match="notes.txt"):
            m = load_directory(tmp_path)
        assert len(m) == 4

    def test_undecodable_png_skipped(self, tmp_path):
        make_tree(tmp_path, ["a", "b"], 2)
        (tmp_path / "b" / "tactile" / "s0.png").write_bytes(b"not a png")
        with pytest.warns(DatasetWarning):
            m = load_directory(tmp_path)
        assert len(m) == 3

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_directory(tmp_path)
        with pytest.raises(DatasetError):
            load_directory(tmp_path / "missing")


class TestPreprocess:
    def test_same_size_resize_is_identity(self):
        img = make_rng(1).integers(0, 256, (3, 224, 224), dtype=np.uint8)
        assert resize_rgb(img, 224) is img

    def test_mid_gray_value(self):
        out = preprocess_image(np.full((3, 224, 224), 128, dtype=np.uint8), dtype=np.float64)
        np.testing.assert_allclose(out, (128 / 255 - 0.5) / 0.5)
        assert out[0, 0, 0] == pytest.approx(0.0039, abs=1e-4)

    def test_shape_always_224(self, tmp_path):
        write_png(tmp_path / "x.png", np.zeros((40, 70, 3), dtype=np.uint8))
        assert preprocess_image(tmp_path / "x.png").shape == (3, 224, 224)

    def test_undecodable_names_path(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"garbage")
        with pytest.raises(ImageDecodeError, match="bad.png"):
            preprocess_image(bad)

    def test_deterministic(self, tmp_path):
        write_png(tmp_path / "x.png", make_rng(2).integers(0, 256, (30, 30, 3), dtype=np.uint8))
        assert preprocess_image(tmp_path / "x.png").tobytes() == preprocess_image(tmp_path / "x.png").tobytes()


class TestStratifiedSplit:
    def test_paper_scale_counts(self):
        m = synth_generate(5, 1000, seed=0, spec=SynthSpec(size=8))
        train, test = stratified_split(m, 0.8, seed=1)
        np.testing.assert_array_equal(train.class_counts(), [800] * 5)
        np.testing.assert_array_equal(test.class_counts(), [200] * 5)

    def test_partition(self, small_manifest):
        train, test = stratified_split(small_manifest, 0.8, seed=3)
        ids_train = {s.sample_id for s in train.samples}
        ids_test = {s.sample_id for s in test.samples}
        assert not ids_train & ids_test
        assert ids_train | ids_test == {s.sample_id for s in small_manifest.samples}

    def test_deterministic(self, small_manifest):
        a = stratified_split(small_manifest, 0.8, seed=3)[0]
        b = stratified_split(small_manifest, 0.8, seed=3)[0]
        assert [s.sample_id for s in a.samples] == [s.sample_id for s in b.samples]

    @pytest.mark.parametrize("ratio", [0.5, 0.75, 0.8, 0.9])
    def test_fraction_within_one_sample(self, small_manifest, ratio):
        train, _ = stratified_split(small_manifest, ratio, seed=0)
        for n_train, n_all in zip(train.class_counts(), small_manifest.class_counts()):
            assert abs(n_train - ratio * n_all) <= 1

    def test_round_half_up(self):
        m = synth_generate(2, 10, seed=0, spec=SynthSpec(size=8))
        train, _ = stratified_split(m, 0.85, seed=0)
        np.testing.assert_array_equal(train.class_counts(), [9, 9])

    def test_singleton_class(self, small_manifest):
        keep = [i for i, s in enumerate(small_manifest.samples) if s.label != 1] + [
            next(i for i, s in enumerate(small_manifest.samples) if s.label == 1)
        ]
        with pytest.raises(StratificationError):
            stratified_split(small_manifest.subset(keep), 0.8, seed=0)


@pytest.fixture(scope="module")
def features():
    m = synth_generate(5, 60, seed=7, spec=SynthSpec(size=96))
    raw = np.stack([image_features(s.tactile) for s in m.samples])
    return raw, m.labels


class TestSynthetic:
    def test_counts(self):
        m = synth_generate(5, 100, seed=7, spec=SynthSpec(size=16))
        assert len(m) == 500
        np.testing.assert_array_equal(m.class_counts(), [100] * 5)

    def test_bit_identical_for_equal_seed(self):
        a = synth_generate(3, 10, seed=7, spec=SynthSpec(size=16))
        b = synth_generate(3, 10, seed=7, spec=SynthSpec(size=16))
        for x, y in zip(a.samples, b.samples):
            assert x.vision.tobytes() == y.vision.tobytes()
            assert x.tactile.tobytes() == y.tactile.tobytes()

    def test_degenerate_spec(self):
        with pytest.raises(ConfigError):
            synth_generate(1, 10, seed=0)
        with pytest.raises(ConfigError):
            synth_generate(3, 5, seed=0)

    def test_between_class_variance_dominates(self, features):
        raw, y = features
        grand = raw.mean(axis=0)
        between = np.mean([(raw[y == c].mean(axis=0) - grand) ** 2 for c in range(5)], axis=0)
        within = np.mean([raw[y == c].var(axis=0) for c in range(5)], axis=0)
        assert np.sum(between > within) >= 3

    def test_nearest_centroid_on_fresh_draw(self, features):
        raw, y = features
        fresh = synth_generate(5, 40, seed=99, spec=SynthSpec(size=96))
        test = np.stack([image_features(s.tactile) for s in fresh.samples])
        mu, sd = raw.mean(axis=0), raw.std(axis=0)
        centroids = np.stack([((raw[y == c] - mu) / sd).mean(axis=0) for c in range(5)])
        z = (test - mu) / sd
        pred = np.argmin(((z[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
        assert (pred == fresh.labels).mean() > 0.6

    def test_noise_modality(self):
        m = synth_generate(2, 10, seed=0, spec=SynthSpec(size=16, noise_modality="tactile"))
        clean = synth_generate(2, 10, seed=0, spec=SynthSpec(size=16))
        assert m.samples[0].vision.tobytes() == clean.samples[0].vision.tobytes()
        assert m.samples[0].tactile.tobytes() != clean.samples[0].tactile.tobytes()

    def test_write_then_load_roundtrip(self, tmp_path):
        m = synth_generate(2, 10, seed=1, spec=SynthSpec(size=16))
        write_dataset(m, tmp_path)
        back = load_directory(tmp_path)
        assert len(back) == len(m)
        lookup = {s.sample_id: s for s in m.samples}
        for s in back.samples:
            original = lookup[s.sample_id]
            assert np.asarray(Image.open(s.vision)).transpose(2, 0, 1).tobytes() == original.vision.tobytes()
            assert back.classes[s.label] == original.class_name
        assert (tmp_path / "manifest.json").is_file()
