import os

import numpy as np
import pytest

from featsplat.datasets import (
    load_dataset,
    load_png_depth16,
    quantize_unit_image,
    save_png_depth16,
    split_frames,
    synth_generate,
)
from featsplat.errors import ConfigurationError, DataError
from featsplat.synth import SyntheticScene, SyntheticSceneParams, class_patterns


def small_params(**kw):
    base = dict(seed=7, n_frames=3, height=32, width=32, n_blobs=5,
                n_classes=3, teacher_channels=8, feature_height=16,
                feature_width=16)
    base.update(kw)
    return SyntheticSceneParams(**base)


def dataset_bytes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in sorted(names):
            p = os.path.join(dirpath, name)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_fixed_seed_gives_byte_identical_datasets(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_generate(small_params(), str(a))
    synth_generate(small_params(), str(b))
    assert dataset_bytes(a) == dataset_bytes(b)


def test_zero_motion_script_freezes_frames(tmp_path):
    params = small_params(drift=0.0, wobble=0.0)
    synth_generate(params, str(tmp_path / "d"))
    frames = load_dataset(str(tmp_path / "d"))
    for fr in frames[1:]:
        assert np.array_equal(fr.image, frames[0].image)
        assert np.array_equal(fr.depth, frames[0].depth)


def test_blob_center_depth_matches_script():
    params = small_params(opacity=0.995, n_blobs=3)
    scene = SyntheticScene.create(params)
    t = 0.5
    fd = scene.render_frame(t)
    K, _ = scene.camera()
    pos = scene.positions_at(t)
    for b in range(params.n_blobs):
        u = K[0, 0] * pos[b, 0] / pos[b, 2] + K[0, 2]
        v = K[1, 1] * pos[b, 1] / pos[b, 2] + K[1, 2]
        ui, vi = int(round(u)), int(round(v))
        if not (0 <= ui < params.width and 0 <= vi < params.height):
            continue
        if fd["alpha"][vi, ui] < 0.9:   # occluded by another blob
            continue
        assert abs(fd["depth"][vi, ui] - pos[b, 2]) < 1e-3 * pos[b, 2] + 5e-3


def test_class_patterns_orthogonal_fixed_l1():
    params = small_params(feature_amplitude=2.0)
    pats = class_patterns(params)
    assert pats.shape == (4, 8)  # three classes plus the background row
    np.testing.assert_allclose(np.abs(pats).sum(axis=1), 2.0, rtol=1e-12)
    gram = pats @ pats.T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-12


def test_labels_cover_every_class(tmp_path):
    synth_generate(small_params(), str(tmp_path / "d"))
    frames = load_dataset(str(tmp_path / "d"))
    seen = set()
    for fr in frames:
        seen.update(np.unique(fr.labels).tolist())
    assert {1, 2, 3}.issubset(seen)


def test_dataset_missing_images_rejected(tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path))


def test_depth16_png_roundtrip(tmp_path, rng):
    depth = rng.uniform(0.0, 5.0, size=(8, 8))
    path = tmp_path / "d.png"
    save_png_depth16(path, depth, meters_per_unit=0.001)
    back = load_png_depth16(path, meters_per_unit=0.001)
    assert np.abs(back - depth).max() <= 0.0005 + 1e-12


def test_quantize_matches_png_roundtrip(tmp_path, rng):
    from featsplat.datasets import load_png_rgb, save_png_rgb
    img = rng.uniform(size=(9, 9, 3))
    p = tmp_path / "q.png"
    save_png_rgb(p, img)
    assert np.array_equal(load_png_rgb(p), quantize_unit_image(img))


def test_every8_split_on_63_frames():
    train, test = split_frames(63, "every8")
    assert test.tolist() == [0, 8, 16, 24, 32, 40, 48, 56]
    assert len(train) == 55
    assert set(train.tolist()).isdisjoint(test.tolist())
    both_train, both_test = split_frames(5, "all")
    assert both_train.tolist() == both_test.tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ConfigurationError):
        split_frames(10, "bogus")
