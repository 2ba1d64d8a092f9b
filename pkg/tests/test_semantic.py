import numpy as np
import pytest

from featsplat.errors import ConfigurationError, FormatError
from featsplat.semantic import (
    FeatureMap,
    PointwiseDecoder,
    decode_features,
    decode_features_backward,
    decode_features_with_cache,
    feature_loss,
    feature_loss_backward,
    fit_prototypes,
    load_feature_map,
    nearest_labels,
    resize_bilinear,
    save_feature_map,
    seg_metrics,
    segment,
)
from oracles import central_difference, rel_err


# feature file container -------------------------------------------------------

def test_zero_payload_roundtrip(tmp_path):
    fmap = FeatureMap(np.zeros((256, 51, 64), dtype=np.float32))
    path = tmp_path / "zero.feat"
    save_feature_map(path, fmap)
    loaded = load_feature_map(path)
    assert loaded.channels == 256 and loaded.height == 51 and loaded.width == 64
    assert np.array_equal(loaded.data, fmap.data)


def test_roundtrip_bit_identical(tmp_path, rng):
    fmap = FeatureMap(rng.normal(size=(256, 64, 64)).astype(np.float32))
    p1, p2 = tmp_path / "a.feat", tmp_path / "b.feat"
    save_feature_map(p1, fmap)
    save_feature_map(p2, load_feature_map(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.feat"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError) as err:
        load_feature_map(path)
    assert err.value.offset == 0


def test_truncated_payload_rejected(tmp_path, rng):
    path = tmp_path / "trunc.feat"
    save_feature_map(path, FeatureMap(rng.normal(size=(4, 8, 8)).astype(np.float32)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(FormatError):
        load_feature_map(path)


# pointwise decoder --------------------------------------------------------------

def test_identity_block_preserves_channels(rng):
    n, ct = 4, 7
    dec = PointwiseDecoder(weight=np.vstack([np.eye(n), np.zeros((ct - n, n))]),
                           bias=np.zeros(ct))
    rendered = rng.normal(size=(6, 5, n))
    out = decode_features(dec, rendered, (6, 5))
    np.testing.assert_allclose(out[:, :, :n], rendered, atol=1e-12)
    np.testing.assert_allclose(out[:, :, n:], 0.0, atol=1e-12)


def test_zero_weight_gives_constant_bias(rng):
    dec = PointwiseDecoder(weight=np.zeros((3, 5)), bias=np.array([1.0, -2.0, 0.5]))
    out = decode_features(dec, rng.normal(size=(4, 4, 5)), (9, 8))
    assert out.shape == (9, 8, 3)
    np.testing.assert_allclose(out, np.tile([1.0, -2.0, 0.5], (9, 8, 1)), atol=1e-12)


def test_resize_corner_alignment(rng):
    img = rng.normal(size=(5, 7, 2))
    up = resize_bilinear(img, (9, 13))
    np.testing.assert_allclose(up[0, 0], img[0, 0], atol=1e-12)
    np.testing.assert_allclose(up[-1, -1], img[-1, -1], atol=1e-12)
    same = resize_bilinear(img, (5, 7))
    np.testing.assert_allclose(same, img, atol=1e-12)


def test_decoder_backward_finite_differences(rng):
    dec = PointwiseDecoder.create(5, 3, rng)
    rendered = rng.normal(size=(6, 7, 3))
    up = rng.normal(size=(4, 9, 5))

    def loss():
        return float(np.sum(up * decode_features(dec, rendered, (4, 9))))

    _, cache = decode_features_with_cache(dec, rendered, (4, 9))
    d_rend, dw, db = decode_features_backward(dec, cache, up)
    for arr, analytic in [(rendered, d_rend), (dec.weight, dw), (dec.bias, db)]:
        fd = central_difference(loss, arr, np.arange(arr.size))
        assert rel_err(analytic.reshape(-1), fd).max() < 1e-3


# feature loss --------------------------------------------------------------------

def test_feature_loss_zero_on_equal(rng):
    x = rng.normal(size=(5, 5, 8))
    assert feature_loss(x, x.copy()) == 0.0


def test_feature_loss_hand_sum():
    pred = np.array([[[0.5, -0.5]]])
    gt = np.zeros((1, 1, 2))
    assert feature_loss(pred, gt) == pytest.approx(1.0)


def test_feature_loss_matches_elementwise_oracle(rng):
    a = rng.normal(size=(6, 4, 3))
    b = rng.normal(size=(6, 4, 3))
    expect = 0.0
    for i in range(6):
        for j in range(4):
            for c in range(3):
                expect += abs(a[i, j, c] - b[i, j, c])
    expect /= 6 * 4
    assert feature_loss(a, b) == pytest.approx(expect, rel=1e-12)
    assert feature_loss(a, b) == feature_loss(b, a)
    assert feature_loss(a, b) >= 0.0


def test_feature_loss_gradient(rng):
    a = rng.normal(size=(3, 4, 2))
    b = rng.normal(size=(3, 4, 2))
    g = feature_loss_backward(a, b)
    fd = central_difference(lambda: feature_loss(a, b), a, np.arange(a.size))
    assert rel_err(g.reshape(-1), fd).max() < 1e-3


def test_feature_loss_shape_mismatch():
    with pytest.raises(ConfigurationError):
        feature_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


# prototypes and segmentation ------------------------------------------------------

def test_prototype_of_constant_class_is_normalized_vector():
    v = np.array([3.0, 4.0, 0.0])
    fmap = np.tile(v, (4, 4, 1))
    labels = np.full((4, 4), 2, dtype=np.int64)
    protos = fit_prototypes([fmap], [labels])
    assert protos.class_ids.tolist() == [2]
    np.testing.assert_allclose(protos.vectors[0], v / 5.0, atol=1e-12)


def test_prototypes_recover_separated_clusters(rng):
    a = np.array([1.0, 0.0, 0.0, 0.0])
    b = np.array([0.0, 0.0, 1.0, 0.0])
    fmap = np.zeros((4, 6, 4))
    labels = np.zeros((4, 6), dtype=np.int64)
    fmap[:2] = a + rng.normal(size=(2, 6, 4)) * 1e-3
    labels[:2] = 1
    fmap[2:] = b + rng.normal(size=(2, 6, 4)) * 1e-3
    labels[2:] = 2
    protos = fit_prototypes([fmap], [labels])
    np.testing.assert_allclose(protos.vectors[0], a, atol=1e-2)
    np.testing.assert_allclose(protos.vectors[1], b, atol=1e-2)


def test_empty_mask_warns():
    with pytest.warns(UserWarning):
        protos = fit_prototypes([np.ones((2, 2, 3))], [np.zeros((2, 2), dtype=int)])
    assert protos.class_ids.size == 0


def test_segment_assigns_matching_prototype(rng):
    protos = fit_prototypes(
        [np.tile(np.array([1.0, 0, 0]), (2, 2, 1)),
         np.tile(np.array([0, 1.0, 0]), (2, 2, 1))],
        [np.full((2, 2), 1, dtype=int), np.full((2, 2), 5, dtype=int)])
    fmap = np.zeros((1, 3, 3))
    fmap[0, 0] = [2.0, 0.1, 0]    # class 1
    fmap[0, 1] = [0.0, 3.0, 0]    # class 5
    fmap[0, 2] = [0.1, 0.1, 9.0]  # far from both -> background
    labels = segment(fmap, protos)
    assert labels.tolist() == [[1, 5, 0]]


def test_segment_scale_invariance(rng):
    fmap = rng.normal(size=(5, 5, 4))
    labels = rng.integers(0, 3, size=(5, 5))
    protos = fit_prototypes([fmap], [labels])
    a = segment(fmap, protos)
    b = segment(fmap * 9.0, protos)
    assert np.array_equal(a, b)


def test_segment_all_below_threshold_is_background(rng):
    protos = fit_prototypes([np.tile(np.array([1.0, 0.0]), (2, 2, 1))],
                            [np.ones((2, 2), dtype=int)])
    fmap = np.tile(np.array([0.0, 1.0]), (3, 3, 1))  # orthogonal to prototype
    assert np.all(segment(fmap, protos) == 0)


def test_nearest_labels_downsample():
    labels = np.arange(16).reshape(4, 4)
    small = nearest_labels(labels, (2, 2))
    assert small.tolist() == [[0, 3], [12, 15]]


# metrics ---------------------------------------------------------------------------

def test_perfect_prediction_scores_one(rng):
    gt = rng.integers(0, 4, size=(8, 8))
    per_class, agg = seg_metrics(gt.copy(), gt, classes=[1, 2, 3])
    for m in per_class.values():
        assert m["iou"] == m["dsc"] == m["recall"] == m["precision"] == 1.0
    assert agg["iou"] == 1.0


def test_complement_prediction_scores_zero():
    gt = np.array([[1, 1], [0, 0]])
    pred = 1 - gt
    per_class, _ = seg_metrics(pred, gt, classes=[1])
    assert per_class[1]["iou"] == 0.0
    assert per_class[1]["dsc"] == 0.0


def test_hand_confusion_2x2():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.array([[1, 0], [0, 0]])
    per_class, _ = seg_metrics(pred, gt, classes=[1])
    assert per_class[1]["iou"] == pytest.approx(0.5)
    assert per_class[1]["dsc"] == pytest.approx(2 / 3)
    assert per_class[1]["recall"] == pytest.approx(0.5)
    assert per_class[1]["precision"] == pytest.approx(1.0)


def test_dsc_iou_identity_random(rng):
    for _ in range(10):
        gt = rng.integers(0, 5, size=(16, 16))
        pred = rng.integers(0, 5, size=(16, 16))
        per_class, _ = seg_metrics(pred, gt, classes=[1, 2, 3, 4])
        for m in per_class.values():
            assert m["dsc"] == pytest.approx(2 * m["iou"] / (1 + m["iou"]), abs=1e-12)


def test_aggregate_is_support_weighted():
    gt = np.array([1] * 30 + [2] * 10)
    pred = np.array([1] * 30 + [1] * 10)  # class 2 fully missed
    per_class, agg = seg_metrics(pred, gt, classes=[1, 2])
    expect = (30 * per_class[1]["iou"] + 10 * per_class[2]["iou"]) / 40
    assert agg["iou"] == pytest.approx(expect)
