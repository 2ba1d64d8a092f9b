"""Teacher feature maps, the channel-aligning pointwise decoder, the feature
loss, and the built-in prototype segmenter with its metrics.

Feature file container (bit-exact): magic "FE4D", format version u16 LE,
u32 LE channel/height/width counts, then C*H*W float32 LE values stored
channel-major (c, then row, then column).
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"FE4D"
FORMAT_VERSION = 1


@dataclass
class FeatureMap:
    """Dense C x H x W teacher feature map (float32 in memory and on disk)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigurationError("feature map must be [C, H, W] with positive dims")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def hwc(self):
        """Float64 [H, W, C] view for arithmetic."""
        return np.transpose(self.data, (1, 2, 0)).astype(np.float64)


def save_feature_map(path, fmap):
    header = MAGIC + struct.pack("<HIII", FORMAT_VERSION, fmap.channels,
                                 fmap.height, fmap.width)
    payload = fmap.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_feature_map(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic in {path!r}", offset=0)
    if len(blob) < 18:
        raise FormatError(f"truncated header in {path!r}", offset=len(blob))
    version, c, h, w = struct.unpack("<HIII", blob[4:18])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    expected = 18 + 4 * c * h * w
    if len(blob) != expected:
        raise FormatError(
            f"payload size mismatch: have {len(blob)} bytes, expected {expected}",
            offset=min(len(blob), expected),
        )
    data = np.frombuffer(blob[18:], dtype="<f4").reshape(c, h, w)
    return FeatureMap(data=data.copy())


# ---------------------------------------------------------------------------
# bilinear resize (shared by the decoder and the synthetic data path)
# ---------------------------------------------------------------------------

def _axis_weights(n_in, n_out):
    """Corner-aligned source indices/weights for 1-d linear resampling."""
    if n_out == 1:
        pos = np.array([0.5 * (n_in - 1)])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_in - 2, 0))
    frac = pos - lo
    return lo, frac


def resize_bilinear(img, out_hw):
    """Resize [H, W, C] to out_hw with corner-aligned bilinear interpolation."""
    hi, wi = img.shape[0], img.shape[1]
    ho, wo = out_hw
    ylo, yf = _axis_weights(hi, ho)
    xlo, xf = _axis_weights(wi, wo)
    yf = yf[:, None, None]
    rows = img[ylo] * (1 - yf) + img[np.minimum(ylo + 1, hi - 1)] * yf
    xf = xf[None, :, None]
    return rows[:, xlo] * (1 - xf) + rows[:, np.minimum(xlo + 1, wi - 1)] * xf


def resize_bilinear_backward(d_out, in_hw):
    """Adjoint of resize_bilinear: scatter output grads back to the input grid."""
    hi, wi = in_hw
    ho, wo = d_out.shape[0], d_out.shape[1]
    ylo, yf = _axis_weights(hi, ho)
    xlo, xf = _axis_weights(wi, wo)
    xf = xf[None, :, None]
    d_rows = np.zeros((ho, wi) + d_out.shape[2:])
    np.add.at(d_rows, (slice(None), xlo), d_out * (1 - xf))
    np.add.at(d_rows, (slice(None), np.minimum(xlo + 1, wi - 1)), d_out * xf)
    yf = yf[:, None, None]
    d_in = np.zeros((hi, wi) + d_out.shape[2:])
    np.add.at(d_in, (ylo,), d_rows * (1 - yf))
    np.add.at(d_in, (np.minimum(ylo + 1, hi - 1),), d_rows * yf)
    return d_in


# ---------------------------------------------------------------------------
# pointwise decoder
# ---------------------------------------------------------------------------

@dataclass
class PointwiseDecoder:
    """Per-pixel affine map from rendered channels N to teacher channels C_t."""

    weight: np.ndarray  # [C_t, N]
    bias: np.ndarray    # [C_t]

    @classmethod
    def create(cls, teacher_channels, rendered_channels, rng):
        bound = np.sqrt(6.0 / rendered_channels)
        return cls(
            weight=rng.uniform(-bound, bound, size=(teacher_channels, rendered_channels)),
            bias=np.zeros(teacher_channels),
        )

    def param_arrays(self):
        return {"decoder.weight": self.weight, "decoder.bias": self.bias}


def decode_features(decoder, rendered, out_hw):
    out, _ = decode_features_with_cache(decoder, rendered, out_hw)
    return out


def decode_features_with_cache(decoder, rendered, out_hw):
    """Bilinear resize of the rendered [H, W, N] map, then W v + b per pixel."""
    if rendered.shape[2] != decoder.weight.shape[1]:
        raise ConfigurationError(
            f"rendered channels {rendered.shape[2]} != decoder input {decoder.weight.shape[1]}"
        )
    resized = resize_bilinear(rendered, out_hw)
    out = resized @ decoder.weight.T + decoder.bias
    return out, {"resized": resized, "in_hw": rendered.shape[:2]}


def decode_features_backward(decoder, cache, d_out):
    """Returns (d_rendered, d_weight, d_bias)."""
    resized = cache["resized"]
    d_bias = d_out.sum(axis=(0, 1))
    d_weight = np.einsum("hwc,hwn->cn", d_out, resized)
    d_resized = d_out @ decoder.weight
    d_rendered = resize_bilinear_backward(d_resized, cache["in_hw"])
    return d_rendered, d_weight, d_bias


def feature_loss(pred, gt):
    """Mean over pixels of the channel-summed L1 difference."""
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    h, w = pred.shape[0], pred.shape[1]
    return float(np.sum(np.abs(pred - gt)) / (h * w))


def feature_loss_backward(pred, gt):
    h, w = pred.shape[0], pred.shape[1]
    return np.sign(pred - gt) / (h * w)


# ---------------------------------------------------------------------------
# prototype segmentation
# ---------------------------------------------------------------------------

@dataclass
class ClassPrototypes:
    """Unit-norm class mean vectors in teacher feature space.

    An optional background vector competes in the argmax; without it, pixels
    fall back to background purely via the cosine floor `threshold`.
    """

    class_ids: np.ndarray   # [n] ints, ascending, background (0) excluded
    vectors: np.ndarray     # [n, C]
    threshold: float = 0.5  # cosine floor below which pixels become background
    background: np.ndarray = None  # optional [C] unit vector for label 0


def nearest_labels(labels, out_hw):
    """Nearest-neighbour resample of an integer label map."""
    h, w = labels.shape
    ho, wo = out_hw
    ys = np.clip(np.round(np.arange(ho) * (h - 1) / max(ho - 1, 1)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.round(np.arange(wo) * (w - 1) / max(wo - 1, 1)).astype(np.int64), 0, w - 1)
    return labels[np.ix_(ys, xs)]


def fit_prototypes(feature_maps, label_maps, threshold=0.5,
                   include_background=False):
    """Mean teacher-space vector per class over all maps, unit-normalized.

    Labels are nearest-neighbour resampled to each map's resolution; classes
    with no member pixels are dropped with a warning. With
    include_background, label-0 pixels fit an extra vector that competes in
    the argmax (useful when the teacher carries background semantics).
    """
    sums, counts = {}, {}
    for fmap, labels in zip(feature_maps, label_maps):
        hwc = fmap.hwc() if isinstance(fmap, FeatureMap) else np.asarray(fmap, dtype=np.float64)
        lab = nearest_labels(labels, hwc.shape[:2])
        for cid in np.unique(lab):
            if cid == 0 and not include_background:
                continue
            sel = lab == cid
            sums[int(cid)] = sums.get(int(cid), 0.0) + hwc[sel].sum(axis=0)
            counts[int(cid)] = counts.get(int(cid), 0) + int(sel.sum())
    ids, vecs = [], []
    background = None
    for cid in sorted(sums):
        mean = sums[cid] / counts[cid]
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            warnings.warn(f"class {cid} has a zero mean feature; excluded")
            continue
        if cid == 0:
            background = mean / norm
            continue
        ids.append(cid)
        vecs.append(mean / norm)
    if not ids:
        warnings.warn("no classes with member pixels; prototypes are empty")
        return ClassPrototypes(class_ids=np.empty(0, dtype=np.int64),
                               vectors=np.empty((0, 0)), threshold=threshold,
                               background=background)
    return ClassPrototypes(class_ids=np.asarray(ids, dtype=np.int64),
                           vectors=np.stack(vecs), threshold=threshold,
                           background=background)


def segment(features, protos):
    """Per-pixel argmax of cosine similarity; below-threshold pixels -> 0.

    Exact similarity ties resolve to the lower class id. When the prototypes
    carry a background vector it joins the competition and its wins map to 0.
    """
    if protos.class_ids.size == 0:
        raise ConfigurationError("prototypes are empty")
    hwc = features.hwc() if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(hwc, axis=2)
    safe = np.maximum(norms, 1e-12)
    sims = (hwc @ protos.vectors.T) / safe[:, :, None]
    best = np.argmax(sims, axis=2)
    best_sim = np.take_along_axis(sims, best[:, :, None], axis=2)[:, :, 0]
    labels = protos.class_ids[best]
    labels[best_sim < protos.threshold] = 0
    if protos.background is not None:
        bg_sim = (hwc @ protos.background) / safe
        labels[bg_sim >= best_sim] = 0
    labels[norms < 1e-12] = 0
    return labels


def seg_metrics(pred, gt, classes):
    """Confusion-based IoU/DSC/recall/precision per class plus a
    support-weighted aggregate. Empty denominators score 1.0 (vacuous)."""
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    per_class = {}
    weights, agg = [], []
    for cid in classes:
        tp = int(np.count_nonzero((pred == cid) & (gt == cid)))
        fp = int(np.count_nonzero((pred == cid) & (gt != cid)))
        fn = int(np.count_nonzero((pred != cid) & (gt == cid)))
        iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        dsc = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        precision = tp / (tp + fp) if tp + fp else 1.0
        if abs(dsc - 2 * iou / (1 + iou)) > 1e-12:
            raise AssertionError("DSC / IoU consistency check failed")
        per_class[cid] = {"iou": iou, "dsc": dsc, "recall": recall,
                          "precision": precision, "support": tp + fn}
        if tp + fn:
            weights.append(tp + fn)
            agg.append((iou, dsc, recall, precision))
    if weights:
        wsum = float(sum(weights))
        mean = [sum(w * m[i] for w, m in zip(weights, agg)) / wsum for i in range(4)]
    else:
        mean = [1.0, 1.0, 1.0, 1.0]
    aggregate = dict(zip(("iou", "dsc", "recall", "precision"), mean))
    return per_class, aggregate
