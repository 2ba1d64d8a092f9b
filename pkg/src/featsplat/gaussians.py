"""Canonical Gaussian cloud: parameter storage, covariance math, RGB-D
initialization, and adaptive density control.

Raw parameters (quaternions, log-scales, opacity/color logits) are stored
unconstrained; activations are applied on read so additive deformation deltas
can never produce invalid values.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ConfigurationError,
    DataError,
    DegenerateRotationError,
    NumericalError,
)

INIT_OPACITY = 0.1
COV_REGULARIZATION = 1e-9


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Struct-of-arrays cloud of K Gaussians with N semantic channels each."""

    positions: np.ndarray      # [K, 3] world units
    rotations: np.ndarray      # [K, 4] raw quaternions (w, x, y, z)
    log_scales: np.ndarray     # [K, 3]
    opacity_logits: np.ndarray  # [K]
    colors_raw: np.ndarray     # [K, 3]; clamped to [0, 1] on read
    features: np.ndarray       # [K, N]

    def __len__(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def colors(self):
        return np.clip(self.colors_raw, 0.0, 1.0)

    def unit_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateRotationError("quaternion norm below 1e-12")
        return self.rotations / norms

    def validate(self):
        for name in ("positions", "rotations", "log_scales", "opacity_logits",
                     "colors_raw", "features"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite entries in cloud.{name}")
        self.unit_rotations()

    def copy(self):
        return GaussianCloud(*(getattr(self, f).copy() for f in (
            "positions", "rotations", "log_scales", "opacity_logits",
            "colors_raw", "features")))

    def param_arrays(self):
        """Named raw parameter arrays, one per optimizer group."""
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors_raw": self.colors_raw,
            "features": self.features,
        }


@dataclass
class CameraFrame:
    """One posed RGB-D frame with optional teacher feature map."""

    K: np.ndarray              # [3, 3] intrinsics, pixels
    T: np.ndarray              # [4, 4] world-to-camera
    time: float                # normalized to [0, 1]
    image: np.ndarray          # [H, W, 3] in [0, 1]
    depth: np.ndarray          # [H, W] world units
    mask: np.ndarray           # [H, W] bool
    features: object = None    # optional FeatureMap teacher
    labels: np.ndarray = None  # optional [H, W] int class ids

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DataError("intrinsics must be 3x3 with positive focal lengths")
        if abs(np.linalg.det(K)) < 1e-12:
            raise DataError("intrinsics matrix is singular")
        T = np.asarray(self.T, dtype=np.float64)
        R = T[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise DataError("extrinsics rotation block is not orthonormal")
        if self.depth.shape != self.mask.shape:
            raise DataError("depth and mask shapes differ")
        if np.any(self.depth[self.mask] < 0):
            raise DataError("negative depth inside mask")
        self.K = K
        self.T = T

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


# ---------------------------------------------------------------------------
# quaternions and covariance
# ---------------------------------------------------------------------------

def quat_to_rotmats(q):
    """Unit quaternions [K, 4] (w, x, y, z) -> rotation matrices [K, 3, 3]."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_backward(q_unit, dL_dR):
    """Pull dL/dR [K, 3, 3] back to the unit quaternion: returns [K, 4]."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    g = dL_dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0]
              - 2 * x * g[:, 1, 1] - w * g[:, 1, 2] + z * g[:, 2, 0]
              + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
              + x * g[:, 1, 0] + z * g[:, 1, 2] - w * g[:, 2, 0]
              + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
              + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
              + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def normalize_quats(q):
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    return q / norms, norms


def normalize_backward(q_unit, norms, dL_dqunit):
    """Gradient through q_unit = q / |q|."""
    inner = np.sum(dL_dqunit * q_unit, axis=1, keepdims=True)
    return (dL_dqunit - inner * q_unit) / norms


def compose_covariances(quats, scales):
    """Batched Sigma = R diag(s)^2 R^T from raw quaternions and scales > 0."""
    if np.any(scales <= 0):
        raise ConfigurationError("scales must be strictly positive")
    q_unit, _ = normalize_quats(quats)
    R = quat_to_rotmats(q_unit)
    RS = R * scales[:, None, :]
    return RS @ np.swapaxes(RS, 1, 2)


def compose_covariance(q, s):
    """Single-Gaussian covariance from quaternion q and scale vector s."""
    return compose_covariances(np.asarray(q, dtype=np.float64)[None, :],
                               np.asarray(s, dtype=np.float64)[None, :])[0]


def covariance_backward(quats, log_scales, dL_dSigma):
    """Grads of Sigma = R diag(exp(ls))^2 R^T w.r.t. raw quats and log-scales."""
    q_unit, norms = normalize_quats(quats)
    R = quat_to_rotmats(q_unit)
    s = np.exp(log_scales)
    D = s * s  # diag entries [K, 3]
    Gs = dL_dSigma
    sym = Gs + np.swapaxes(Gs, 1, 2)
    # dL/dR = (G + G^T) R D
    dR = sym @ (R * D[:, None, :])
    # dL/d(ls_k) = 2 s_k^2 (R^T G R)_kk
    RtGR = np.einsum("kji,kjl,klm->kim", R, Gs, R)
    d_log_scales = 2.0 * D * np.einsum("kii->ki", RtGR)
    dq_unit = rotmat_backward(q_unit, dR)
    dq = normalize_backward(q_unit, norms, dq_unit)
    return dq, d_log_scales


def evaluate_gaussian(x, mu, sigma):
    """exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), with a 1e-9 I ridge before inversion."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    reg = np.asarray(sigma, dtype=np.float64) + COV_REGULARIZATION * np.eye(3)
    try:
        sol = np.linalg.solve(reg, d)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance singular after regularization: {exc}")
    return float(np.exp(-0.5 * d @ sol))


# ---------------------------------------------------------------------------
# initialization from posed RGB-D frames
# ---------------------------------------------------------------------------

def init_from_rgbd(frames, target_count, feature_dim=128, seed=0, min_depth=1e-6,
                   knn=3):
    """Back-project masked pixels of every frame and subsample to target_count.

    Pixel (row v, col u) with depth d maps to camera point d * K^-1 [u, v, 1]^T
    and then through T^-1 to world space. Colors come from the pixels, scales
    from the mean distance to the `knn` nearest neighbours, opacity starts at
    INIT_OPACITY, semantic features at zero.
    """
    if not frames:
        raise ConfigurationError("need at least one frame to initialize")
    if target_count <= 0:
        raise ConfigurationError("target_count must be positive")
    pts, cols = [], []
    for fr in frames:
        valid = fr.mask & (fr.depth > min_depth)
        vs, us = np.nonzero(valid)
        if vs.size == 0:
            continue
        d = fr.depth[vs, us]
        pix = np.stack([us, vs, np.ones_like(us)], axis=0).astype(np.float64)
        cam = np.linalg.solve(fr.K, pix) * d
        Tinv = np.linalg.inv(fr.T)
        world = (Tinv[:3, :3] @ cam + Tinv[:3, 3:4]).T
        pts.append(world)
        cols.append(fr.image[vs, us])
    if not pts:
        raise DataError("no masked pixels with positive depth in any frame")
    pts = np.concatenate(pts, axis=0)
    cols = np.concatenate(cols, axis=0)
    if pts.shape[0] > target_count:
        rng = np.random.default_rng(seed)
        keep = rng.choice(pts.shape[0], size=target_count, replace=False)
        keep.sort()
        pts, cols = pts[keep], cols[keep]

    k = pts.shape[0]
    tree = cKDTree(pts)
    nn = min(knn + 1, k)
    dist, _ = tree.query(pts, k=nn)
    if nn > 1:
        mean_nn = dist[:, 1:].mean(axis=1)
    else:
        mean_nn = np.full(k, 0.1)
    mean_nn = np.maximum(mean_nn, 1e-7)

    return GaussianCloud(
        positions=pts,
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (k, 1)),
        log_scales=np.log(mean_nn)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(k, float(logit(INIT_OPACITY))),
        colors_raw=np.clip(cols, 1e-4, 1.0 - 1e-4),  # keep off the clamp boundary
        features=np.zeros((k, feature_dim)),
    )


def scene_extent(cloud):
    """Radius used to scale density-control thresholds: half the aabb diagonal."""
    span = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    return float(0.5 * np.linalg.norm(span))


def scene_aabb(cloud, pad=0.05):
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return np.stack([lo - pad * span, hi + pad * span])


# ---------------------------------------------------------------------------
# adaptive density control
# ---------------------------------------------------------------------------

@dataclass
class ViewspaceGradStats:
    """Accumulated screen-space positional gradient norms per Gaussian."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, k):
        return cls(accum=np.zeros(k), count=np.zeros(k))

    def add(self, indices, norms):
        np.add.at(self.accum, indices, norms)
        np.add.at(self.count, indices, 1.0)

    def averages(self):
        return self.accum / np.maximum(self.count, 1.0)


@dataclass
class DensityControlConfig:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    split_factor: float = 1.6


def _remap_adam(adam_states, names, keep, n_new):
    if adam_states is None:
        return
    for name in names:
        st = adam_states.get(name)
        if st is None:
            continue
        pad_m = np.zeros((n_new,) + st.m.shape[1:])
        pad_v = np.zeros((n_new,) + st.v.shape[1:])
        st.m = np.concatenate([st.m[keep], pad_m], axis=0)
        st.v = np.concatenate([st.v[keep], pad_v], axis=0)


def densify_and_prune(cloud, grad_stats, iteration, cfg, extent, rng,
                      adam_states=None):
    """Clone small / split large high-gradient Gaussians, prune transparent ones.

    Mutates the cloud, the gradient stats (reset to the new size), and the
    per-row Adam moment buffers if given; returns a small report dict.
    """
    k = len(cloud)
    avg = grad_stats.averages()
    high = avg >= cfg.grad_threshold
    max_scale = cloud.scales().max(axis=1)
    small = max_scale <= cfg.percent_dense * extent
    clone_mask = high & small
    split_mask = high & ~small
    opac = cloud.opacities()
    prune_mask = opac < cfg.prune_opacity
    # parents of splits are replaced by their children, everything else survives
    keep = ~(prune_mask | split_mask)

    params = cloud.param_arrays()
    new_rows = {name: [] for name in params}

    clone_idx = np.nonzero(clone_mask & ~prune_mask)[0]
    for name, arr in params.items():
        new_rows[name].append(arr[clone_idx])

    split_idx = np.nonzero(split_mask & ~prune_mask)[0]
    if split_idx.size:
        q_unit, _ = normalize_quats(cloud.rotations[split_idx])
        R = quat_to_rotmats(q_unit)
        s = cloud.scales()[split_idx]
        for _ in range(2):
            samples = rng.standard_normal((split_idx.size, 3)) * s
            offsets = np.einsum("kij,kj->ki", R, samples)
            for name, arr in params.items():
                rows = arr[split_idx].copy()
                if name == "positions":
                    rows = rows + offsets
                elif name == "log_scales":
                    rows = rows - np.log(cfg.split_factor)
                new_rows[name].append(rows)

    added = sum(r.shape[0] for r in new_rows["positions"])
    for name, arr in params.items():
        stacked = [arr[keep]] + new_rows[name]
        setattr(cloud, name, np.concatenate(stacked, axis=0))
    _remap_adam(adam_states, params.keys(), keep, added)
    grad_stats.accum = np.zeros(len(cloud))
    grad_stats.count = np.zeros(len(cloud))
    cloud.validate()
    return {
        "iteration": iteration,
        "cloned": int(clone_idx.size),
        "split": int(split_idx.size),
        "pruned": int(np.count_nonzero(prune_mask)),
        "count": len(cloud),
    }


def prune_only(cloud, grad_stats, cfg, adam_states=None):
    """Standalone low-opacity prune used on the prune interval."""
    keep = cloud.opacities() >= cfg.prune_opacity
    params = cloud.param_arrays()
    for name, arr in params.items():
        setattr(cloud, name, arr[keep])
    _remap_adam(adam_states, params.keys(), keep, 0)
    grad_stats.accum = grad_stats.accum[keep]
    grad_stats.count = grad_stats.count[keep]
    return int(np.count_nonzero(~keep))


def reset_opacity(cloud, cap):
    """Clamp activated opacities to at most `cap` (in logit space)."""
    if not 0.0 < cap < 1.0:
        raise ConfigurationError("opacity cap must lie in (0, 1)")
    capped = np.minimum(cloud.opacities(), cap)
    cloud.opacity_logits = np.asarray(logit(capped))
