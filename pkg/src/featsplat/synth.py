"""Synthetic deforming-blob scenes rendered by the engine's own forward pass.

Each blob is one Gaussian with scripted drift plus sinusoidal motion and a
class id. Teacher feature maps blend per-class orthogonal channel patterns
with the same compositing weights as color; ground-truth labels take the
class with the largest per-pixel weight mass. Everything is a deterministic
function of the seed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .errors import ConfigurationError
from .gaussians import CameraFrame, GaussianCloud, logit
from .rasterizer import RasterConfig, render
from .semantic import FeatureMap, fit_prototypes, resize_bilinear, segment


@dataclass
class SyntheticSceneParams:
    seed: int = 0
    n_frames: int = 20
    height: int = 64
    width: int = 64
    n_blobs: int = 8
    n_classes: int = 4
    teacher_channels: int = 16
    feature_height: int = 32
    feature_width: int = 32
    focal: float = 0.0            # 0 = one focal length per image width
    depth_mean: float = 3.0
    depth_spread: float = 0.45
    frustum_fill: float = 0.65    # fraction of the near-plane half-extent blobs cover
    blob_scale: tuple = (0.2, 0.3)
    opacity: float = 0.96
    drift: float = 0.18
    wobble: float = 0.12
    feature_amplitude: float = 1.0  # L1 norm of each class pattern

    def __post_init__(self):
        if self.n_frames < 1 or self.n_blobs < 1:
            raise ConfigurationError("need at least one frame and one blob")
        if self.n_classes > self.teacher_channels - 2:
            raise ConfigurationError(
                "need teacher_channels >= n_classes + 2 (background pattern)")
        if self.focal <= 0:
            self.focal = float(self.width)


def class_patterns(params):
    """Orthogonal teacher vectors with L1 norm feature_amplitude.

    Rows 0..n_classes-1 are the class patterns; the last row is the background
    pattern composited with the residual transmittance. Mutually orthogonal
    patterns make the cosine decision boundary between a class and background
    fall where the class weight mass crosses one half, matching the label rule.
    """
    size = 1
    while size < params.teacher_channels:
        size *= 2
    rows = hadamard(size)[1:params.n_classes + 2, :params.teacher_channels]
    rows = rows.astype(np.float64)
    return rows * (params.feature_amplitude / np.abs(rows).sum(axis=1, keepdims=True))


@dataclass
class SyntheticScene:
    params: SyntheticSceneParams
    base_positions: np.ndarray
    velocities: np.ndarray
    wobble_amp: np.ndarray
    wobble_phase: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    class_ids: np.ndarray
    patterns: np.ndarray

    @classmethod
    def create(cls, params):
        rng = np.random.default_rng(params.seed)
        n = params.n_blobs
        grid = int(np.ceil(np.sqrt(n)))
        ix = np.arange(n) % grid
        iy = np.arange(n) // grid
        # keep blobs (and their scripted motion) inside the camera frustum
        z_lo = params.depth_mean - params.depth_spread
        span_x = params.frustum_fill * 0.5 * params.width / params.focal * z_lo
        span_y = params.frustum_fill * 0.5 * params.height / params.focal * z_lo
        base = np.zeros((n, 3))
        base[:, 0] = (ix - (grid - 1) / 2) / max(grid - 1, 1) * 2 * span_x
        base[:, 1] = (iy - (grid - 1) / 2) / max(grid - 1, 1) * 2 * span_y
        base[:, :2] += rng.uniform(-0.08, 0.08, size=(n, 2))
        base[:, 2] = params.depth_mean + rng.uniform(-1, 1, n) * params.depth_spread
        vel = rng.uniform(-1, 1, size=(n, 3)) * params.drift
        vel[:, 2] *= 0.3
        amp = rng.uniform(0.4, 1.0, size=(n, 3)) * params.wobble
        amp[:, 2] *= 0.3
        phase = rng.uniform(0, 2 * np.pi, size=(n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        log_scales = np.log(rng.uniform(*params.blob_scale, size=(n, 3)))
        hues = (np.arange(n) / n + rng.uniform(0, 1 / n)) % 1.0
        colors = _hsv_palette(hues)
        class_ids = 1 + np.arange(n) % params.n_classes
        return cls(params=params, base_positions=base, velocities=vel,
                   wobble_amp=amp, wobble_phase=phase, rotations=quats,
                   log_scales=log_scales, colors=colors, class_ids=class_ids,
                   patterns=class_patterns(params))

    def positions_at(self, t):
        return (self.base_positions
                + self.velocities * (t - 0.5)
                + self.wobble_amp * np.sin(2 * np.pi * t + self.wobble_phase))

    def cloud_at(self, t):
        """Scripted cloud whose feature rows carry [pattern | class one-hot]."""
        n = self.params.n_blobs
        onehot = np.zeros((n, self.params.n_classes))
        onehot[np.arange(n), self.class_ids - 1] = 1.0
        feats = np.concatenate([self.patterns[self.class_ids - 1], onehot], axis=1)
        return GaussianCloud(
            positions=self.positions_at(t),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=np.full(n, float(logit(self.params.opacity))),
            colors_raw=self.colors.copy(),
            features=feats,
        )

    def camera(self):
        p = self.params
        K = np.array([
            [p.focal, 0.0, (p.width - 1) / 2],
            [0.0, p.focal, (p.height - 1) / 2],
            [0.0, 0.0, 1.0],
        ])
        return K, np.eye(4)

    def frame_times(self):
        n = self.params.n_frames
        return np.zeros(1) if n == 1 else np.arange(n) / (n - 1)

    def render_frame(self, t):
        """Ground-truth data for one timestamp.

        Depth is the alpha-normalized blend (true surface depth at opaque
        pixels). Labels come from the engine's own prototype decoder applied
        to the full-resolution teacher field, seeded by the dominant-weight
        rule, so the ground truth and any well-distilled rendering share one
        decision geometry.
        """
        p = self.params
        K, T = self.camera()
        cloud = self.cloud_at(t)
        frame = CameraFrame(K=K, T=T, time=float(t),
                            image=np.zeros((p.height, p.width, 3)),
                            depth=np.zeros((p.height, p.width)),
                            mask=np.ones((p.height, p.width), dtype=bool))
        out = render(cloud, frame, RasterConfig(with_features=True))
        ct = p.teacher_channels
        depth = np.where(out.alpha > 1e-12, out.depth / np.maximum(out.alpha, 1e-12), 0.0)
        bg_filled = (out.feature[:, :, :ct]
                     + (1.0 - out.alpha)[:, :, None] * self.patterns[-1])
        teacher = resize_bilinear(bg_filled, (p.feature_height, p.feature_width))
        mass = out.feature[:, :, ct:]
        seed_labels = np.where(
            (out.alpha >= 0.5) & (mass.max(axis=2) > 0),
            np.argmax(mass, axis=2) + 1, 0).astype(np.uint8)
        protos = fit_prototypes([bg_filled], [seed_labels],
                                include_background=True)
        labels = segment(bg_filled, protos).astype(np.uint8)
        return {
            "image": np.clip(out.color, 0.0, 1.0),
            "depth": depth,
            "mask": np.ones((p.height, p.width), dtype=bool),
            "features": FeatureMap(np.transpose(teacher, (2, 0, 1))),
            "labels": labels,
            "alpha": out.alpha,
        }


def _hsv_palette(hues):
    """Saturated distinct colors from hue values in [0, 1)."""
    h6 = hues * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    v, s = 0.95, 0.85
    q = v * (1 - s * f)
    tt = v * (1 - s * (1 - f))
    pp = np.full_like(f, v * (1 - s))
    vv = np.full_like(f, v)
    table = np.stack([
        np.stack([vv, tt, pp], 1), np.stack([q, vv, pp], 1),
        np.stack([pp, vv, tt], 1), np.stack([pp, q, vv], 1),
        np.stack([tt, pp, vv], 1), np.stack([vv, pp, q], 1),
    ])
    return table[i, np.arange(len(hues))]
