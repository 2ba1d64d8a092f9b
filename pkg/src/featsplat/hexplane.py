"""Multi-resolution plane-factorized encoder over (x, y, z, t).

Six 2-d feature grids per resolution level cover every coordinate pair of the
normalized 4-d domain; a query bilinearly interpolates each plane, fuses the
six vectors by elementwise product, and concatenates levels. Plane order is
(x,y), (x,z), (x,t), (y,z), (y,t), (z,t) and level order follows the
configured multiplier list; both are fixed contracts.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation

PLANE_AXES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
TIME_AXIS = 3


@dataclass
class HexPlaneConfig:
    levels: tuple = (1, 2, 4, 8)
    base_resolution: tuple = (64, 64, 64, 100)
    out_dim: int = 64          # total latent width across levels
    feat_dim: int = 0          # per-level channel override; 0 = out_dim / levels
    # grids start at 1 +- noise: product fusion needs O(1) cells or the latent
    # (a product of six plane values) vanishes and no gradient reaches the grids
    init_scale: float = 0.1

    def channels_per_level(self):
        if self.feat_dim > 0:
            return self.feat_dim
        if self.out_dim % len(self.levels) != 0:
            raise ConfigurationError(
                f"out_dim {self.out_dim} not divisible by {len(self.levels)} levels; "
                "set feat_dim explicitly"
            )
        return self.out_dim // len(self.levels)


def _plane_resolution(cfg, level_mult, axes):
    res = []
    for a in axes:
        base = cfg.base_resolution[a]
        res.append(base if a == TIME_AXIS else level_mult * base)
    return tuple(res)


class HexPlaneField:
    """Trainable grids plus the scene box used to normalize query coordinates."""

    def __init__(self, cfg, aabb, rng):
        self.cfg = cfg
        self.aabb = np.asarray(aabb, dtype=np.float64)
        if self.aabb.shape != (2, 3) or np.any(self.aabb[1] <= self.aabb[0]):
            raise ConfigurationError("aabb must be [2, 3] with hi > lo")
        self.channels = cfg.channels_per_level()
        self.planes = []
        for mult in cfg.levels:
            level = []
            for axes in PLANE_AXES:
                ra, rb = _plane_resolution(cfg, mult, axes)
                if ra < 2 or rb < 2:
                    raise ConfigurationError("plane resolutions must be >= 2")
                level.append(1.0 + rng.uniform(-cfg.init_scale, cfg.init_scale,
                                               size=(ra, rb, self.channels)))
            self.planes.append(level)

    @property
    def latent_dim(self):
        return self.channels * len(self.cfg.levels)

    def param_arrays(self):
        out = {}
        for li, level in enumerate(self.planes):
            for pi, plane in enumerate(level):
                out[f"grid.l{li}.p{pi}"] = plane
        return out

    def set_param(self, name, arr):
        _, l, p = name.split(".")
        self.planes[int(l[1:])][int(p[1:])] = arr

    def normalized_coords(self, positions, t):
        """Map world positions + time into [0,1]^4 with clamping."""
        lo, hi = self.aabb[0], self.aabb[1]
        raw = (positions - lo) / (hi - lo)
        spatial = np.clip(raw, 0.0, 1.0)
        inside = (raw > 0.0) & (raw < 1.0)
        tcol = np.full((positions.shape[0], 1), np.clip(t, 0.0, 1.0))
        coords = np.concatenate([spatial, tcol], axis=1)
        return coords, inside


def _bilinear(plane, ca, cb):
    """Interpolate plane [Ra, Rb, C] at normalized coords ca, cb in [0,1]."""
    ra, rb = plane.shape[0], plane.shape[1]
    u = ca * (ra - 1)
    v = cb * (rb - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, ra - 2)
    j0 = np.clip(np.floor(v).astype(np.int64), 0, rb - 2)
    fa = (u - i0)[:, None]
    fb = (v - j0)[:, None]
    p00 = plane[i0, j0]
    p10 = plane[i0 + 1, j0]
    p01 = plane[i0, j0 + 1]
    p11 = plane[i0 + 1, j0 + 1]
    interp = ((1 - fa) * (1 - fb) * p00 + fa * (1 - fb) * p10
              + (1 - fa) * fb * p01 + fa * fb * p11)
    return interp, (i0, j0, fa, fb, p00, p10, p01, p11)


def query(field, positions, t):
    f, _ = query_with_cache(field, positions, t)
    return f


def query_with_cache(field, positions, t):
    """Latent [K, channels * levels] plus the record needed for the backward pass."""
    coords, inside = field.normalized_coords(positions, t)
    k = positions.shape[0]
    level_caches = []
    outputs = []
    for level in field.planes:
        interps = []
        caches = []
        for plane, axes in zip(level, PLANE_AXES):
            interp, cache = _bilinear(plane, coords[:, axes[0]], coords[:, axes[1]])
            interps.append(interp)
            caches.append(cache)
        stack = np.stack(interps, axis=0)  # [6, K, C]
        # prefix/suffix products give each plane's "product of the others"
        prefix = np.ones_like(stack)
        suffix = np.ones_like(stack)
        for i in range(1, 6):
            prefix[i] = prefix[i - 1] * stack[i - 1]
            suffix[5 - i] = suffix[6 - i] * stack[6 - i]
        outputs.append(prefix[5] * stack[5])
        level_caches.append((caches, stack, prefix * suffix))
    f = np.concatenate(outputs, axis=1)
    cache = {"k": k, "coords": coords, "inside": inside, "levels": level_caches}
    return f, cache


def query_backward(field, cache, dL_df):
    """Gradients for every touched grid cell and for the query positions.

    Returns (plane_grads, dL_dpositions) where plane_grads mirrors
    field.planes in structure.
    """
    k = cache["k"]
    if dL_df.shape != (k, field.latent_dim):
        raise ContractViolation(
            f"dL_df shape {dL_df.shape} does not match ({k}, {field.latent_dim})"
        )
    c = field.channels
    inside = cache["inside"]
    dcoords = np.zeros((k, 4))
    plane_grads = []
    for li, (level, (caches, stack, others)) in enumerate(
            zip(field.planes, cache["levels"])):
        dlevel = dL_df[:, li * c:(li + 1) * c]
        grads = []
        for pi, (plane, axes) in enumerate(zip(level, PLANE_AXES)):
            coef = dlevel * others[pi]  # [K, C] grad w.r.t. this plane's interp
            i0, j0, fa, fb, p00, p10, p01, p11 = caches[pi]
            ra, rb = plane.shape[0], plane.shape[1]
            # bincount over flattened (cell, channel) indices: much faster
            # than ufunc.at for the many-points / small-grid regime
            chan = np.arange(c, dtype=np.int64)[None, :]
            g = np.zeros(ra * rb * c)
            for ii, jj, wgt in (
                    (i0, j0, (1 - fa) * (1 - fb)), (i0 + 1, j0, fa * (1 - fb)),
                    (i0, j0 + 1, (1 - fa) * fb), (i0 + 1, j0 + 1, fa * fb)):
                flat = ((ii * rb + jj)[:, None] * c + chan).ravel()
                g += np.bincount(flat, weights=(coef * wgt).ravel(),
                                 minlength=ra * rb * c)
            grads.append(g.reshape(ra, rb, c))
            d_dfa = ((1 - fb) * (p10 - p00) + fb * (p11 - p01))
            d_dfb = ((1 - fa) * (p01 - p00) + fa * (p11 - p10))
            ra, rb = plane.shape[0], plane.shape[1]
            dcoords[:, axes[0]] += np.sum(coef * d_dfa, axis=1) * (ra - 1)
            dcoords[:, axes[1]] += np.sum(coef * d_dfb, axis=1) * (rb - 1)
        plane_grads.append(grads)
    span = field.aabb[1] - field.aabb[0]
    dpos = dcoords[:, :3] / span * inside  # clamped coordinates pass no gradient
    return plane_grads, dpos


def tv_loss(field):
    """Mean squared difference of axis-adjacent cells, summed over planes."""
    total = 0.0
    for level in field.planes:
        for plane in level:
            total += _plane_tv(plane)[0]
    return total


def _plane_tv(plane):
    da = plane[1:, :, :] - plane[:-1, :, :]
    db = plane[:, 1:, :] - plane[:, :-1, :]
    ra, rb, c = plane.shape
    n_pairs = ((ra - 1) * rb + ra * (rb - 1)) * c
    return (float(np.sum(da * da) + np.sum(db * db)) / n_pairs, n_pairs, da, db)


def tv_backward(field, scale=1.0):
    """d(scale * tv_loss)/d(plane) for every plane."""
    grads = []
    for level in field.planes:
        level_grads = []
        for plane in level:
            _, n_pairs, da, db = _plane_tv(plane)
            g = np.zeros_like(plane)
            coef = 2.0 * scale / n_pairs
            g[1:, :, :] += coef * da
            g[:-1, :, :] -= coef * da
            g[:, 1:, :] += coef * db
            g[:, :-1, :] -= coef * db
            level_grads.append(g)
        grads.append(level_grads)
    return grads
