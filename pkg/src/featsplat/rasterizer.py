"""Differentiable tile-based rasterizer.

Projection maps each 3-d Gaussian to a screen-space mean, a 2x2 covariance
via the affine (Jacobian) approximation of the perspective transform, and a
conservative pixel radius. Compositing walks every tile front to back and
blends color, view depth, and the N semantic channels with identical weights
w_i = alpha_i * T_i. The backward pass re-derives every gradient by hand,
through compositing, the 2-d Gaussian evaluation, projection, covariance
composition, and the sigmoid/exp activations, so a single call yields
gradients for all raw snapshot parameters.

Conventions: pixel (row i, col j) is sampled at continuous coordinates
(u=j, v=i); a Gaussian's footprint is the axis-aligned square of half-width
`radius` around its projected mean, applied identically during binning and
compositing.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError, NumericalError
from .gaussians import compose_covariances, covariance_backward, sigmoid


@dataclass
class RasterConfig:
    tile: int = 16
    z_near: float = 0.01
    lowpass: float = 0.3            # px^2 added to the cov2d diagonal
    alpha_cap: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    stop_transmittance: float = 1e-4
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    with_features: bool = True


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians, depth-sorted front to back (struct of arrays)."""

    mean2d: np.ndarray       # [M, 2] pixel coords
    cov2d: np.ndarray        # [M, 2, 2]
    conic: np.ndarray        # [M, 2, 2] inverse of cov2d
    view_depth: np.ndarray   # [M] camera-space z
    radius: np.ndarray       # [M] pixels
    color: np.ndarray        # [M, 3] activated
    opacity: np.ndarray      # [M] activated
    feature: np.ndarray      # [M, N]
    source_index: np.ndarray  # [M] row in the snapshot

    def __len__(self):
        return self.mean2d.shape[0]

    def __getitem__(self, i):
        return {
            "mean2d": self.mean2d[i], "cov2d": self.cov2d[i],
            "view_depth": self.view_depth[i], "radius": self.radius[i],
            "color": self.color[i], "opacity": self.opacity[i],
            "feature": self.feature[i], "source_index": self.source_index[i],
        }


@dataclass
class TileRecord:
    """Compositing state of one tile, reused verbatim by the backward pass.

    Rows are the depth-ordered Gaussians with at least one live pixel in the
    tile; dropping all-zero rows leaves every transmittance product unchanged.
    """

    rows: np.ndarray     # indices into the projected arrays
    alpha: np.ndarray    # [G, P] gated alphas
    g2d: np.ndarray      # [G, P] 2-d Gaussian values (only where live)
    a_raw: np.ndarray    # [G, P] opacity * g2d before the cap
    x0: int
    y0: int
    xs: np.ndarray
    ys: np.ndarray


@dataclass
class RasterRecord:
    """Everything the backward pass needs to replay compositing exactly."""

    proj: ProjectedGaussians
    tiles: list          # flat list of TileRecord
    height: int
    width: int
    cfg: RasterConfig
    snapshot_len: int


@dataclass
class RenderOutput:
    color: np.ndarray        # [H, W, 3]
    depth: np.ndarray        # [H, W]
    feature: np.ndarray      # [H, W, N]
    alpha: np.ndarray        # [H, W]
    record: RasterRecord

    def pixel_record(self, row, col):
        """Contributing (source_index, alpha, weight) triples for one pixel."""
        rec = self.record
        t = rec.cfg.tile
        tile = next((tr for tr in rec.tiles
                     if tr.y0 == (row // t) * t and tr.x0 == (col // t) * t), None)
        if tile is None:
            return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
        p = (row - tile.y0) * tile.xs.size + (col - tile.x0)
        a = tile.alpha[:, p]
        _, contrib, w, _ = _composite_weights(tile.alpha, rec.cfg.stop_transmittance)
        live = (a > 0) & contrib[:, p]
        return rec.proj.source_index[tile.rows[live]], a[live], w[live, p]


def project(snapshot, frame, cfg):
    """Project activated Gaussians to screen space; culls behind-camera and
    fully offscreen Gaussians and returns them depth-sorted."""
    for name in ("positions", "rotations", "log_scales", "opacity_logits",
                 "colors_raw", "features"):
        arr = getattr(snapshot, name)
        if not np.all(np.isfinite(arr)):
            bad = np.nonzero(~np.isfinite(arr).reshape(len(snapshot), -1).all(axis=1))[0]
            raise NumericalError(
                f"non-finite {name} for Gaussian indices {bad[:8].tolist()}"
            )
    K, T = frame.K, frame.T
    if abs(K[0, 1]) > 1e-9:
        raise DataError("intrinsics with skew are not supported")
    h, w = frame.height, frame.width
    R, tvec = T[:3, :3], T[:3, 3]
    cam_all = snapshot.positions @ R.T + tvec
    near = cam_all[:, 2] > cfg.z_near
    idx = np.nonzero(near)[0]
    cam = cam_all[idx]
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    u = fx * x / z + cx
    v = fy * y / z + cy

    sigma = compose_covariances(snapshot.rotations[idx],
                                np.exp(snapshot.log_scales[idx]))
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    M = J @ R
    cov2d = M @ sigma @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += cfg.lowpass
    cov2d[:, 1, 1] += cfg.lowpass

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    det = a * c - b * b
    eig_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(eig_max))

    on = ((u + radius >= 0) & (u - radius <= w - 1)
          & (v + radius >= 0) & (v - radius <= h - 1))
    keep = np.nonzero(on)[0]
    order = keep[np.argsort(z[keep], kind="stable")]

    cov_k = cov2d[order]
    det_k = det[order]
    conic = np.empty_like(cov_k)
    conic[:, 0, 0] = cov_k[:, 1, 1] / det_k
    conic[:, 0, 1] = -cov_k[:, 0, 1] / det_k
    conic[:, 1, 0] = -cov_k[:, 1, 0] / det_k
    conic[:, 1, 1] = cov_k[:, 0, 0] / det_k

    n = snapshot.features.shape[1] if cfg.with_features else 0
    feature = snapshot.features[idx[order], :n] if n else np.zeros((order.size, 0))
    return ProjectedGaussians(
        mean2d=np.stack([u[order], v[order]], axis=1),
        cov2d=cov_k,
        conic=conic,
        view_depth=z[order],
        radius=radius[order],
        color=np.clip(snapshot.colors_raw[idx[order]], 0.0, 1.0),
        opacity=sigmoid(snapshot.opacity_logits[idx[order]]),
        feature=feature,
        source_index=idx[order],
    )


def bin_tiles(proj, height, width, tile):
    """List each Gaussian in every tile its radius square overlaps.

    Returns tiles[ty][tx] -> int array of rows into `proj`, preserving the
    global depth order within every tile.
    """
    nty = (height + tile - 1) // tile
    ntx = (width + tile - 1) // tile
    lists = [[[] for _ in range(ntx)] for _ in range(nty)]
    u, v, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    tx_lo = np.clip(np.floor((u - r) / tile).astype(np.int64), 0, ntx - 1)
    tx_hi = np.clip(np.floor((u + r) / tile).astype(np.int64), 0, ntx - 1)
    ty_lo = np.clip(np.floor((v - r) / tile).astype(np.int64), 0, nty - 1)
    ty_hi = np.clip(np.floor((v + r) / tile).astype(np.int64), 0, nty - 1)
    for g in range(len(proj)):
        for ty in range(ty_lo[g], ty_hi[g] + 1):
            row = lists[ty]
            for tx in range(tx_lo[g], tx_hi[g] + 1):
                row[tx].append(g)
    return [[np.asarray(cell, dtype=np.int64) for cell in row] for row in lists]


# alpha >= 1/255 needs exp(-q/2) >= 1/255 even at full opacity, so pairs with
# larger q can never composite and their exp is skipped
_Q_SKIP = 2.0 * np.log(255.0)


def _tile_alphas(proj, idx, xs, ys, cfg):
    """Gated alpha matrices for one tile, compressed to rows that touch it.

    Returns (rows, alpha, g2d, a_raw) with rows indexing into `proj`; all-zero
    alpha rows are dropped, which leaves compositing unchanged.
    """
    dx, dy = _tile_offsets(proj, idx, xs, ys)
    r = proj.radius[idx][:, None]
    con = proj.conic[idx]
    q = (con[:, 0, 0, None] * dx * dx
         + (con[:, 0, 1, None] + con[:, 1, 0, None]) * dx * dy
         + con[:, 1, 1, None] * dy * dy)
    live = (np.abs(dx) <= r) & (np.abs(dy) <= r) & (q <= _Q_SKIP)
    g2d = np.zeros_like(q)
    g2d[live] = np.exp(-0.5 * q[live])
    a_raw = proj.opacity[idx][:, None] * g2d
    alpha = np.minimum(a_raw, cfg.alpha_cap)
    alpha[alpha < cfg.alpha_skip] = 0.0
    keep = np.nonzero(alpha.max(axis=1) > 0.0)[0]
    return idx[keep], alpha[keep], g2d[keep], a_raw[keep]


def _tile_offsets(proj, rows, xs, ys):
    mean = proj.mean2d[rows]
    px = np.tile(xs, ys.size).astype(np.float64)
    py = np.repeat(ys, xs.size).astype(np.float64)
    return px[None, :] - mean[:, 0:1], py[None, :] - mean[:, 1:2]


def _composite_weights(alpha, stop):
    """Transmittance bookkeeping shared by forward and backward.

    Compositing halts once the running transmittance drops below `stop`; the
    returned T_final is exactly the cumulative product at the halt point so
    that sum(w) + T_final telescopes to 1.
    """
    t_inc = np.cumprod(1.0 - alpha, axis=0)
    t_exc = np.vstack([np.ones((1, alpha.shape[1])), t_inc[:-1]])
    contrib = t_exc >= stop
    w = alpha * t_exc * contrib
    n_contrib = contrib.sum(axis=0)
    t_final = np.where(
        n_contrib > 0,
        np.take_along_axis(t_inc, np.maximum(n_contrib - 1, 0)[None, :], axis=0)[0],
        1.0,
    )
    return t_exc, contrib, w, t_final


def render(snapshot, frame, cfg):
    """Composite color, depth, features, and alpha for one camera frame."""
    proj = project(snapshot, frame, cfg)
    h, w = frame.height, frame.width
    n = proj.feature.shape[1]
    tiles = bin_tiles(proj, h, w, cfg.tile)
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    feature = np.zeros((h, w, n))
    t_final_img = np.ones((h, w))
    tile = cfg.tile
    records = []
    for ty, row in enumerate(tiles):
        y0 = ty * tile
        ys = np.arange(y0, min(y0 + tile, h))
        for tx, idx in enumerate(row):
            if idx.size == 0:
                continue
            x0 = tx * tile
            xs = np.arange(x0, min(x0 + tile, w))
            rows, alpha, g2d, a_raw = _tile_alphas(proj, idx, xs, ys, cfg)
            if rows.size == 0:
                continue
            records.append(TileRecord(rows=rows, alpha=alpha, g2d=g2d,
                                      a_raw=a_raw, x0=x0, y0=y0, xs=xs, ys=ys))
            _, _, wmat, t_final = _composite_weights(alpha, cfg.stop_transmittance)
            shape = (ys.size, xs.size)
            color[y0:y0 + shape[0], x0:x0 + shape[1]] = \
                (wmat.T @ proj.color[rows]).reshape(shape + (3,))
            depth[y0:y0 + shape[0], x0:x0 + shape[1]] = \
                (wmat * proj.view_depth[rows][:, None]).sum(axis=0).reshape(shape)
            if n:
                feature[y0:y0 + shape[0], x0:x0 + shape[1]] = \
                    (wmat.T @ proj.feature[rows]).reshape(shape + (n,))
            t_final_img[y0:y0 + shape[0], x0:x0 + shape[1]] = t_final.reshape(shape)
    color += t_final_img[:, :, None] * cfg.background
    record = RasterRecord(proj=proj, tiles=records, height=h, width=w, cfg=cfg,
                          snapshot_len=len(snapshot))
    return RenderOutput(color=color, depth=depth, feature=feature,
                        alpha=1.0 - t_final_img, record=record)


@dataclass
class SnapshotGrads:
    """Raw-parameter gradients plus the screen-space stats density control uses."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors_raw: np.ndarray
    features: np.ndarray
    viewspace_index: np.ndarray
    viewspace_norm: np.ndarray


def render_backward(snapshot, frame, out, dL_dcolor=None, dL_ddepth=None,
                    dL_dfeature=None, dL_dalpha=None):
    """Chain-rule gradients for every raw snapshot parameter.

    Upstream gradient images may be None (treated as zero). The compositing
    state is replayed from the record; passing a record produced by a
    different snapshot or frame raises ContractViolation.
    """
    rec = out.record
    h, w = rec.height, rec.width
    if rec.snapshot_len != len(snapshot) or (frame.height, frame.width) != (h, w):
        raise ContractViolation("record does not match this snapshot/frame")
    proj, cfg = rec.proj, rec.cfg
    m = len(proj)
    n = proj.feature.shape[1]
    dC = np.zeros((h, w, 3)) if dL_dcolor is None else np.asarray(dL_dcolor, dtype=np.float64)
    dD = np.zeros((h, w)) if dL_ddepth is None else np.asarray(dL_ddepth, dtype=np.float64)
    dF = np.zeros((h, w, n)) if dL_dfeature is None else np.asarray(dL_dfeature, dtype=np.float64)
    dA = np.zeros((h, w)) if dL_dalpha is None else np.asarray(dL_dalpha, dtype=np.float64)
    if dF.shape != (h, w, n):
        raise ContractViolation(f"dL_dfeature must have shape {(h, w, n)}")

    d_opacity_act = np.zeros(m)
    d_color_act = np.zeros((m, 3))
    d_feature = np.zeros((m, n))
    d_depth_val = np.zeros(m)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 2, 2))

    for tr in rec.tiles:
        rows, alpha, g2d, a_raw = tr.rows, tr.alpha, tr.g2d, tr.a_raw
        x0, y0, xs, ys = tr.x0, tr.y0, tr.xs, tr.ys
        t_exc, contrib, wmat, t_final = _composite_weights(
            alpha, cfg.stop_transmittance)
        p = ys.size * xs.size
        dct = dC[y0:y0 + ys.size, x0:x0 + xs.size].reshape(p, 3)
        ddt = dD[y0:y0 + ys.size, x0:x0 + xs.size].reshape(p)
        dft = dF[y0:y0 + ys.size, x0:x0 + xs.size].reshape(p, n)
        dat = dA[y0:y0 + ys.size, x0:x0 + xs.size].reshape(p)

        # value gradients share the compositing weights
        d_color_act[rows] += wmat @ dct
        d_depth_val[rows] += (wmat * ddt[None, :]).sum(axis=1)
        if n:
            d_feature[rows] += wmat @ dft

        # gradient through the alphas themselves
        u_val = proj.color[rows] @ dct.T + proj.view_depth[rows][:, None] * ddt[None, :]
        if n:
            u_val += proj.feature[rows] @ dft.T
        v_pix = dct @ cfg.background - dat  # dL/dT_final per pixel
        wu = wmat * u_val
        suffix = np.flip(np.cumsum(np.flip(wu, axis=0), axis=0), axis=0) - wu
        live = contrib & (alpha > 0.0)
        d_alpha = np.where(
            live,
            u_val * t_exc - (suffix + t_final[None, :] * v_pix[None, :])
            / (1.0 - alpha),
            0.0,
        )
        d_a_raw = d_alpha * (a_raw < cfg.alpha_cap)
        d_opacity_act[rows] += (d_a_raw * g2d).sum(axis=1)
        d_q = -0.5 * g2d * d_a_raw * proj.opacity[rows][:, None]
        dx, dy = _tile_offsets(proj, rows, xs, ys)
        d_conic[rows, 0, 0] += (d_q * dx * dx).sum(axis=1)
        dxy = (d_q * dx * dy).sum(axis=1)
        d_conic[rows, 0, 1] += dxy
        d_conic[rows, 1, 0] += dxy
        d_conic[rows, 1, 1] += (d_q * dy * dy).sum(axis=1)
        con = proj.conic[rows]
        gx = d_q * (con[:, 0, 0, None] * dx + con[:, 0, 1, None] * dy)
        gy = d_q * (con[:, 1, 0, None] * dx + con[:, 1, 1, None] * dy)
        d_mean2d[rows, 0] += -2.0 * gx.sum(axis=1)
        d_mean2d[rows, 1] += -2.0 * gy.sum(axis=1)

    # conic = inv(cov2d)
    d_cov2d = -rec.proj.conic @ d_conic @ rec.proj.conic

    K, T = frame.K, frame.T
    R, tvec = T[:3, :3], T[:3, 3]
    fx, fy = K[0, 0], K[1, 1]
    src = proj.source_index
    cam = snapshot.positions[src] @ R.T + tvec
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    sigma = compose_covariances(snapshot.rotations[src],
                                np.exp(snapshot.log_scales[src]))
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    Mm = J @ R
    sym = d_cov2d + np.swapaxes(d_cov2d, 1, 2)
    d_Mm = sym @ Mm @ sigma
    d_sigma = np.swapaxes(Mm, 1, 2) @ d_cov2d @ Mm
    d_J = d_Mm @ R.T

    d_cam = np.zeros((m, 3))
    d_cam[:, 0] = d_J[:, 0, 2] * (-fx / (z * z)) + d_mean2d[:, 0] * fx / z
    d_cam[:, 1] = d_J[:, 1, 2] * (-fy / (z * z)) + d_mean2d[:, 1] * fy / z
    d_cam[:, 2] = (d_J[:, 0, 0] * (-fx / (z * z))
                   + d_J[:, 0, 2] * (2.0 * fx * x / z ** 3)
                   + d_J[:, 1, 1] * (-fy / (z * z))
                   + d_J[:, 1, 2] * (2.0 * fy * y / z ** 3)
                   + d_mean2d[:, 0] * (-fx * x / (z * z))
                   + d_mean2d[:, 1] * (-fy * y / (z * z))
                   + d_depth_val)
    d_pos_vis = d_cam @ R
    d_quat_vis, d_ls_vis = covariance_backward(
        snapshot.rotations[src], snapshot.log_scales[src], d_sigma)

    o = proj.opacity
    raw_c = snapshot.colors_raw[src]
    k = len(snapshot)
    grads = SnapshotGrads(
        positions=np.zeros((k, 3)),
        rotations=np.zeros((k, 4)),
        log_scales=np.zeros((k, 3)),
        opacity_logits=np.zeros(k),
        colors_raw=np.zeros((k, 3)),
        features=np.zeros((k, snapshot.features.shape[1])),
        viewspace_index=src.copy(),
        viewspace_norm=np.hypot(d_mean2d[:, 0] * 0.5 * w, d_mean2d[:, 1] * 0.5 * h),
    )
    grads.positions[src] = d_pos_vis
    grads.rotations[src] = d_quat_vis
    grads.log_scales[src] = d_ls_vis
    grads.opacity_logits[src] = d_opacity_act * o * (1.0 - o)
    # color clamp gate: no gradient once a channel is pinned at 0 or 1
    grads.colors_raw[src] = d_color_act * ((raw_c > 0.0) & (raw_c < 1.0))
    if n:
        grads.features[src, :n] = d_feature
    return grads
