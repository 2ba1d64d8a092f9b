"""Time-conditioned deformation: grid latent -> hidden state -> per-Gaussian
deltas for position, rotation, scale, opacity, plus a semantic feature delta.

Deltas are added in raw parameter space (unnormalized quaternion, log-scale,
opacity logit), so the activated snapshot stays valid for any finite delta.
Branch heads and the feature updater's output layer start at zero, which makes
the first deformed render coincide with the canonical one.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .gaussians import GaussianCloud
from .hexplane import query_backward, query_with_cache
from .numerics import linear_layer, mlp_backward, mlp_forward, mlp_params, set_mlp_params

BRANCHES = ("position", "rotation", "scale", "opacity")
BRANCH_DIMS = {"position": 3, "rotation": 4, "scale": 3, "opacity": 1}


@dataclass
class DeformationConfig:
    width: int = 64        # hidden state size
    depth: int = 8         # trunk layer count
    feature_dim: int = 128  # semantic channels N of the cloud
    enable_feature_update: bool = True   # semantic delta branch on/off
    enable_grid: bool = True             # grid latent on/off (zero latent when off)


class DeformationNet:
    """Trunk + four branch extractor/head pairs + semantic update MLP."""

    def __init__(self, latent_dim, cfg, rng):
        if cfg.width % 2 != 0:
            raise ConfigurationError("deformation width must be even")
        self.cfg = cfg
        self.latent_dim = latent_dim
        w, half = cfg.width, cfg.width // 2
        self.trunk = [linear_layer(latent_dim if i == 0 else w, w, "relu", rng)
                      for i in range(cfg.depth)]
        self.extractors = {}
        self.heads = {}
        for name in BRANCHES:
            self.extractors[name] = [
                linear_layer(w, half, "relu", rng),
                linear_layer(half, half, "relu", rng),
            ]
            self.heads[name] = [
                linear_layer(half, BRANCH_DIMS[name], "none", rng, init="zeros"),
            ]
        self.feature_mlp = [
            linear_layer(4 * half, half, "relu", rng),
            linear_layer(half, cfg.feature_dim, "none", rng, init="zeros"),
        ]

    def stacks(self):
        yield "net.trunk", self.trunk
        for name in BRANCHES:
            yield f"net.ext.{name}", self.extractors[name]
            yield f"net.head.{name}", self.heads[name]
        yield "net.feat", self.feature_mlp

    def param_arrays(self):
        out = {}
        for prefix, stack in self.stacks():
            out.update(dict(mlp_params(stack, prefix)))
        return out

    def set_params(self, arrays):
        for prefix, stack in self.stacks():
            set_mlp_params(stack, prefix, arrays)


def decode_hidden(net, latent):
    h, _ = mlp_forward(net.trunk, latent)
    return h


def decode_branches(net, hidden):
    """Per-branch deltas and intermediate features from the hidden state."""
    deltas, feats = {}, {}
    for name in BRANCHES:
        hg, _ = mlp_forward(net.extractors[name], hidden)
        feats[name] = hg
        deltas[name], _ = mlp_forward(net.heads[name], hg)
    return deltas, feats


def update_semantics(net, branch_feats, features):
    """z' = z + feature_mlp([h_pos | h_rot | h_scale | h_opacity])."""
    if not net.cfg.enable_feature_update:
        return features
    joint = np.concatenate([branch_feats[n] for n in BRANCHES], axis=-1)
    delta, _ = mlp_forward(net.feature_mlp, joint)
    return features + delta


def deform(cloud, field, net, t):
    snapshot, _ = deform_with_cache(cloud, field, net, t)
    return snapshot


def deform_with_cache(cloud, field, net, t):
    """Deformed snapshot of the cloud at time t plus the backward record."""
    k = len(cloud)
    if net.cfg.enable_grid:
        latent, qcache = query_with_cache(field, cloud.positions, t)
    else:
        latent, qcache = np.zeros((k, net.latent_dim)), None
    hidden, trunk_cache = mlp_forward(net.trunk, latent)
    deltas, feats, caches = {}, {}, {}
    for name in BRANCHES:
        hg, ecache = mlp_forward(net.extractors[name], hidden)
        d, hcache = mlp_forward(net.heads[name], hg)
        feats[name], deltas[name] = hg, d
        caches[name] = (ecache, hcache)
    if net.cfg.enable_feature_update:
        joint = np.concatenate([feats[n] for n in BRANCHES], axis=1)
        dz, fcache = mlp_forward(net.feature_mlp, joint)
        features = cloud.features + dz
    else:
        fcache = None
        features = cloud.features
    snapshot = GaussianCloud(
        positions=cloud.positions + deltas["position"],
        rotations=cloud.rotations + deltas["rotation"],
        log_scales=cloud.log_scales + deltas["scale"],
        opacity_logits=cloud.opacity_logits + deltas["opacity"][:, 0],
        colors_raw=cloud.colors_raw,
        features=features,
    )
    cache = {"k": k, "trunk": trunk_cache, "branch": caches, "feat": fcache,
             "query": qcache}
    return snapshot, cache


def deform_backward(cloud, field, net, cache, grads):
    """Pull snapshot gradients back to the cloud, the net, and the grid.

    `grads` carries d_positions, d_rotations, d_log_scales, d_opacity_logits,
    d_features in raw snapshot space (color gradients bypass deformation).
    Returns (cloud_grads dict, net_grads dict, plane_grads or None).
    """
    half = net.cfg.width // 2
    net_grads = {}
    d_feats = {name: np.zeros((cache["k"], half)) for name in BRANCHES}
    if net.cfg.enable_feature_update:
        d_joint, fg = mlp_backward(net.feature_mlp, cache["feat"], grads.features)
        net_grads.update(_stack_grads("net.feat", fg))
        for i, name in enumerate(BRANCHES):
            d_feats[name] += d_joint[:, i * half:(i + 1) * half]
    delta_grads = {
        "position": grads.positions,
        "rotation": grads.rotations,
        "scale": grads.log_scales,
        "opacity": grads.opacity_logits[:, None],
    }
    d_hidden = 0.0
    for name in BRANCHES:
        ecache, hcache = cache["branch"][name]
        d_hg, hg_grads = mlp_backward(net.heads[name], hcache, delta_grads[name])
        net_grads.update(_stack_grads(f"net.head.{name}", hg_grads))
        d_h, e_grads = mlp_backward(net.extractors[name], ecache,
                                    d_hg + d_feats[name])
        net_grads.update(_stack_grads(f"net.ext.{name}", e_grads))
        d_hidden = d_hidden + d_h
    d_latent, t_grads = mlp_backward(net.trunk, cache["trunk"], d_hidden)
    net_grads.update(_stack_grads("net.trunk", t_grads))

    cloud_grads = {
        "positions": grads.positions.copy(),
        "rotations": grads.rotations,
        "log_scales": grads.log_scales,
        "opacity_logits": grads.opacity_logits,
        "features": grads.features,
    }
    plane_grads = None
    if net.cfg.enable_grid:
        plane_grads, d_pos_query = query_backward(field, cache["query"], d_latent)
        cloud_grads["positions"] += d_pos_query
    return cloud_grads, net_grads, plane_grads


def _stack_grads(prefix, grads):
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"{prefix}.{i}.weight"] = dw
        out[f"{prefix}.{i}.bias"] = db
    return out
