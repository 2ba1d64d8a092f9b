"""Loss assembly, the coarse-to-fine optimization loop, per-group learning
rate schedules, ablation switches, and versioned checkpointing.

The loop is a single logical thread: one frame per iteration (round-robin
with a seeded start), one render, hand-derived backward, one Adam step per
parameter group. Everything stochastic draws from a single seeded generator
so runs are bit-reproducible and resumable.
"""

import configparser
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .deformation import DeformationConfig, DeformationNet, deform_backward, deform_with_cache
from .errors import ConfigurationError, ContractViolation, FormatError, NumericalError
from .gaussians import (
    DensityControlConfig,
    GaussianCloud,
    ViewspaceGradStats,
    densify_and_prune,
    init_from_rgbd,
    prune_only,
    reset_opacity,
    scene_aabb,
    scene_extent,
)
from .hexplane import HexPlaneConfig, HexPlaneField, tv_backward, tv_loss
from .metrics import psnr
from .numerics import AdamState, LrSchedule, adam_step, lr_at_step
from .rasterizer import RasterConfig, render, render_backward
from .semantic import (
    PointwiseDecoder,
    decode_features_backward,
    decode_features_with_cache,
    feature_loss,
    feature_loss_backward,
)

CHECKPOINT_MAGIC = b"FS4C"
CHECKPOINT_VERSION = 1
GAUSSIAN_ADAM_EPS = 1e-15
NETWORK_ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    # loss weights
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.01
    lambda_feat: float = 1.0
    lambda_tv: float = 0.03
    rgb_dssim_weight: float = 0.0  # reserved hook, must stay 0
    # schedule
    coarse_iterations: int = 1000
    fine_iterations: int = 6000
    coarse_psnr_cap: float = 35.0  # stop coarse early above this; <= 0 disables
    # scene / init
    initial_points: int = 90000
    feature_dim: int = 128
    seed: int = 0
    min_depth: float = 1e-6
    background: tuple = (0.0, 0.0, 0.0)
    # learning rates
    position_lr_init: float = 0.00016
    position_lr_final: float = 0.0000016
    position_lr_max_steps: int = 7000
    grid_lr_init: float = 0.0032
    grid_lr_final: float = 0.0000032
    deformation_lr_init: float = 0.00016
    deformation_lr_final: float = 1.6e-7
    deformation_lr_delay_mult: float = 0.01
    deformation_lr_delay_steps: int = 0
    opacity_lr: float = 0.05
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    color_lr: float = 0.0025
    feature_lr: float = 0.0025
    decoder_lr: float = 0.001
    # density control
    densify_from: int = 500
    densify_until: int = 5000
    densification_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    opacity_reset_interval: int = 6000
    opacity_reset_cap: float = 0.01
    prune_interval: int = 6000
    # grid encoder
    multiresolution_levels: tuple = (1, 2, 4, 8)
    base_resolution: tuple = (64, 64, 64, 100)
    output_coordinate_dim: int = 64
    grid_feat_dim: int = 0
    grid_dimensions: int = 2
    input_coordinate_dim: int = 4
    # deformation net
    net_width: int = 64
    net_depth: int = 8
    # ablation switches
    enable_f_feat: bool = True
    enable_feature_loss: bool = True
    enable_hexplane: bool = True
    # rasterizer
    tile: int = 16

    def validate(self):
        for name in ("lambda_rgb", "lambda_depth", "lambda_feat", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.coarse_iterations <= 0 or self.fine_iterations <= 0:
            raise ConfigurationError("iteration counts must be positive")
        if self.rgb_dssim_weight != 0.0:
            raise ConfigurationError("rgb_dssim_weight is a reserved hook; set 0")
        if self.grid_dimensions != 2:
            raise ConfigurationError("grid planes are 2-d; grid_dimensions must be 2")
        if self.input_coordinate_dim != 4:
            raise ConfigurationError("input coordinates are (x, y, z, t); dim must be 4")
        return self

    def hexplane_config(self):
        return HexPlaneConfig(
            levels=tuple(self.multiresolution_levels),
            base_resolution=tuple(self.base_resolution),
            out_dim=self.output_coordinate_dim,
            feat_dim=self.grid_feat_dim,
        )

    def deformation_config(self):
        return DeformationConfig(
            width=self.net_width,
            depth=self.net_depth,
            feature_dim=self.feature_dim,
            enable_feature_update=self.enable_f_feat,
            enable_grid=self.enable_hexplane,
        )

    def raster_config(self, with_features=True):
        return RasterConfig(tile=self.tile,
                            background=np.asarray(self.background, dtype=np.float64),
                            with_features=with_features)

    def density_config(self):
        return DensityControlConfig(
            grad_threshold=self.densify_grad_threshold,
            percent_dense=self.percent_dense,
            prune_opacity=self.prune_opacity,
            split_factor=self.split_factor,
        )

    def schedules(self):
        steps = self.position_lr_max_steps
        return {
            "positions": LrSchedule(self.position_lr_init, self.position_lr_final, steps),
            "rotations": LrSchedule.constant(self.rotation_lr),
            "log_scales": LrSchedule.constant(self.scaling_lr),
            "opacity_logits": LrSchedule.constant(self.opacity_lr),
            "colors_raw": LrSchedule.constant(self.color_lr),
            "features": LrSchedule.constant(self.feature_lr),
            "grid": LrSchedule(self.grid_lr_init, self.grid_lr_final, steps),
            "net": LrSchedule(self.deformation_lr_init, self.deformation_lr_final,
                              steps, self.deformation_lr_delay_mult,
                              self.deformation_lr_delay_steps),
            "decoder": LrSchedule.constant(self.decoder_lr),
        }


# config file round trip -----------------------------------------------------

_SECTIONS = {
    "loss": ("lambda_rgb", "lambda_depth", "lambda_feat", "lambda_tv",
             "rgb_dssim_weight"),
    "schedule": ("coarse_iterations", "fine_iterations", "coarse_psnr_cap"),
    "scene": ("initial_points", "feature_dim", "seed", "min_depth", "background"),
    "learning_rates": (
        "position_lr_init", "position_lr_final", "position_lr_max_steps",
        "grid_lr_init", "grid_lr_final", "deformation_lr_init",
        "deformation_lr_final", "deformation_lr_delay_mult",
        "deformation_lr_delay_steps", "opacity_lr", "scaling_lr", "rotation_lr",
        "color_lr", "feature_lr", "decoder_lr"),
    "density_control": (
        "densify_from", "densify_until", "densification_interval",
        "densify_grad_threshold", "percent_dense", "prune_opacity",
        "split_factor", "opacity_reset_interval", "opacity_reset_cap",
        "prune_interval"),
    "hexplane": ("multiresolution_levels", "base_resolution",
                 "output_coordinate_dim", "grid_feat_dim", "grid_dimensions",
                 "input_coordinate_dim"),
    "deformation": ("net_width", "net_depth"),
    "ablation": ("enable_f_feat", "enable_feature_loss", "enable_hexplane"),
    "rasterizer": ("tile",),
}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_ini(cfg):
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def _parse_value(name, text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"bad boolean for {name}: {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        elem = default[0] if default else 0.0
        conv = int if isinstance(elem, int) else float
        return tuple(conv(p) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_from_ini(text, base=None):
    parser = configparser.ConfigParser()
    parser.read_string(text)
    base = base if base is not None else TrainConfig()
    values = {}
    known = {k: s for s, ks in _SECTIONS.items() for k in ks}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw, getattr(base, key))
    return replace(base, **values).validate()


def config_hash(cfg):
    return hashlib.sha256(config_to_ini(cfg).encode()).hexdigest()


PRESETS = {
    "endonerf_pulling": {},
    "endonerf_cutting": {
        "grid_lr_init": 0.0016, "grid_lr_final": 0.0000016,
        "deformation_lr_init": 0.0004, "deformation_lr_final": 4e-7,
    },
    "scared": {
        "initial_points": 30000,
        "grid_lr_init": 0.0016, "grid_lr_final": 0.000016,
        "deformation_lr_init": 0.00008, "deformation_lr_final": 0.0000008,
        "fine_iterations": 3000, "opacity_reset_interval": 3000,
        "prune_interval": 3000, "position_lr_max_steps": 3000,
        "output_coordinate_dim": 32,
    },
    "synth": {
        "initial_points": 1600, "feature_dim": 32,
        "coarse_iterations": 1000, "fine_iterations": 2000,
        "position_lr_max_steps": 3000,
        "position_lr_init": 0.002, "position_lr_final": 0.00002,
        "grid_lr_init": 0.02, "grid_lr_final": 0.002,
        "deformation_lr_init": 0.002, "deformation_lr_final": 0.0002,
        "opacity_lr": 0.05, "scaling_lr": 0.01, "color_lr": 0.02,
        "feature_lr": 0.02, "decoder_lr": 0.005,
        "densify_from": 500, "densify_until": 1100,
        "densification_interval": 200, "densify_grad_threshold": 4e-4,
        "opacity_reset_interval": 100000, "prune_interval": 100000,
        "multiresolution_levels": (1, 2), "base_resolution": (24, 24, 24, 20),
        "output_coordinate_dim": 32, "net_width": 32,
    },
}


def preset_config(name):
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(TrainConfig(), **PRESETS[name]).validate()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _photometric_terms(out, frame):
    mask = frame.mask
    n_rgb = int(np.count_nonzero(mask)) * 3
    diff = out.color - frame.image
    rgb = float(np.sum(np.abs(diff)[mask]) / n_rgb) if n_rgb else 0.0
    dmask = mask & (out.alpha >= 0.5)
    n_d = int(np.count_nonzero(dmask))
    ddiff = out.depth - frame.depth
    depth = float(np.sum(np.abs(ddiff)[dmask]) / n_d) if n_d else 0.0
    return rgb, depth, diff, ddiff, mask, dmask, n_rgb, n_d


def total_loss(out, frame, decoded_features, grid_field, cfg):
    """Weighted scalar loss and per-term breakdown for one rendered frame."""
    rgb, depth, *_ = _photometric_terms(out, frame)
    feat = 0.0
    if (cfg.enable_feature_loss and decoded_features is not None
            and frame.features is not None):
        feat = feature_loss(decoded_features, frame.features.hwc())
    tv = 0.0
    if cfg.enable_hexplane and grid_field is not None and cfg.lambda_tv > 0:
        tv = tv_loss(grid_field)
    terms = {"rgb": rgb, "depth": depth, "feat": feat, "tv": tv}
    scalar = (cfg.lambda_rgb * rgb + cfg.lambda_depth * depth
              + cfg.lambda_feat * feat + cfg.lambda_tv * tv)
    return scalar, terms


def _photometric_grads(out, frame, cfg):
    rgb, depth, diff, ddiff, mask, dmask, n_rgb, n_d = _photometric_terms(out, frame)
    dC = np.zeros_like(out.color)
    if n_rgb:
        dC = cfg.lambda_rgb * np.sign(diff) * mask[:, :, None] / n_rgb
    dD = np.zeros_like(out.depth)
    if n_d:
        dD = cfg.lambda_depth * np.sign(ddiff) * dmask / n_d
    return rgb, depth, dC, dD


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    frames: list
    cloud: GaussianCloud
    field: HexPlaneField
    net: DeformationNet
    decoder: object
    adam: dict
    grad_stats: ViewspaceGradStats
    rng: np.random.Generator
    iteration: int = 0
    coarse_end: int = -1       # -1 while the coarse stage is still running
    frame_start: int = 0
    extent: float = 1.0
    log: list = field(default_factory=list)

    def in_coarse(self):
        return self.coarse_end < 0


def _adam_eps(name):
    return GAUSSIAN_ADAM_EPS if "." not in name else NETWORK_ADAM_EPS


def _schedule_key(name):
    if name.startswith("grid."):
        return "grid"
    if name.startswith("net."):
        return "net"
    if name.startswith("decoder."):
        return "decoder"
    return name


def init_training(frames, cfg):
    """Build the full training state from dataset frames and a config."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cloud = init_from_rgbd(frames, cfg.initial_points,
                           feature_dim=cfg.feature_dim, seed=cfg.seed,
                           min_depth=cfg.min_depth)
    aabb = scene_aabb(cloud)
    grid_field = HexPlaneField(cfg.hexplane_config(), aabb, rng)
    net = DeformationNet(grid_field.latent_dim, cfg.deformation_config(), rng)
    decoder = None
    teacher = next((f.features for f in frames if f.features is not None), None)
    if teacher is not None:
        decoder = PointwiseDecoder.create(teacher.channels, cfg.feature_dim, rng)
    state = TrainState(
        frames=frames, cloud=cloud, field=grid_field, net=net, decoder=decoder,
        adam={}, grad_stats=ViewspaceGradStats.zeros(len(cloud)), rng=rng,
        frame_start=int(rng.integers(len(frames))), extent=scene_extent(cloud),
    )
    for name, arr in _all_params(state).items():
        state.adam[name] = AdamState.for_param(arr, eps=_adam_eps(name))
    return state


def _all_params(state):
    params = dict(state.cloud.param_arrays())
    params.update(state.field.param_arrays())
    params.update(state.net.param_arrays())
    if state.decoder is not None:
        params.update(state.decoder.param_arrays())
    return params


def _push_params(state, updates):
    net_arrays = None
    for name, arr in updates.items():
        if name.startswith("grid."):
            state.field.set_param(name, arr)
        elif name.startswith("net."):
            if net_arrays is None:
                net_arrays = state.net.param_arrays()
            net_arrays[name] = arr
        elif name == "decoder.weight":
            state.decoder.weight = arr
        elif name == "decoder.bias":
            state.decoder.bias = arr
        else:
            setattr(state.cloud, name, arr)
    if net_arrays is not None:
        state.net.set_params(net_arrays)


def _step_params(state, cfg, grads, schedules):
    params = _all_params(state)
    updates = {}
    for name, grad in grads.items():
        lr = lr_at_step(schedules[_schedule_key(name)], state.iteration)
        try:
            updates[name] = adam_step(params[name], grad, state.adam[name], lr)
        except NumericalError as exc:
            raise NumericalError(
                f"iteration {state.iteration}, param {name}: {exc}") from exc
    _push_params(state, updates)
    return {k: lr_at_step(v, state.iteration) for k, v in schedules.items()}


def _density_control(state, cfg):
    it = state.iteration
    if (cfg.densify_from <= it < cfg.densify_until
            and it % max(cfg.densification_interval, 1) == 0 and it > 0):
        densify_and_prune(state.cloud, state.grad_stats, it, cfg.density_config(),
                          state.extent, state.rng, adam_states=state.adam)
    if cfg.prune_interval > 0 and it > 0 and it % cfg.prune_interval == 0:
        prune_only(state.cloud, state.grad_stats, cfg.density_config(),
                   adam_states=state.adam)
    if (cfg.opacity_reset_interval > 0 and it > 0
            and it % cfg.opacity_reset_interval == 0):
        reset_opacity(state.cloud, cfg.opacity_reset_cap)


def run_iteration(state, cfg):
    """One optimization step; dispatches on the coarse/fine phase."""
    schedules = cfg.schedules()
    frame = state.frames[(state.frame_start + state.iteration) % len(state.frames)]
    record = {"iteration": state.iteration, "count": len(state.cloud)}

    if state.in_coarse():
        snapshot = state.cloud
        out = render(snapshot, frame, cfg.raster_config(with_features=False))
        rgb, depth, dC, dD = _photometric_grads(out, frame, cfg)
        scalar = cfg.lambda_rgb * rgb + cfg.lambda_depth * depth
        if not np.isfinite(scalar):
            raise NumericalError(f"non-finite loss at coarse iteration {state.iteration}")
        g = render_backward(snapshot, frame, out, dC, dD)
        state.grad_stats.add(g.viewspace_index, g.viewspace_norm)
        grads = {
            "positions": g.positions, "rotations": g.rotations,
            "log_scales": g.log_scales, "opacity_logits": g.opacity_logits,
            "colors_raw": g.colors_raw,
        }
        lrs = _step_params(state, cfg, grads, schedules)
        record.update({"phase": "coarse", "loss": scalar, "rgb": rgb,
                       "depth": depth, "feat": 0.0, "tv": 0.0})
        train_psnr = psnr(out.color, frame.image)
        record["train_psnr"] = train_psnr
        _density_control(state, cfg)
        state.iteration += 1
        hit_cap = 0 < cfg.coarse_psnr_cap <= train_psnr
        if state.iteration >= cfg.coarse_iterations or hit_cap:
            state.coarse_end = state.iteration
    else:
        feature_on = (cfg.enable_feature_loss and frame.features is not None
                      and state.decoder is not None)
        snapshot, dcache = deform_with_cache(state.cloud, state.field, state.net,
                                             frame.time)
        out = render(snapshot, frame, cfg.raster_config(with_features=feature_on))
        rgb, depth, dC, dD = _photometric_grads(out, frame, cfg)
        feat_term, d_feature, dec_grads = 0.0, None, None
        if feature_on:
            teacher = frame.features.hwc()
            decoded, dec_cache = decode_features_with_cache(
                state.decoder, out.feature, teacher.shape[:2])
            feat_term = feature_loss(decoded, teacher)
            d_decoded = cfg.lambda_feat * feature_loss_backward(decoded, teacher)
            d_feature, dw, db = decode_features_backward(state.decoder, dec_cache,
                                                         d_decoded)
            dec_grads = {"decoder.weight": dw, "decoder.bias": db}
        tv_term = 0.0
        if cfg.enable_hexplane and cfg.lambda_tv > 0:
            tv_term = tv_loss(state.field)
        scalar = (cfg.lambda_rgb * rgb + cfg.lambda_depth * depth
                  + cfg.lambda_feat * feat_term + cfg.lambda_tv * tv_term)
        if not np.isfinite(scalar):
            raise NumericalError(f"non-finite loss at fine iteration {state.iteration}")
        g = render_backward(snapshot, frame, out, dC, dD, d_feature)
        state.grad_stats.add(g.viewspace_index, g.viewspace_norm)
        cloud_grads, net_grads, plane_grads = deform_backward(
            state.cloud, state.field, state.net, dcache, g)
        grads = dict(cloud_grads)
        grads["colors_raw"] = g.colors_raw
        if not feature_on:
            grads.pop("features")  # no supervision path: leave z untouched
        grads.update(net_grads)
        if cfg.enable_hexplane:
            tv_grads = tv_backward(state.field, cfg.lambda_tv) if cfg.lambda_tv > 0 else None
            for li, level in enumerate(plane_grads):
                for pi, pg in enumerate(level):
                    if tv_grads is not None:
                        pg = pg + tv_grads[li][pi]
                    grads[f"grid.l{li}.p{pi}"] = pg
        if dec_grads is not None:
            grads.update(dec_grads)
        lrs = _step_params(state, cfg, grads, schedules)
        record.update({"phase": "fine", "loss": scalar, "rgb": rgb,
                       "depth": depth, "feat": feat_term, "tv": tv_term})
        _density_control(state, cfg)
        state.iteration += 1

    record["lr"] = {k: float(v) for k, v in lrs.items()}
    state.log.append(record)
    return record


def train_coarse(state, cfg):
    """Run the coarse stage to completion; identity if it already finished."""
    while state.in_coarse():
        run_iteration(state, cfg)
    return state


def train_fine(state, cfg):
    """Run the configured number of fine-stage iterations after coarse."""
    if state.in_coarse():
        raise ContractViolation("fine stage requires a completed coarse stage")
    end = state.coarse_end + cfg.fine_iterations
    while state.iteration < end:
        run_iteration(state, cfg)
    return state


def train(state, cfg):
    train_coarse(state, cfg)
    train_fine(state, cfg)
    return state


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_KIND_ARRAY, _KIND_BYTES, _KIND_INT, _KIND_FLOAT = 0, 1, 2, 3


def _collect_entries(state, cfg):
    entries = {
        "meta.config": config_to_ini(cfg).encode(),
        "meta.iteration": state.iteration,
        "meta.coarse_end": state.coarse_end,
        "meta.frame_start": state.frame_start,
        "meta.extent": float(state.extent),
        "meta.aabb": state.field.aabb,
        "meta.rng": json.dumps(state.rng.bit_generator.state).encode(),
        "stats.accum": state.grad_stats.accum,
        "stats.count": state.grad_stats.count,
    }
    for name, arr in state.cloud.param_arrays().items():
        entries[f"cloud.{name}"] = arr
    entries.update(state.field.param_arrays())
    entries.update(state.net.param_arrays())
    if state.decoder is not None:
        entries.update(state.decoder.param_arrays())
    for name, st in state.adam.items():
        entries[f"adam.{name}.m"] = st.m
        entries[f"adam.{name}.v"] = st.v
        entries[f"adam.{name}.step"] = st.step_count
    return entries


def _write_entry(buf, name, value):
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    if isinstance(value, (bool, int, np.integer)):
        buf.write(struct.pack("<bq", _KIND_INT, int(value)))
    elif isinstance(value, float):
        buf.write(struct.pack("<bd", _KIND_FLOAT, value))
    elif isinstance(value, bytes):
        buf.write(struct.pack("<bQ", _KIND_BYTES, len(value)))
        buf.write(value)
    else:
        arr = np.ascontiguousarray(value)
        dt = arr.dtype.str.encode()
        buf.write(struct.pack("<bB", _KIND_ARRAY, len(dt)))
        buf.write(dt)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes(order="C"))


def save_checkpoint(state, cfg, path):
    entries = _collect_entries(state, cfg)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(entries)))
    for name in sorted(entries):
        _write_entry(buf, name, entries[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}",
                          offset=fh.tell())
    return data


def load_entries(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {path!r}", offset=0)
        version, count = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (kind,) = struct.unpack("<b", _read_exact(fh, 1, "kind"))
            if kind == _KIND_INT:
                (entries[name],) = struct.unpack("<q", _read_exact(fh, 8, name))
            elif kind == _KIND_FLOAT:
                (entries[name],) = struct.unpack("<d", _read_exact(fh, 8, name))
            elif kind == _KIND_BYTES:
                (blen,) = struct.unpack("<Q", _read_exact(fh, 8, name))
                entries[name] = _read_exact(fh, blen, name)
            elif kind == _KIND_ARRAY:
                (dlen,) = struct.unpack("<B", _read_exact(fh, 1, name))
                dtype = np.dtype(_read_exact(fh, dlen, name).decode())
                (ndim,) = struct.unpack("<B", _read_exact(fh, 1, name))
                shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, name))
                raw = _read_exact(fh, dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if ndim else dtype.itemsize, name)
                entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            else:
                raise FormatError(f"unknown entry kind {kind} for {name!r}",
                                  offset=fh.tell())
        return entries


def load_checkpoint(path, frames=None):
    """Rebuild (state, cfg) from a checkpoint; frames may be attached later."""
    entries = load_entries(path)
    cfg = config_from_ini(entries["meta.config"].decode())
    cloud = GaussianCloud(
        positions=entries["cloud.positions"],
        rotations=entries["cloud.rotations"],
        log_scales=entries["cloud.log_scales"],
        opacity_logits=entries["cloud.opacity_logits"],
        colors_raw=entries["cloud.colors_raw"],
        features=entries["cloud.features"],
    )
    rng = np.random.default_rng(0)
    grid_field = HexPlaneField(cfg.hexplane_config(), entries["meta.aabb"], rng)
    for name in grid_field.param_arrays():
        grid_field.set_param(name, entries[name])
    net = DeformationNet(grid_field.latent_dim, cfg.deformation_config(), rng)
    net.set_params({k: entries[k] for k in net.param_arrays()})
    decoder = None
    if "decoder.weight" in entries:
        decoder = PointwiseDecoder(weight=entries["decoder.weight"],
                                   bias=entries["decoder.bias"])
    state = TrainState(
        frames=frames, cloud=cloud, field=grid_field, net=net, decoder=decoder,
        adam={}, grad_stats=ViewspaceGradStats(accum=entries["stats.accum"],
                                               count=entries["stats.count"]),
        rng=rng, iteration=int(entries["meta.iteration"]),
        coarse_end=int(entries["meta.coarse_end"]),
        frame_start=int(entries["meta.frame_start"]),
        extent=float(entries["meta.extent"]),
    )
    state.rng.bit_generator.state = json.loads(entries["meta.rng"].decode())
    for name in _all_params(state):
        state.adam[name] = AdamState(
            m=entries[f"adam.{name}.m"], v=entries[f"adam.{name}.v"],
            step_count=int(entries[f"adam.{name}.step"]), eps=_adam_eps(name))
    return state, cfg
