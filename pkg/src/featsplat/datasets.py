"""Dataset directory layout: reading posed RGB-D sequences and writing
synthetic ones.

Layout under a dataset root:
    images/%06d.png     8-bit RGB frames
    depth/%06d.feat     float32 depth (1-channel feature container), or
    depth/%06d.png      16-bit PNG scaled by [depth] meters_per_unit
    masks/%06d.png      binary masks (0 / 255)
    features/%06d.feat  optional teacher feature maps
    labels/%06d.png     optional 8-bit class-id maps
    poses.txt           optional; one row per frame: 3x5 [R|t|hwf]
                        camera-to-world block (row-major) plus near/far bounds
    times.txt           optional; one timestamp per frame, else uniform [0, 1]
    dataset.cfg         optional camera/depth overrides
"""

import configparser
import os

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .gaussians import CameraFrame
from .semantic import FeatureMap, load_feature_map, save_feature_map


def save_png_rgb(path, img):
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png_rgb(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png_gray(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def load_png_gray(path):
    return np.asarray(Image.open(path).convert("L"))


def save_png_depth16(path, depth, meters_per_unit):
    units = np.clip(np.round(depth / meters_per_unit), 0, 65535).astype(np.uint16)
    Image.fromarray(units, mode="I;16").save(path)


def load_png_depth16(path, meters_per_unit):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr * meters_per_unit


def _frame_name(i):
    return f"{i:06d}"


def quantize_unit_image(img):
    """Round a [0,1] float image through the 8-bit PNG representation."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255) / 255.0


def write_dataset(root, frames_data, camera, meta=None):
    """Write ground-truth frame dicts (from synth) into the layout above."""
    K, _ = camera
    for sub in ("images", "depth", "masks", "features", "labels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    times = []
    h = w = None
    for i, fd in enumerate(frames_data):
        name = _frame_name(i)
        save_png_rgb(os.path.join(root, "images", name + ".png"), fd["image"])
        save_feature_map(os.path.join(root, "depth", name + ".feat"),
                         FeatureMap(fd["depth"][None].astype(np.float32)))
        save_png_gray(os.path.join(root, "masks", name + ".png"),
                      fd["mask"].astype(np.uint8) * 255)
        if fd.get("features") is not None:
            save_feature_map(os.path.join(root, "features", name + ".feat"),
                             fd["features"])
        if fd.get("labels") is not None:
            save_png_gray(os.path.join(root, "labels", name + ".png"), fd["labels"])
        times.append(fd["time"])
        h, w = fd["image"].shape[:2]
    with open(os.path.join(root, "times.txt"), "w") as fh:
        fh.write("\n".join(repr(float(t)) for t in times) + "\n")
    rows = []
    for _ in frames_data:
        block = np.hstack([np.eye(3), np.zeros((3, 1)),
                           np.array([[h], [w], [K[0, 0]]])])
        rows.append(" ".join(repr(float(v)) for v in block.reshape(-1)) + " 0.1 10.0")
    with open(os.path.join(root, "poses.txt"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    parser = configparser.ConfigParser()
    parser["camera"] = {"fx": repr(float(K[0, 0])), "fy": repr(float(K[1, 1])),
                        "cx": repr(float(K[0, 2])), "cy": repr(float(K[1, 2]))}
    parser["depth"] = {"format": "feat", "meters_per_unit": "0.001"}
    parser["meta"] = {str(k): str(v) for k, v in (meta or {}).items()}
    with open(os.path.join(root, "dataset.cfg"), "w") as fh:
        parser.write(fh)


def _read_dataset_cfg(root):
    path = os.path.join(root, "dataset.cfg")
    parser = configparser.ConfigParser()
    if os.path.exists(path):
        parser.read(path)
    return parser


def _pose_rows(root, n_frames):
    path = os.path.join(root, "poses.txt")
    if not os.path.exists(path):
        return None
    rows = np.loadtxt(path, dtype=np.float64)
    rows = np.atleast_2d(rows)
    if rows.shape != (n_frames, 17):
        raise DataError(
            f"poses.txt has shape {rows.shape}, expected ({n_frames}, 17)")
    return rows


def load_dataset(root, with_features=True):
    """Load every frame of a dataset directory into CameraFrame objects."""
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise DataError(f"missing images/ under {root!r}")
    names = sorted(f[:-4] for f in os.listdir(img_dir) if f.endswith(".png"))
    if not names:
        raise DataError(f"no frames found under {img_dir!r}")
    cfgp = _read_dataset_cfg(root)
    meters = float(cfgp.get("depth", "meters_per_unit", fallback="0.001"))
    poses = _pose_rows(root, len(names))
    times_path = os.path.join(root, "times.txt")
    if os.path.exists(times_path):
        times = np.loadtxt(times_path, dtype=np.float64).reshape(-1)
        if times.size != len(names):
            raise DataError("times.txt length does not match frame count")
    else:
        n = len(names)
        times = np.zeros(1) if n == 1 else np.arange(n) / (n - 1)

    frames = []
    for i, name in enumerate(names):
        image = load_png_rgb(os.path.join(img_dir, name + ".png"))
        h, w = image.shape[:2]
        feat_depth = os.path.join(root, "depth", name + ".feat")
        png_depth = os.path.join(root, "depth", name + ".png")
        if os.path.exists(feat_depth):
            depth = load_feature_map(feat_depth).data[0].astype(np.float64)
        elif os.path.exists(png_depth):
            depth = load_png_depth16(png_depth, meters)
        else:
            raise DataError(f"no depth file for frame {name}")
        mask_path = os.path.join(root, "masks", name + ".png")
        mask = (load_png_gray(mask_path) > 127) if os.path.exists(mask_path) \
            else np.ones((h, w), dtype=bool)
        if poses is not None:
            block = poses[i, :15].reshape(3, 5)
            c2w = np.eye(4)
            c2w[:3, :3] = block[:, :3]
            c2w[:3, 3] = block[:, 3]
            T = np.linalg.inv(c2w)
            fx = fy = block[2, 4]
            cx, cy = (w - 1) / 2, (h - 1) / 2
        else:
            T = np.eye(4)
            fx = fy = cx = cy = None
        if cfgp.has_section("camera"):
            fx = float(cfgp.get("camera", "fx", fallback=fx))
            fy = float(cfgp.get("camera", "fy", fallback=fy))
            cx = float(cfgp.get("camera", "cx", fallback=cx))
            cy = float(cfgp.get("camera", "cy", fallback=cy))
        if fx is None:
            raise DataError("no intrinsics: provide poses.txt or dataset.cfg [camera]")
        K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
        features = None
        fpath = os.path.join(root, "features", name + ".feat")
        if with_features and os.path.exists(fpath):
            features = load_feature_map(fpath)
        labels = None
        lpath = os.path.join(root, "labels", name + ".png")
        if os.path.exists(lpath):
            labels = load_png_gray(lpath)
        frames.append(CameraFrame(K=K, T=T, time=float(times[i]), image=image,
                                  depth=depth, mask=mask, features=features,
                                  labels=labels))
    return frames


def synth_generate(params, root):
    """Render a scripted synthetic scene to disk; returns the scene object."""
    from .synth import SyntheticScene

    scene = SyntheticScene.create(params)
    frames_data = []
    for t in scene.frame_times():
        fd = scene.render_frame(float(t))
        fd["time"] = float(t)
        frames_data.append(fd)
    meta = {
        "n_classes": params.n_classes,
        "teacher_channels": params.teacher_channels,
        "seed": params.seed,
        "n_blobs": params.n_blobs,
    }
    write_dataset(root, frames_data, scene.camera(), meta)
    return scene


def split_frames(n_frames, rule="every8"):
    """Train/test index split; 'every8' holds out frames 0, 8, 16, ..."""
    idx = np.arange(n_frames)
    if rule == "all":
        return idx, idx
    if rule == "every8":
        test = idx[idx % 8 == 0]
        train = idx[idx % 8 != 0]
        if train.size == 0:    # tiny datasets: fall back to training on all
            train = idx
        return train, test
    raise ConfigurationError(f"unknown split rule {rule!r}")
