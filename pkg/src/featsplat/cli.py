"""Command-line surface: synth / train / render / eval / segment / gradcheck /
sweep, plus the evaluation helpers they share.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import datasets
from .datasets import load_dataset, quantize_unit_image, split_frames, synth_generate
from .deformation import deform
from .errors import ConfigurationError, DataError, FeatsplatError, NumericalError
from .gradcheck import run_gradcheck
from .metrics import psnr, ssim
from .rasterizer import render
from .semantic import (
    FeatureMap,
    decode_features,
    feature_loss,
    fit_prototypes,
    nearest_labels,
    save_feature_map,
    seg_metrics,
    segment,
)
from .synth import SyntheticSceneParams
from .training import (
    TrainConfig,
    config_from_ini,
    config_to_ini,
    init_training,
    load_checkpoint,
    preset_config,
    run_iteration,
    save_checkpoint,
    total_loss,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def model_snapshot(state, frame_time):
    """Deformed cloud at a timestamp (identity while heads are untrained)."""
    return deform(state.cloud, state.field, state.net, frame_time)


def render_frame(state, cfg, frame, time_override=None):
    t = frame.time if time_override is None else float(time_override)
    snapshot = model_snapshot(state, t)
    return render(snapshot, frame, cfg.raster_config(with_features=True))


def evaluate_frames(state, cfg, frames, indices):
    """Per-frame PSNR/SSIM (8-bit quantized, as `render` writes) and feature L1."""
    rows = []
    for i in indices:
        frame = frames[int(i)]
        out = render_frame(state, cfg, frame)
        color = quantize_unit_image(np.clip(out.color, 0.0, 1.0))
        row = {"frame": int(i), "psnr": psnr(color, frame.image),
               "ssim": ssim(color, frame.image)}
        if state.decoder is not None and frame.features is not None:
            teacher = frame.features.hwc()
            decoded = decode_features(state.decoder, out.feature, teacher.shape[:2])
            row["feat_l1"] = feature_loss(decoded, teacher)
        rows.append(row)
    return rows


def mean_metric(rows, key):
    vals = [r[key] for r in rows if key in r]
    return float(np.mean(vals)) if vals else float("nan")


def segment_evaluation(state, cfg, frames, train_idx, test_idx, tau=0.5,
                       at_image_resolution=True, background_prototype=True):
    """Fit prototypes on train-split teacher maps, segment rendered test frames.

    Returns (per_class, aggregate, predicted label maps); confusion counts are
    accumulated over every test frame before the metrics are computed.
    """
    fit_feats, fit_labels = [], []
    for i in train_idx:
        fr = frames[int(i)]
        if fr.features is not None and fr.labels is not None:
            fit_feats.append(fr.features)
            fit_labels.append(fr.labels)
    if not fit_feats:
        raise DataError("no training frames with both features/ and labels/")
    protos = fit_prototypes(fit_feats, fit_labels, threshold=tau,
                            include_background=background_prototype)
    preds, gts, out_maps = [], [], []
    for i in test_idx:
        fr = frames[int(i)]
        if fr.labels is None:
            raise DataError(f"frame {i} has no labels/ entry")
        out = render_frame(state, cfg, fr)
        if at_image_resolution or fr.features is None:
            hw = fr.labels.shape
        else:
            hw = (fr.features.height, fr.features.width)
        decoded = decode_features(state.decoder, out.feature, hw)
        labels = segment(decoded, protos)
        gt = fr.labels
        if labels.shape != gt.shape:
            gt = nearest_labels(gt, labels.shape)
        preds.append(labels.reshape(-1))
        gts.append(gt.reshape(-1))
        out_maps.append((int(i), labels))
    pred_all = np.concatenate(preds)
    gt_all = np.concatenate(gts)
    classes = sorted(int(c) for c in np.unique(gt_all) if c != 0)
    per_class, aggregate = seg_metrics(pred_all, gt_all, classes)
    return per_class, aggregate, out_maps


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _build_config(args):
    if getattr(args, "preset", None):
        cfg = preset_config(args.preset)
    else:
        cfg = TrainConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = config_from_ini(fh.read(), base=cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if not hasattr(cfg, key):
            raise ConfigurationError(f"unknown config key {key!r}")
        from .training import _parse_value
        cfg = replace(cfg, **{key: _parse_value(key, value, getattr(cfg, key))})
    for name in getattr(args, "ablate", None) or []:
        flag = {"wo_f_feat": "enable_f_feat",
                "wo_feature_loss": "enable_feature_loss",
                "wo_hexplane": "enable_hexplane"}.get(name)
        if flag is None:
            raise ConfigurationError(f"unknown ablation {name!r}")
        cfg = replace(cfg, **{flag: False})
    return cfg.validate()


def cmd_synth(args):
    params = SyntheticSceneParams(
        seed=args.seed, n_frames=args.frames, height=args.size, width=args.size,
        n_blobs=args.blobs, n_classes=args.classes,
        teacher_channels=args.teacher_channels,
        feature_height=args.feature_size, feature_width=args.feature_size,
        drift=args.drift, wobble=args.wobble,
        feature_amplitude=args.feature_amplitude)
    synth_generate(params, args.out)
    print(f"wrote {args.frames} synthetic frames to {args.out}")
    return 0


def train_loop(state, cfg, coarse_only=False, save_every=0, out_dir=None):
    def maybe_save():
        if save_every and out_dir and state.iteration % save_every == 0:
            save_checkpoint(state, cfg,
                            os.path.join(out_dir, f"ckpt_{state.iteration:06d}.ckpt"))

    while state.in_coarse():
        run_iteration(state, cfg)
        maybe_save()
    if not coarse_only:
        end = state.coarse_end + cfg.fine_iterations
        while state.iteration < end:
            run_iteration(state, cfg)
            maybe_save()
    return state


def cmd_train(args):
    frames = load_dataset(args.data, with_features=True)
    if args.resume:
        state, cfg = load_checkpoint(args.resume, frames=frames)
    else:
        cfg = _build_config(args)
        if (cfg.enable_feature_loss and cfg.lambda_feat > 0
                and all(f.features is None for f in frames)):
            raise ConfigurationError(
                "feature loss enabled but the dataset has no features/ maps; "
                "pass --ablate wo_feature_loss or add teacher features")
        state = init_training(frames, cfg)
    os.makedirs(args.out, exist_ok=True)
    train_loop(state, cfg, coarse_only=args.coarse_only,
               save_every=args.save_every, out_dir=args.out)
    save_checkpoint(state, cfg, os.path.join(args.out, "checkpoint.ckpt"))
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(config_to_ini(cfg))
    with open(os.path.join(args.out, "log.jsonl"), "w") as fh:
        for rec in state.log:
            fh.write(json.dumps(rec) + "\n")
    last = state.log[-1] if state.log else {}
    print(f"trained {state.iteration} iterations; "
          f"{len(state.cloud)} Gaussians; final loss {last.get('loss', float('nan')):.5f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.ckpt')}")
    return 0


def cmd_render(args):
    state, cfg = load_checkpoint(args.checkpoint)
    frames = load_dataset(args.data, with_features=True)
    os.makedirs(args.out, exist_ok=True)
    for i in args.frame:
        if not 0 <= i < len(frames):
            raise DataError(f"frame {i} out of range (dataset has {len(frames)})")
        frame = frames[i]
        out = render_frame(state, cfg, frame, time_override=args.time)
        name = f"{i:06d}"
        datasets.save_png_rgb(os.path.join(args.out, f"color_{name}.png"),
                              np.clip(out.color, 0.0, 1.0))
        save_feature_map(os.path.join(args.out, f"depth_{name}.feat"),
                         FeatureMap(out.depth[None].astype(np.float32)))
        save_feature_map(
            os.path.join(args.out, f"feature_{name}.feat"),
            FeatureMap(np.transpose(out.feature, (2, 0, 1)).astype(np.float32)))
        if args.decoded:
            if state.decoder is None:
                raise ConfigurationError("checkpoint has no pointwise decoder")
            if args.decode_res == "image":
                hw = (frame.height, frame.width)
            else:
                if frame.features is None:
                    raise DataError("feature-native decode needs features/ maps")
                hw = (frame.features.height, frame.features.width)
            decoded = decode_features(state.decoder, out.feature, hw)
            save_feature_map(
                os.path.join(args.out, f"decoded_{name}.feat"),
                FeatureMap(np.transpose(decoded, (2, 0, 1)).astype(np.float32)))
        print(f"rendered frame {i} -> {args.out}")
    return 0


def cmd_eval(args):
    state, cfg = load_checkpoint(args.checkpoint)
    frames = load_dataset(args.data, with_features=True)
    _, test_idx = split_frames(len(frames), args.split)
    rows = evaluate_frames(state, cfg, frames, test_idx)
    lines = [f"{'frame':>6} {'psnr':>8} {'ssim':>8} {'feat_l1':>9}"]
    for r in rows:
        feat = f"{r['feat_l1']:9.5f}" if "feat_l1" in r else "        -"
        lines.append(f"{r['frame']:>6d} {r['psnr']:8.3f} {r['ssim']:8.4f} {feat}")
    lines.append(f"  mean {mean_metric(rows, 'psnr'):8.3f} "
                 f"{mean_metric(rows, 'ssim'):8.4f} "
                 f"{mean_metric(rows, 'feat_l1'):9.5f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.txt"), "w") as fh:
            fh.write(table + "\n")
        with open(os.path.join(args.out, "eval.jsonl"), "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    return 0


def cmd_segment(args):
    state, cfg = load_checkpoint(args.checkpoint)
    if state.decoder is None:
        raise ConfigurationError("checkpoint has no pointwise decoder")
    frames = load_dataset(args.data, with_features=True)
    train_idx, test_idx = split_frames(len(frames), args.split)
    per_class, aggregate, out_maps = segment_evaluation(
        state, cfg, frames, train_idx, test_idx, tau=args.tau,
        at_image_resolution=(args.res == "image"),
        background_prototype=not args.no_bg_prototype)
    os.makedirs(args.out, exist_ok=True)
    for i, labels in out_maps:
        datasets.save_png_gray(os.path.join(args.out, f"labels_{i:06d}.png"), labels)
    lines = [f"{'class':>6} {'iou':>7} {'dsc':>7} {'recall':>7} {'prec':>7}"]
    for cid, m in per_class.items():
        lines.append(f"{cid:>6d} {m['iou']:7.4f} {m['dsc']:7.4f} "
                     f"{m['recall']:7.4f} {m['precision']:7.4f}")
    lines.append(f"   agg {aggregate['iou']:7.4f} {aggregate['dsc']:7.4f} "
                 f"{aggregate['recall']:7.4f} {aggregate['precision']:7.4f}")
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(table + "\n")
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump({"per_class": {str(k): v for k, v in per_class.items()},
                   "aggregate": aggregate}, fh, indent=2)
    return 0


def cmd_gradcheck(args):
    report = run_gradcheck(seed=args.seed, tolerance=args.tolerance,
                           samples_per_tensor=args.samples)
    ok = report.pop("_overall")["passed"]
    for group, r in report.items():
        print(f"{group:>18}: max rel err {r['max_rel']:.3e} "
              f"over {r['checked']} entries -> {'pass' if r['passed'] else 'FAIL'}")
    print(f"gradient check {'PASSED' if ok else 'FAILED'}")
    if not ok:
        raise NumericalError("finite-difference gradient check failed")
    return 0


def cmd_sweep(args):
    frames = load_dataset(args.data, with_features=True)
    base = _build_config(args)
    rows = []
    for dim in args.dims:
        cfg = replace(base, feature_dim=int(dim)).validate()
        state = init_training(frames, cfg)
        train_loop(state, cfg)
        _, test_idx = split_frames(len(frames), args.split)
        evals = evaluate_frames(state, cfg, frames, test_idx)
        rows.append({"dim": int(dim), "psnr": mean_metric(evals, "psnr"),
                     "ssim": mean_metric(evals, "ssim"),
                     "feat_l1": mean_metric(evals, "feat_l1")})
        print(f"dim {dim}: psnr {rows[-1]['psnr']:.3f} feat_l1 {rows[-1]['feat_l1']:.5f}")
    lines = [f"{'dim':>5} {'psnr':>8} {'ssim':>8} {'feat_l1':>9}"]
    for r in rows:
        lines.append(f"{r['dim']:>5d} {r['psnr']:8.3f} {r['ssim']:8.4f} {r['feat_l1']:9.5f}")
    feat = [r["feat_l1"] for r in rows]
    monotone = all(b <= a + 1e-12 for a, b in zip(feat, feat[1:]))
    lines.append(f"feature loss monotone nonincreasing with dim: {'yes' if monotone else 'no'}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.txt"), "w") as fh:
            fh.write(table + "\n")
        with open(os.path.join(args.out, "sweep.json"), "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


def build_parser():
    parser = _Parser(prog="featsplat",
                     description="Feature-distilled dynamic Gaussian splatting on the CPU")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic deforming-blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--blobs", type=int, default=10)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--teacher-channels", type=int, default=16)
    p.add_argument("--feature-size", type=int, default=32)
    p.add_argument("--drift", type=float, default=0.18)
    p.add_argument("--wobble", type=float, default=0.12)
    p.add_argument("--feature-amplitude", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ablate", action="append",
                   choices=["wo_f_feat", "wo_feature_loss", "wo_hexplane"])
    p.add_argument("--coarse-only", action="store_true")
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, nargs="+", required=True)
    p.add_argument("--time", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--decoded", action="store_true")
    p.add_argument("--decode-res", choices=["feature", "image"], default="feature")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM tables over a frame split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["every8", "all"], default="every8")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="prototype segmentation of rendered features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["every8", "all"], default="every8")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--res", choices=["image", "feature"], default="image")
    p.add_argument("--no-bg-prototype", action="store_true",
                   help="fall back to the pure cosine-threshold background rule")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=120)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train/eval over rendered feature dims")
    p.add_argument("--data", required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[16, 32, 64, 128])
    p.add_argument("--split", choices=["every8", "all"], default="every8")
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FeatsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
