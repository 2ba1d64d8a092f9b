# scratch probe for the dynamic pipeline; not part of the package
import sys
import time
from dataclasses import replace

import numpy as np

from featsplat.cli import evaluate_frames, mean_metric, segment_evaluation
from featsplat.datasets import load_dataset, split_frames, synth_generate
from featsplat.synth import SyntheticSceneParams
from featsplat.training import init_training, preset_config, run_iteration, train_coarse

root = sys.argv[1] if len(sys.argv) > 1 else "/tmp/synscene"
overrides = dict(s.split("=", 1) for s in sys.argv[2:])

params = SyntheticSceneParams(seed=0, n_frames=20)
synth_generate(params, root)
frames = load_dataset(root)
train_idx, test_idx = split_frames(len(frames), "every8")
train_frames = [frames[i] for i in train_idx]
cfg = preset_config("synth")
for k, v in overrides.items():
    field_type = type(getattr(cfg, k))
    cfg = replace(cfg, **{k: field_type(float(v)) if field_type in (int, float) else v})
cfg.validate()
print("training on", len(train_frames), "frames; test:", test_idx.tolist(), flush=True)

t0 = time.time()
state = init_training(train_frames, cfg)
train_coarse(state, cfg)
print(f"coarse ended at it {state.coarse_end} in {time.time()-t0:.1f}s", flush=True)

t0 = time.time()
end = state.coarse_end + cfg.fine_iterations
while state.iteration < end:
    rec = run_iteration(state, cfg)
    it = rec["iteration"]
    if (it - state.coarse_end) % 250 == 0:
        print(f"it {it:4d} loss {rec['loss']:.5f} rgb {rec['rgb']:.5f} "
              f"feat {rec['feat']:.5f} tv {rec['tv']:.6f} K {rec['count']} "
              f"({(time.time()-t0)/max(it-state.coarse_end,1)*1000:.0f} ms/it)", flush=True)
t_fine = time.time() - t0
print(f"fine in {t_fine:.1f}s", flush=True)

rows = evaluate_frames(state, cfg, frames, test_idx)
for r in rows:
    print({k: round(v, 4) for k, v in r.items()}, flush=True)
print("held-out mean psnr", round(mean_metric(rows, "psnr"), 3),
      "ssim", round(mean_metric(rows, "ssim"), 4),
      "feat", round(mean_metric(rows, "feat_l1"), 5), flush=True)

per_class, agg, _ = segment_evaluation(state, cfg, frames, train_idx, test_idx)
print("per-class IoU:", {c: round(m["iou"], 3) for c, m in per_class.items()}, flush=True)
print("aggregate:", {k: round(v, 4) for k, v in agg.items()}, flush=True)
