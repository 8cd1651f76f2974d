"""
Memorizing a handful of slices
==============================

A sanity check for the whole training stack: with focal loss and enough
epochs the small PSPNet should reproduce the masks of 16 slices almost
perfectly. Pass ``--epochs`` to shorten the run.
"""

import argparse
import time

import numpy as np

from ctpseg import LossConfig, TrainConfig, build_pspnet, fit, predict_mask, synth_generate
from ctpseg.data import ScanStack
from ctpseg.metrics import dsc

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=300)
args = parser.parse_args()

# %%
# Keep only slices that contain lesion so the task is not trivially "all background".
scans, n = [], 0
for s in synth_generate(12, size=(64, 64), seed=3):
    keep = [z for z in range(s.depth) if s.mask[z].any()][: 16 - n]
    if keep:
        scans.append(ScanStack(s.subject_id, s.scan_id, s.channels[:, keep], s.mask[keep], s.spacing))
        n += len(keep)
    if n == 16:
        break

# %%
# Train and validate on the same slices.
cfg = TrainConfig(max_epochs=args.epochs, loss=LossConfig(kind="focal", gamma=1.0))
net = build_pspnet(seed=0)
t0 = time.perf_counter()
result = fit(cfg, net, scans, scans)
print(f"{len(result.log)} epochs in {time.perf_counter() - t0:.0f} s")

first = result.log[0]["train_loss"]
best = result.log[result.best.epoch - 1]["train_loss"]
print(f"loss {first:.4f} -> {best:.5f} ({first / best:.0f}x)")

# %%
# Per-scan DSC of the best epoch.
for s in scans:
    print(s.scan_id, f"{dsc(predict_mask(net, s), s.mask):.3f}")
print("mean", np.mean([dsc(predict_mask(net, s), s.mask) for s in scans]))
