"""
Quickstart: phantoms, a model and one prediction
================================================

Generate a few synthetic perfusion scans, build the default PSPNet and
look at what an untrained network predicts.
"""

# %%
# Synthetic scans carry five channels (CT, CBF, CBV, MTT, Tmax) and a mask.
import numpy as np

from ctpseg import build_pspnet, evaluate_scan, predict_mask, synth_generate

scans = synth_generate(4, size=(64, 64), seed=0)
for s in scans:
    print(s.scan_id, "depth", s.depth, "lesion voxels", int(s.mask.sum()))

# %%
# The network maps N x 5 x H x W slices to N x 2 x H x W logits.
net = build_pspnet(seed=0)
print("parameters:", net.num_parameters())
logits = net.predict_logits(np.moveaxis(scans[0].channels, 1, 0))
print("logits", logits.shape)

# %%
# Untrained, the mask is essentially noise; the metrics say so.
pred = predict_mask(net, scans[0])
rec = evaluate_scan(pred, scans[0].mask, scans[0].spacing, scans[0].scan_id)
print(f"DSC {rec.dsc:.3f}  flags {rec.flags}")
