"""
Surface distances by hand
=========================

How the boundary of a mask is found and how Hausdorff distance and ASSD
follow from it, with anisotropic voxels.
"""

import numpy as np

from ctpseg.metrics import assd, axis_spacing, evaluate_scan, extract_surface, hausdorff

# %%
# A 3x3 square: its eight rim pixels form the surface, the centre does not.
sq = np.zeros((7, 7), bool)
sq[2:5, 2:5] = True
print(extract_surface(sq).coords.tolist())

# %%
# Shift a copy two columns right. Every rim point of one square is within
# two pixels of the other, so both distances are small.
moved = np.roll(sq, 2, axis=1)
a, b = extract_surface(sq), extract_surface(moved)
print("HD", hausdorff(a, b), "ASSD", round(assd(a, b), 4))

# %%
# Volumes: spacing is given as (sx, sy, sz) and reordered to array axes.
vol_a = np.zeros((3, 8, 8), bool)
vol_a[1, 2:6, 2:6] = True
vol_b = vol_a.copy()
vol_b[2, 3:5, 3:5] = True
print("array-axis spacing", axis_spacing((1.0, 1.0, 5.0)))
rec = evaluate_scan(vol_b, vol_a, (1.0, 1.0, 5.0))
print(f"DSC {rec.dsc:.3f}  HD {rec.hd:.1f} mm  ASSD {rec.assd:.3f} mm  AVD {rec.avd:.3f} ml")

# %%
# An empty prediction leaves distances undefined rather than zero.
rec = evaluate_scan(np.zeros_like(vol_a), vol_a)
print(rec.hd, rec.flags)
