"""
Repairing an initial six-label segmentation
===========================================

A synthetic heart stands in for a CT scan.  We damage its labels the way a
coarse atlas segmentation would, then repair them with the rule-based steps.
"""

import numpy as np

from heartrefine import SEVEN, SIX, TEN, LabelVolume
from heartrefine.labels import extract_pav, lv_myo_reassign, split_by_plane
from heartrefine.metrics import dice
from heartrefine.phantom import degrade_labels, generate_phantom, random_params

# A phantom carries intensity, ten ground-truth labels and the annotations
# (valve plane, LA boxes) a human would have drawn.
ph = generate_phantom(random_params(seed=3))
print("volume", ph.intensity.dims, "spacing", ph.intensity.spacing)
print({name: ph.labels.count(name) for name in TEN.names})

# Collapse to the six coarse labels of the initial segmentation.
six = LabelVolume(TEN.merge_to(SIX, ph.labels.data), ph.labels.spacing, ph.labels.origin, schema=SIX)

# %%
# Over-segmented LV
# -----------------
# Push the two innermost layers of myocardium into the LV cavity.
bad = degrade_labels(six, "LV_OVERSEGMENT", 2)
myo = SIX.id_of("LVMyo")
print(f"\nLVMyo Dice after damage:  {dice(bad, six, myo):.3f}")

fixed = lv_myo_reassign(ph.intensity, bad)
print(f"LVMyo Dice after repair:  {dice(fixed.labels, six, myo):.3f}"
      f"  ({fixed.voxels_transferred} voxels moved in {fixed.iterations_run} rounds)")

# %%
# Pulmonary artery folded into the RV
# -----------------------------------
# The valve plane from the annotation splits the RV label back in two.
folded = LabelVolume(TEN.merge_to(SEVEN, degrade_labels(ph.labels, "PA_INTO_RV", 1).data),
                     ph.labels.spacing, ph.labels.origin, schema=SEVEN)
print("\nPA voxels before split:", folded.count("PA"))
split = split_by_plane(folded, "RV", ph.annotation.plane, "RV", "PA")
print("PA voxels after split: ", split.count("PA"), "of", ph.labels.count("PA"))

# The valve itself is the thin band where RV and PA touch.
band = extract_pav(split)
dist = ph.annotation.plane.signed_distance(split.physical_centers()[band])
print(f"valve band: {band.sum()} voxels, max distance to plane {np.abs(dist).max():.2f} mm")
