"""
Growing the pulmonary artery past the edge of the scan
======================================================

U-Net 2 sees a label map whose top slices were cut away and has to draw
the PA where no input label exists.  At desk scale a quarter-width network
learns this from four phantoms in a few minutes on one CPU.

Set ``DEMO_STEPS`` to shorten the run (the default of 300 takes ~6 min).
"""

import os
from fractions import Fraction

import numpy as np

from heartrefine import SEVEN, SIX, TEN, LabelVolume
from heartrefine.phantom import generate_phantom, random_params
from heartrefine.pipeline import build_ground_truth, crop_line, stage_pair, train_stage
from heartrefine.unet import TrainParams, predict

STEPS = int(os.environ.get("DEMO_STEPS", 300))
PA = SEVEN.id_of("PA")

pairs = []
for seed in range(4):
    ph = generate_phantom(random_params(seed, dims=(32, 48, 48), spacing=4.0))
    six = LabelVolume(TEN.merge_to(SIX, ph.labels.data), ph.labels.spacing, ph.labels.origin, schema=SIX)
    gt = build_ground_truth(ph.intensity, six, ph.annotation)
    pairs.append(stage_pair("UNET2_EXTRAPOLATE", ph.intensity, gt, crop_fraction=0.25))

line = crop_line(32, 0.25)
x, y = pairs[0]
print(f"crop line at slice {line}: input labels above it {int(x[1:, line:].sum())},"
      f" target PA above it {int((y[line:] == PA).sum())}")

model = train_stage("UNET2_EXTRAPOLATE", pairs, TrainParams(steps=STEPS), width_scale=Fraction(1, 4))
print(f"loss {model.loss_history[0]:.3f} -> {model.loss_history[-1]:.4f} after {STEPS} steps")
print(f"Dice(PA) on the training phantoms: {model.report.mean('PA'):.3f}")

for i, (x, y) in enumerate(pairs):
    pred = np.argmax(predict(model.weights, x), axis=0)
    print(f"phantom {i}: PA above the line predicted {int((pred[line:] == PA).sum())},"
          f" true {int((y[line:] == PA).sum())}")
