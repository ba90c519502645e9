"""
Fitting a heart into the network's field of view
================================================

Every stage works on a fixed 128 x 192 x 192 grid.  A heart that does not
fit at 1 mm is resampled at progressively coarser spacing until it does.
"""

from heartrefine import fit_field_of_view, preprocess
from heartrefine.phantom import generate_phantom, random_params

# A normal-sized heart fits at 1 mm.
small = generate_phantom(random_params(0, dims=(128, 160, 160), spacing=1.0))
_, lab, spacing = fit_field_of_view(small.intensity, small.labels, (128, 192, 192))
print(f"normal heart:   spacing {spacing:.3f} mm, grid {lab.dims}")

# Enlarge everything by 30% and the same grid no longer holds it.
big = generate_phantom(random_params(0, dims=(176, 192, 192), spacing=1.0, scale=1.3))
_, lab, spacing = fit_field_of_view(big.intensity, big.labels, (128, 192, 192))
print(f"enlarged heart: spacing {spacing:.3f} mm, grid {lab.dims}")

# preprocess() is the same search followed by the crop/pad around the heart,
# so every label voxel survives.
img, lab2, spacing = preprocess(big.intensity, big.labels, (128, 192, 192))
print("after preprocess:", img.dims, f"{spacing:.3f} mm,",
      "PA voxels", lab2.count("PA"), "(before:", lab.count("PA"), ")")
