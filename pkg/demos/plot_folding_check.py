"""
Spotting folds with the Jacobian determinant
============================================

Where the determinant of the deformation gradient is not positive, the
mapping flips orientation. Larger fields fold sooner, and smoother fields
tolerate more displacement.
"""

import matplotlib.pyplot as plt

from mrreg import jacobian_det_map, nonpositive_jacobian_rate
from mrreg.datagen import random_smooth_field

amplitudes = [2, 6, 12]
fig, ax = plt.subplots(2, len(amplitudes), figsize=(10, 6.5))
for row, sigma in enumerate([8.0, 4.0]):
    for col, amp in enumerate(amplitudes):
        fld = random_smooth_field((64, 64), amp, sigma, seed=3)
        det = jacobian_det_map(fld)
        rate = nonpositive_jacobian_rate(fld)
        im = ax[row, col].imshow(det, cmap="coolwarm", vmin=-1, vmax=3)
        ax[row, col].contour(det, levels=[0], colors="k", linewidths=0.8)
        ax[row, col].set_title(f"amp {amp}, sigma {sigma:g}: {100 * rate:.1f}% folded")
        ax[row, col].axis("off")
fig.colorbar(im, ax=ax, shrink=0.7, label="det J")
plt.show()
