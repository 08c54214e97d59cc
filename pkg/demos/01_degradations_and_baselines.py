"""
Degradations and classical baselines
====================================

Each pristine image is degraded by four kinds of distortion at five levels.
The three classical full-reference scores should fall (PSNR, SSIM) or rise
(GMSD) as the level goes up.
"""

import numpy as np
from skimage import data

from cadis import DegradationProtocol, DegradationSpec, apply_degradation
from cadis.evaluation import gmsd, psnr, ssim

# a 96x96 crop of a standard test image, values in [0, 1]
img = data.astronaut()[80:176, 180:276].astype(np.float32) / 255.0
protocol = DegradationProtocol()

###############################################################################
# Walk every kind and level. Noise takes a seed, so the same spec always gives
# the same pixels.

print(f"{'kind':<16}{'level':>6}{'param':>8}{'PSNR':>9}{'SSIM':>8}{'GMSD':>8}")
for kind in protocol.kinds:
    for level in protocol.levels:
        out = apply_degradation(img, DegradationSpec(kind, level, seed=0), protocol)
        print(
            f"{kind:<16}{level:>6}{protocol.parameter(kind, level):>8}"
            f"{psnr(img, out):>9.2f}{ssim(img, out):>8.4f}{gmsd(img, out):>8.4f}"
        )

###############################################################################
# Level 0 does not exist; asking for it is an error rather than a silent copy.

try:
    DegradationSpec("jpeg", 0)
except ValueError as exc:
    print("rejected:", exc)
