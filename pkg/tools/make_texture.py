"""Regenerate the bundled textured test image (deterministic).

The image mixes a stochastic fine-grain texture, oriented stripes, a coarse
blotch field and a smooth color ramp, so that pointwise and pooled-statistics
objectives pull fits in measurably different directions.

Usage: python3 tools/make_texture.py [side] [out.png]
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from splatperc._ops import gaussian_kernel_1d, sep_blur
from splatperc.image_io import ImageBuffer, save_image


def band_noise(rng, h, w, sigma, gain):
    z = rng.normal(0.0, 1.0, (h, w))
    z = z - sep_blur(z, gaussian_kernel_1d(sigma * 3.0))
    z = sep_blur(z, gaussian_kernel_1d(sigma))
    return gain * z / (np.abs(z).std() + 1e-9)


def make(side=96, seed=20240601):
    rng = np.random.default_rng(seed)
    h = w = side
    yy, xx = np.mgrid[0:h, 0:w].astype(float) / side

    base_r = 0.45 + 0.25 * xx
    base_g = 0.40 + 0.20 * yy
    base_b = 0.50 - 0.20 * xx * yy

    grain = band_noise(rng, h, w, 0.8, 0.16)
    blotch = band_noise(rng, h, w, 3.0, 0.22)
    stripes = 0.16 * np.sin(2 * np.pi * (4.5 * (xx + 0.7 * yy))
                            + 0.9 * band_noise(rng, h, w, 2.0, 1.0))

    grain_mask = sep_blur((xx < 0.52).astype(float), gaussian_kernel_1d(2.0))
    stripe_mask = sep_blur(((xx >= 0.48) & (yy < 0.52)).astype(float),
                           gaussian_kernel_1d(2.0))
    blotch_mask = sep_blur(((xx >= 0.48) & (yy >= 0.48)).astype(float),
                           gaussian_kernel_1d(2.0))

    lum = grain * grain_mask + stripes * stripe_mask + blotch * blotch_mask
    tint = 0.5 + 0.5 * sep_blur(rng.normal(0, 1, (h, w)),
                                gaussian_kernel_1d(6.0))
    img = np.stack(
        [
            base_r + lum * (0.9 + 0.2 * tint),
            base_g + lum,
            base_b + lum * (1.1 - 0.2 * tint),
        ],
        axis=2,
    )
    return np.clip(img, 0.0, 1.0)


if __name__ == "__main__":
    side = int(sys.argv[1]) if len(sys.argv) > 1 else 96
    out = sys.argv[2] if len(sys.argv) > 2 else str(
        Path(__file__).resolve().parents[1]
        / "src" / "splatperc" / "assets" / "textured.png")
    save_image(ImageBuffer(make(side)), out)
    print(f"wrote {out}")
