"""
Where in frequency does a corruption live?
==========================================

Average magnitude spectra of (corrupted - clean) images, folded into radial
profiles and sorted into low, medium and high frequency.
"""
import numpy as np
from scipy import ndimage

from pixreg import analysis
from pixreg.datasets import synthetic_digits

# noise-free blobs, so that blurring removes image structure and not pixel noise
clean = synthetic_digits(200, seed=0, noise=0.0).images[:, 0].astype(np.float64)
rng = np.random.default_rng(0)

corruptions = {
    "brightness": lambda x: x + 0.2,
    "box blur": lambda x: ndimage.uniform_filter(x, size=(1, 3, 3), mode="nearest"),
    "gaussian noise": lambda x: x + 0.1 * rng.standard_normal(x.shape),
}
for name, fn in corruptions.items():
    spectrum, _ = analysis.corruption_spectrum(clean, fn)
    profile, counts = analysis.radial_spectrum(spectrum ** 2)
    radius = analysis.mean_radius(profile, counts)
    print(f"{name:15s} relative mean radius {radius:.2f} -> {analysis.frequency_category(spectrum)}")

# a pure horizontal cosine: all power sits in two symmetric bins
img = np.tile(np.cos(2 * np.pi * 3 * np.arange(16) / 16), (16, 1))
power = analysis.fourier_power(img)
print("cosine peaks at", [tuple(int(v) for v in p) for p in np.argwhere(power > power.max() / 2)])

# and the profile as CSV, ready for any plotting tool
profile, counts = analysis.radial_spectrum(power)
print(analysis.profile_csv(profile, counts).splitlines()[:5])
