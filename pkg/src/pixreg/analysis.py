"""Trade-off metrics, Fourier views of perturbations, similarity correlation.

DFT convention: unnormalized forward transform (numpy's default), so for an
H x W image ``sum |F|^2 == H * W * sum |x|^2``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

A0 = 0.9
EPS_HIGH_RANDOM = 0.1
EPS_HIGH_FGSM = 0.02
T_LOW, T_HIGH = 0.2, 0.65


class AnalysisError(ValueError):
    pass


@dataclass
class TradeoffPoint:
    alpha: float
    th: float
    r0: float
    rd: float
    u0: float
    ud: float
    clean_ratio: float | None
    distorted_ratio: float | None
    acceptable: bool

    def to_dict(self):
        return asdict(self)


def _ratio(a, b):
    return None if b <= 0 else a / b


def _at(eps_grid, accs, eps):
    grid = np.asarray(eps_grid, dtype=float)
    hit = np.flatnonzero(np.isclose(grid, eps, rtol=0, atol=1e-12))
    if not hit.size:
        raise AnalysisError(f"epsilon {eps} is not on the grid {list(grid)}")
    return float(accs[hit[0]])


def tradeoff(reg_accs, unreg_accs, eps_grid, eps_high=EPS_HIGH_RANDOM, a0=A0, alpha=0.0, th=0.0):
    """Compare a regularized accuracy curve to a baseline one.

    Acceptable means ``R0/U0 >= a0`` and ``RD/UD > 1``. A zero denominator
    leaves its ratio as None and the point unacceptable.
    """
    if len(reg_accs) != len(eps_grid) or len(unreg_accs) != len(eps_grid):
        raise AnalysisError("accuracy curves must share the epsilon grid")
    vals = [_at(eps_grid, c, e) for c in (reg_accs, unreg_accs) for e in (0.0, eps_high)]
    if any(not 0 <= v <= 1 for v in vals):
        raise AnalysisError("accuracies must lie in [0, 1]")
    r0, rd, u0, ud = vals
    cr, dr = _ratio(r0, u0), _ratio(rd, ud)
    ok = cr is not None and dr is not None and cr >= a0 and dr > 1
    return TradeoffPoint(float(alpha), float(th), r0, rd, u0, ud, cr, dr, bool(ok))


def tradeoff_json(points):
    return json.dumps([p.to_dict() for p in points], sort_keys=True, indent=1) + "\n"


# --- Fourier -----------------------------------------------------------------

def _image2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise AnalysisError(f"expected a single-channel H x W image, got shape {x.shape}")
    return x


def fourier_power(image):
    """Centered power spectrum ``|fft2(x)|^2`` (unnormalized forward DFT)."""
    f = np.fft.fftshift(np.fft.fft2(_image2d(image)))
    return f.real ** 2 + f.imag ** 2


def _radii(shape):
    h, w = shape
    v = np.arange(h) - h // 2
    u = np.arange(w) - w // 2
    return np.floor(np.hypot(v[:, None], u[None, :])).astype(int)


def radial_bins(shape):
    """Integer radius of every bin and the profile length ``min(H, W)//2 + 1``."""
    return _radii(shape), min(shape) // 2 + 1


def radial_spectrum(power):
    """Mean power per integer radius from the center, out to ``min(H, W)//2``.

    Corner bins beyond that radius are folded into the last bin so the bins
    still partition the spectrum.
    """
    power = np.asarray(power, dtype=np.float64)
    r, n = radial_bins(power.shape)
    r = np.minimum(r, n - 1)
    sums = np.bincount(r.ravel(), weights=power.ravel(), minlength=n)
    counts = np.bincount(r.ravel(), minlength=n)
    return sums / np.maximum(counts, 1), counts


def corruption_spectrum(clean, corrupt_fn):
    """``E |F(C(X) - X)|`` over a set of single-channel images, plus ``log1p`` of it."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim == 4:
        if clean.shape[1] != 1:
            raise AnalysisError("corruption spectra are computed on single-channel images")
        clean = clean[:, 0]
    resid = np.asarray(corrupt_fn(clean), dtype=np.float64) - clean
    mag = np.abs(np.fft.fftshift(np.fft.fft2(resid), axes=(-2, -1)))
    mean = mag.mean(axis=0)
    return mean, np.log1p(mean)


def mean_radius(profile, counts=None):
    """Power-weighted mean radius divided by the largest radius."""
    profile = np.asarray(profile, dtype=np.float64)
    weight = profile * (1 if counts is None else np.asarray(counts))
    total = weight.sum()
    if total <= 0:
        raise AnalysisError("spectrum has no energy")
    return float((np.arange(len(profile)) * weight).sum() / total / (len(profile) - 1))


def frequency_category(spectrum, kind="magnitude", t_low=T_LOW, t_high=T_HIGH):
    """Classify a centered 2-d spectrum as ``low``, ``medium`` or ``high`` frequency.

    Each ring is weighted by its total power (magnitudes are squared first),
    and the weighted mean radius, as a fraction of the largest radius, is
    compared with the two thresholds. The thresholds put a brightness shift
    in low, a 3 x 3 box blur in medium and additive white noise in high.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if kind not in ("magnitude", "power"):
        raise AnalysisError(f"kind must be 'magnitude' or 'power', got {kind!r}")
    power = spectrum ** 2 if kind == "magnitude" else spectrum
    profile, counts = radial_spectrum(power)
    r = mean_radius(profile, counts)
    if r < t_low:
        return "low"
    if r > t_high:
        return "high"
    return "medium"


def sim_correlation(a, b):
    """Pearson correlation of two square matrices over their off-diagonal entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AnalysisError(f"need two square matrices of equal shape, got {a.shape} and {b.shape}")
    off = ~np.eye(len(a), dtype=bool)
    x, y = a[off], b[off]
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt(x @ x), np.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise AnalysisError("correlation undefined: an input has zero variance off the diagonal")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


# --- emitters ----------------------------------------------------------------

def profile_csv(profile, counts=None):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["radius", "mean_power", "count"])
    for r, p in enumerate(profile):
        w.writerow([r, repr(float(p)), "" if counts is None else int(counts[r])])
    return out.getvalue()


def matrix_csv(m):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    for row in np.asarray(m, dtype=np.float64):
        w.writerow([repr(float(v)) for v in row])
    return out.getvalue()
