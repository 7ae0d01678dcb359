"""Pixel / feature similarities, thresholded targets and the arctanh similarity loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import tensor as T
from .nn.tensor import Tensor

EPS_CLAMP = 1e-6
TARGET_MODES = ("full", "minus", "plus", "low", "high")


class SimilarityError(ValueError):
    pass


CENTERING = ("image", "dataset")


def _centered_unit_rows(x, what="image", center="image"):
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if center == "image":
        x = x - x.mean(axis=1, keepdims=True)
    elif center == "dataset":
        x = x - x.mean(axis=0, keepdims=True)
    else:
        raise SimilarityError(f"center must be one of {CENTERING}, got {center!r}")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise SimilarityError(f"{what} {int(bad[0])} is constant; it has no direction after centering")
    return x / norms[:, None]


def _cosine_matrix(units):
    s = units @ units.T
    s = (s + s.T) / 2  # exact symmetry
    np.clip(s, -1.0, 1.0, out=s)
    np.fill_diagonal(s, 1.0)
    return s


def pixel_similarity(images, center="image"):
    """Cosine similarity of flattened, mean-subtracted, normalized pixel vectors.

    ``center="image"`` subtracts each image's own mean pixel value;
    ``center="dataset"`` subtracts the mean image of the set instead (the
    per-pixel mean across images), which spreads similarities around zero.
    Returns an (N, N) float64 matrix with unit diagonal.
    """
    images = np.asarray(images)
    if len(images) < 2:
        raise SimilarityError("need at least two images")
    return _cosine_matrix(_centered_unit_rows(images, "image", center))


def layer_similarity(features, layer=None):
    """Same recipe as :func:`pixel_similarity` for (P, F) feature vectors."""
    features = np.asarray(features)
    if len(features) < 2:
        raise SimilarityError("need at least two feature vectors")
    what = "feature vector" if layer is None else f"layer {layer} feature vector"
    return _cosine_matrix(_centered_unit_rows(features, what))


@dataclass
class SimilarityTarget:
    """Pairwise target values plus a mask of contributing pairs.

    ``values`` and ``mask`` are symmetric (N, N) arrays; the diagonal is
    never masked in and its value is stored as 0.
    """

    values: np.ndarray
    mask: np.ndarray
    th: float = 0.0
    th2: float = 0.0
    mode: str = "full"
    eps_clamp: float = EPS_CLAMP

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.mask = np.array(self.mask, dtype=bool)
        self.values = self.values.copy()
        np.fill_diagonal(self.mask, False)
        np.fill_diagonal(self.values, 0.0)

    @property
    def n(self):
        return len(self.values)

    def num_pairs(self):
        """Unordered pairs that contribute to the loss."""
        return int(np.triu(self.mask, 1).sum())

    def lookup(self, i, j):
        return self.values[i, j], self.mask[i, j]

    # -- file format ---------------------------------------------------------
    # b"SIMT" | u32 version | u32 N | f64 th | f64 th2 | f64 eps | u32 mode
    # | float32 LE strict lower triangle, row-major | packbits(mask lower triangle)

    MAGIC = b"SIMT"
    VERSION = 1

    def to_bytes(self):
        il = np.tril_indices(self.n, -1)
        head = self.MAGIC + struct.pack("<IIdddI", self.VERSION, self.n, self.th, self.th2,
                                        self.eps_clamp, TARGET_MODES.index(self.mode)
                                        if self.mode in TARGET_MODES else 255)
        tri = self.values[il].astype("<f4").tobytes()
        bits = np.packbits(self.mask[il]).tobytes()
        return head + tri + bits

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        hsize = 4 + struct.calcsize("<IIdddI")
        if len(data) < hsize:
            raise SimilarityError("target file truncated in header")
        if data[:4] != cls.MAGIC:
            raise SimilarityError(f"bad magic {data[:4]!r}")
        version, n, th, th2, eps, mode = struct.unpack_from("<IIdddI", data, 4)
        if version != cls.VERSION:
            raise SimilarityError(f"unsupported target file version {version}")
        m = n * (n - 1) // 2
        nbits = (m + 7) // 8
        if len(data) != hsize + 4 * m + nbits:
            raise SimilarityError(f"target file has {len(data)} bytes, expected {hsize + 4 * m + nbits}")
        tri = np.frombuffer(data, dtype="<f4", count=m, offset=hsize)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=hsize + 4 * m))[:m]
        il = np.tril_indices(n, -1)
        values = np.zeros((n, n), np.float32)
        mask = np.zeros((n, n), bool)
        values[il] = tri
        mask[il] = bits.astype(bool)
        values = values + values.T
        mask = mask | mask.T
        name = TARGET_MODES[mode] if mode < len(TARGET_MODES) else "double"
        return cls(values, mask, th=th, th2=th2, mode=name, eps_clamp=eps)


def _check_th(th, name="Th"):
    if not 0 < th < 1:
        raise SimilarityError(f"{name} must lie in (0, 1), got {th}")


def _ternary(s, th, eps_clamp):
    hi = np.float32(1 - eps_clamp)
    v = np.zeros(s.shape, np.float32)
    v[s > th] = hi
    v[s < -th] = -hi
    return v


def _off_diagonal(n):
    return ~np.eye(n, dtype=bool)


def threshold_target(s_pixel, th, eps_clamp=EPS_CLAMP):
    """+-(1 - eps) beyond +-th, 0 inside; every off-diagonal pair counts."""
    _check_th(th)
    s = np.asarray(s_pixel)
    return SimilarityTarget(_ternary(s, th, eps_clamp), _off_diagonal(len(s)), th=th,
                            mode="full", eps_clamp=eps_clamp)


def double_threshold_target(s_pixel, th1, th2, eps_clamp=EPS_CLAMP):
    """Like :func:`threshold_target` with th1 but pairs with th2 < |S| <= th1 left out."""
    _check_th(th1, "Th1")
    _check_th(th2, "Th2")
    if not th1 > th2:
        raise SimilarityError(f"need Th1 > Th2, got {th1} <= {th2}")
    s = np.asarray(s_pixel)
    a = np.abs(s)
    gap = (a > th2) & (a <= th1)
    return SimilarityTarget(_ternary(s, th1, eps_clamp), _off_diagonal(len(s)) & ~gap,
                            th=th1, th2=th2, mode="double", eps_clamp=eps_clamp)


def subset_target(s_pixel, th, eps_clamp=EPS_CLAMP, mode="full"):
    """Thresholded target restricted to one of the pair sets.

    minus: S < -th or |S| < th; plus: S > th or |S| < th; low: |S| < th;
    high: |S| > th; full: everything.
    """
    if mode not in TARGET_MODES:
        raise SimilarityError(f"unknown target mode {mode!r}; choose from {TARGET_MODES}")
    _check_th(th)
    s = np.asarray(s_pixel)
    low = np.abs(s) < th
    sets = {
        "full": np.ones(s.shape, bool),
        "minus": (s < -th) | low,
        "plus": (s > th) | low,
        "low": low,
        "high": np.abs(s) > th,
    }
    return SimilarityTarget(_ternary(s, th, eps_clamp), sets[mode] & _off_diagonal(len(s)),
                            th=th, mode=mode, eps_clamp=eps_clamp)


def make_target(s_pixel, th, eps_clamp=EPS_CLAMP, mode="full", th2=None):
    if mode == "double":
        return double_threshold_target(s_pixel, th, th2, eps_clamp)
    return subset_target(s_pixel, th, eps_clamp, mode)


def num_pairs(n):
    """Unordered pairs among n images."""
    return n * (n - 1) // 2


# --- differentiable pieces ---------------------------------------------------

class GammaMixer:
    """Trainable softmax weights over K per-layer similarity matrices."""

    def __init__(self, k, dtype=np.float32):
        if k < 1:
            raise ValueError("need at least one layer to mix")
        self.logits = Tensor(np.zeros(k, dtype=dtype), requires_grad=True, name="gamma_logits")

    @property
    def k(self):
        return self.logits.size

    def weights(self):
        return T.softmax(self.logits)

    def gammas(self):
        """Current weights as a float64 array (not recorded)."""
        return self.weights().data.astype(np.float64)

    def parameters(self):
        return [self.logits]


def centered_unit(features, layer=None):
    """Recorded per-row centering and L2 normalization of (P, ...) features."""
    x = T.reshape(features, (features.shape[0], -1))
    xc = T.sub(x, T.mean(x, axis=1, keepdims=True))
    sq = T.tsum(T.square(xc), axis=1, keepdims=True)
    zero = np.flatnonzero(sq.data.ravel() == 0)
    if zero.size:
        where = "" if layer is None else f"layer {layer} "
        raise SimilarityError(f"{where}image {int(zero[0])}: zero feature vector after centering")
    return T.div(xc, T.sqrt(sq))


def layer_similarity_t(features, layer=None):
    """Differentiable (P, P) cosine similarity matrix of centered features."""
    u = centered_unit(features, layer)
    return T.matmul(u, T.transpose(u))


def pair_similarity_t(features, left, right, layer=None):
    """Differentiable cosine similarity of rows ``left[p]`` and ``right[p]`` only."""
    u = centered_unit(features, layer)
    return T.tsum(T.mul(T.take(u, left), T.take(u, right)), axis=1)


def mix_layers(per_layer, mixer):
    """Convex combination ``sum_l gamma_l * S_l`` with gamma = softmax(logits)."""
    if len(per_layer) != mixer.k:
        raise SimilarityError(f"mixer has {mixer.k} weights but got {len(per_layer)} layers")
    per_layer = [m if isinstance(m, Tensor) else Tensor(m, dtype=mixer.logits.dtype) for m in per_layer]
    shape = per_layer[0].shape
    if any(m.shape != shape for m in per_layer):
        raise SimilarityError("per-layer similarity matrices differ in shape")
    g = mixer.weights()
    out = T.mul(T.take(g, 0), per_layer[0])
    for l in range(1, len(per_layer)):
        out = T.add(out, T.mul(T.take(g, l), per_layer[l]))
    return out


def sim_loss(s_cnn, target_values, mask=None, eps_clamp=EPS_CLAMP, symmetric_count=2):
    """``sum (arctanh(clamp(S_cnn)) - arctanh(target))**2`` over masked entries.

    ``s_cnn`` may be a full (N, N) matrix (then the diagonal is dropped and each
    unordered pair is naturally counted twice) or a vector of per-pair values,
    in which case every pair is weighted by ``symmetric_count`` to match the
    ordered double sum. Target values never receive gradient.
    """
    s_cnn = s_cnn if isinstance(s_cnn, Tensor) else Tensor(s_cnn)
    if np.isnan(s_cnn.data).any():
        raise SimilarityError("NaN in network similarities")
    tv = np.asarray(target_values, dtype=np.float64)
    if tv.shape != s_cnn.shape:
        raise SimilarityError(f"target shape {tv.shape} != similarity shape {s_cnn.shape}")
    m = np.ones(tv.shape, bool) if mask is None else np.asarray(mask, bool)
    weight = np.zeros(tv.shape)
    if s_cnn.ndim == 2:
        weight[m] = 1.0
        np.fill_diagonal(weight, 0.0)
    else:
        weight[m] = float(symmetric_count)
    lim = 1.0 - eps_clamp
    z_target = np.arctanh(np.clip(tv, -lim, lim)).astype(s_cnn.dtype)
    clamped = T.clip(s_cnn, -lim, lim)
    resid = T.sub(T.arctanh(clamped), z_target)
    return T.tsum(T.mul(T.square(resid), weight.astype(s_cnn.dtype)))
