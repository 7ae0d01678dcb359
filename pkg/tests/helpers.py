"""Shared oracles for the test suite: finite differences and direct formulas."""
import math

import numpy as np

from pixreg.nn import GradTape, Tensor


def numeric_grad(fn, arrays, h=1e-3):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = float(fn(*arrays))
            a[idx] = old - h
            down = float(fn(*arrays))
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def tape_grad(build, arrays):
    """Autodiff gradients of the scalar Tensor returned by ``build(*tensors)``."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = build(*ts)
    return [np.asarray(g) for g in tape.gradient(out, ts)]


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(build, arrays, h=1e-3):
    """Largest norm-wise relative error between autodiff and central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    auto = tape_grad(build, arrays)
    num = numeric_grad(lambda *xs: build(*[Tensor(x) for x in xs]).data, arrays, h)
    return max(rel_error(x, y) for x, y in zip(auto, num))


def conv_loops(x, w, b, padding):
    """Straight-line convolution (cross-correlation), one output at a time."""
    n, c, hh, ww = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = hh + 2 * padding - kh + 1, ww + 2 * padding - kw + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ic, i + u, j + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc
    return out


def cosine_oracle(rows):
    """Pairwise cosine of per-row centered vectors with plain Python sums."""
    rows = [list(map(float, np.ravel(r))) for r in rows]
    cent = []
    for r in rows:
        m = math.fsum(r) / len(r)
        cent.append([v - m for v in r])
    norms = [math.sqrt(math.fsum(v * v for v in c)) for c in cent]
    n = len(rows)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = math.fsum(a * b for a, b in zip(cent[i], cent[j])) / (norms[i] * norms[j])
    return out


def pearson_oracle(x, y):
    """Two-pass textbook Pearson coefficient."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    mx = math.fsum(x) / len(x)
    my = math.fsum(y) / len(y)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
