"""Black-box attack battery: random noise, transferred FGSM, Boundary Attack."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import GradTape, Tensor
from .nn import tensor as T

NOISE_FAMILIES = ("gaussian", "uniform", "salt_pepper")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    family: str
    eps: float
    seed: int = 0
    c: float = 1.0  # salt & pepper: replacement probability = min(eps * c, 1)

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise AttackError(f"unknown noise family {self.family!r}")
        if self.eps < 0:
            raise AttackError(f"noise eps must be >= 0, got {self.eps}")


def apply_noise(x, spec, rng=None):
    """Perturb images in [0, 1] with the noise described by ``spec``.

    gaussian adds ``eps * N(0, 1)``, uniform adds ``U(-eps, eps)``, salt &
    pepper replaces each pixel by 0 or 1 with probability ``min(eps * c, 1)``.
    Results are clipped to [0, 1]. ``rng`` defaults to one seeded by spec.seed.
    """
    x = np.asarray(x, dtype=np.float32)
    if spec.eps == 0:
        return x.copy()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.family == "gaussian":
        out = x + np.float32(spec.eps) * rng.standard_normal(x.shape, dtype=np.float32)
    elif spec.family == "uniform":
        out = x + rng.uniform(-spec.eps, spec.eps, x.shape).astype(np.float32)
    else:
        p = min(spec.eps * spec.c, 1.0)
        hit = rng.random(x.shape) < p
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float32), x)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def noise_transform(family, eps, c=1.0):
    """Adapter for :func:`pixreg.trainer.evaluate`'s ``transform`` argument."""
    spec = NoiseSpec(family, eps, c=c)
    return lambda images, rng: apply_noise(images, spec, rng)


# --- gradient attacks ---------------------------------------------------------

def _logits(model, x):
    out = model.forward(x) if hasattr(model, "forward") else model(x)
    return out[0] if isinstance(out, tuple) else out


def input_gradient(model, x, y):
    """d(mean softmax cross-entropy)/dx for a batch."""
    xt = Tensor(np.asarray(x, dtype=np.float32))
    with GradTape() as tape:
        tape.watch(xt)
        loss = T.cross_entropy(_logits(model, xt), np.atleast_1d(y))
    g = tape.gradient(loss, xt)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def fgsm(model, x, y, eps, batch_size=500):
    """``clip(x + eps * sign(grad_x L), 0, 1)`` with sign(0) = 0."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if eps == 0:
        return x.copy()
    out = np.empty_like(x)
    for s in range(0, len(x), batch_size):
        g = input_gradient(model, x[s:s + batch_size], y[s:s + batch_size])
        out[s:s + batch_size] = x[s:s + batch_size] + np.float32(eps) * np.sign(g)
    return np.clip(out, 0.0, 1.0)


@dataclass
class AttackReport:
    attack: str
    params: dict = field(default_factory=dict)
    eps: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    distances: list = field(default_factory=list)  # boundary attack: per repeat, per image
    scores: list = field(default_factory=list)
    score: float | None = None
    failures: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def accuracy_curve(net, images, labels, eps_grid, perturb):
    labels = np.asarray(labels)
    accs = []
    for eps in eps_grid:
        adv = perturb(images, labels, eps)
        accs.append(float((net.predict(adv) == labels).mean()))
    return accs


def noise_attack(net, images, labels, family, eps_grid, seed=0, c=1.0):
    def perturb(x, _, eps):
        return apply_noise(x, NoiseSpec(family, eps, seed, c))

    accs = accuracy_curve(net, images, labels, eps_grid, perturb)
    return AttackReport(f"noise:{family}", {"c": c, "n_images": len(labels)},
                        [float(e) for e in eps_grid], accs, seeds=[seed])


def transfer_attack(substitute, target, images, labels, eps_grid):
    """Accuracy of ``target`` on FGSM examples crafted against ``substitute``."""
    if tuple(substitute.arch.input_shape) != tuple(target.arch.input_shape):
        raise AttackError("substitute and target disagree on input shape")
    accs = accuracy_curve(target, images, labels, eps_grid,
                          lambda x, y, eps: fgsm(substitute, x, y, eps))
    return AttackReport("transfer_fgsm", {"n_images": len(labels)},
                        [float(e) for e in eps_grid], accs)


# --- decision-based Boundary Attack --------------------------------------------

@dataclass
class BoundaryResult:
    adversarial: np.ndarray | None
    failed: bool
    distances: list  # L2 distance after init and after every accepted step
    queries: int = 0
    violations: int = 0  # accepted states that were not adversarial or moved outward

    @property
    def perturbation(self):
        return None if self.failed else self.original - self.adversarial

    original: np.ndarray | None = None


def boundary_attack(decision_fn, x, y, steps=50, seed=0, init_draws=50, bisection=10,
                    orth_step=0.01, inward_step=0.01, window=10, factor=1.5):
    """Decision-based Boundary Attack on a single image ``x`` with label ``y``.

    Starts from a uniform-noise image that ``decision_fn`` misclassifies,
    blends it toward ``x`` by bisection, then alternates an orthogonal step on
    the sphere around ``x`` with an inward step toward ``x``. Step sizes adapt
    toward a 50% success rate over windows of ``window`` proposals.
    """
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(seed)
    queries = 0

    def adversarial(img):
        nonlocal queries
        queries += 1
        return decision_fn(img) != y

    start = None
    for _ in range(init_draws):
        cand = rng.uniform(0, 1, x.shape).astype(np.float32)
        if adversarial(cand):
            start = cand
            break
    if start is None:
        return BoundaryResult(None, True, [], queries, 0, x)

    lo, hi = 0.0, 1.0
    for _ in range(bisection):
        mid = (lo + hi) / 2
        if adversarial(((1 - mid) * x + mid * start).astype(np.float32)):
            hi = mid
        else:
            lo = mid
    adv = ((1 - hi) * x + hi * start).astype(np.float32)
    dist = float(np.linalg.norm((adv - x).ravel()))
    distances = [dist]
    violations = 0
    orth_hist, in_hist = deque(maxlen=window), deque(maxlen=window)

    for _ in range(steps):
        diff = (adv - x).astype(np.float64)
        d = np.linalg.norm(diff.ravel())
        if d == 0:
            break
        unit = diff / d
        eta = rng.standard_normal(x.shape)
        eta *= orth_step * d / np.linalg.norm(eta.ravel())
        eta -= np.vdot(eta, unit) * unit
        sphere = diff + eta
        sphere *= d / np.linalg.norm(sphere.ravel())
        orth = np.clip(x + sphere, 0, 1).astype(np.float32)
        ok = adversarial(orth)
        orth_hist.append(ok)
        if ok:
            cand = (orth + inward_step * (x - orth)).astype(np.float32)
            ok_in = adversarial(cand)
            in_hist.append(ok_in)
            if ok_in:
                new_dist = float(np.linalg.norm((cand - x).ravel()))
                if new_dist > dist or decision_fn(cand) == y:
                    violations += 1
                else:
                    adv, dist = cand, new_dist
                    distances.append(dist)
        if len(orth_hist) == window:
            orth_step *= factor if np.mean(orth_hist) > 0.5 else 1 / factor
            orth_hist.clear()
        if len(in_hist) == window:
            inward_step *= factor if np.mean(in_hist) > 0.5 else 1 / factor
            inward_step = min(inward_step, 1.0)
            in_hist.clear()
    return BoundaryResult(adv, False, distances, queries, violations, x)


def boundary_score(perturbations, d=None):
    """Median over images of ``||eta||_2^2 / d``."""
    perturbations = list(perturbations)
    if not perturbations:
        raise AttackError("boundary score needs at least one perturbation")
    flat = [np.asarray(p, dtype=np.float64).ravel() for p in perturbations]
    d = flat[0].size if d is None else d
    return float(np.median([np.dot(p, p) / d for p in flat]))


def net_decision(net):
    return lambda img: int(net.predict(np.asarray(img)[None])[0])


def boundary_report(net, images, labels, steps=50, repeats=5, seed=0):
    """Boundary Attack over a set of images, repeated; the score is the repeat mean.

    Images the net already misclassifies are skipped (their minimal
    perturbation is zero); images without an adversarial start are counted
    as failures and left out of the median.
    """
    decide = net_decision(net)
    labels = np.asarray(labels)
    correct = net.predict(images) == labels
    d = int(np.prod(images.shape[1:]))
    dists, scores, failures, seeds = [], [], [], []
    for r in range(repeats):
        etas, run_d, fails = [], [], 0
        for i in np.flatnonzero(correct):
            s = seed * 1_000_003 + r * 10_007 + int(i)
            res = boundary_attack(decide, images[i], int(labels[i]), steps=steps, seed=s)
            if res.failed:
                fails += 1
                run_d.append(None)
                continue
            etas.append(res.perturbation)
            run_d.append(res.distances[-1])
        dists.append(run_d)
        failures.append(fails)
        seeds.append(seed * 1_000_003 + r * 10_007)
        scores.append(boundary_score(etas, d) if etas else float("nan"))
    return AttackReport("boundary", {"steps": steps, "repeats": repeats, "n_images": len(labels),
                                     "n_attacked": int(correct.sum())},
                        distances=dists, scores=scores, score=float(np.mean(scores)),
                        failures=failures, seeds=seeds)
