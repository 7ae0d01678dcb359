"""Joint classification + pixel-similarity regularization training."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import datasets, simreg
from .nn import SGD, GradTape, TapNet, default_architecture
from .nn import tensor as T
from .nn.layers import Architecture

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ExperimentConfig:
    classification_dataset: str = "mnist"
    regularization_dataset: str = "mnist"
    data_dir: str = "data"
    train_size: int = 10000
    test_size: int = 0  # 0 = whole test split
    alpha: float = 4.0
    th: float = 0.2
    th2: float = 0.0
    target_mode: str = "full"
    target_center: str = "dataset"
    eps_clamp: float = simreg.EPS_CLAMP
    epochs: int = 5
    batch_size: int = 64
    pair_batch: int = 16
    num_reg_images: int = 1000
    lr: float = 0.01
    momentum: float = 0.9
    decay_at: float = 0.75
    grad_clip: float = 0.0  # global L2 norm cap, 0 = off
    sim_reduction: str = "mean"
    seed: int = 0
    channels: str = "16,32,32,64"
    output_dir: str = "runs"

    _INT = ("train_size", "test_size", "epochs", "batch_size", "pair_batch", "num_reg_images", "seed")
    _FLOAT = ("alpha", "th", "th2", "eps_clamp", "lr", "momentum", "decay_at",
              "grad_clip")

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigError(msg)

        if self.alpha < 0:
            bad(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.th < 1:
            bad(f"th must lie in (0, 1), got {self.th}")
        if self.target_mode == "double":
            if not 0 < self.th2 < self.th:
                bad(f"double target needs 0 < th2 < th, got th2={self.th2}")
        elif self.target_mode not in simreg.TARGET_MODES:
            bad(f"unknown target_mode {self.target_mode!r}")
        if self.target_center not in simreg.CENTERING:
            bad(f"target_center must be one of {simreg.CENTERING}, got {self.target_center!r}")
        if not 0 < self.eps_clamp < 0.5:
            bad(f"eps_clamp must lie in (0, 0.5), got {self.eps_clamp}")
        for name in ("epochs", "batch_size", "pair_batch"):
            if getattr(self, name) < 1:
                bad(f"{name} must be >= 1")
        if self.num_reg_images < 2:
            bad("num_reg_images must be >= 2")
        if self.train_size < 0 or self.test_size < 0:
            bad("train_size/test_size must be >= 0")
        if self.lr <= 0:
            bad(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            bad(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.decay_at <= 1:
            bad(f"decay_at must lie in (0, 1], got {self.decay_at}")
        if self.grad_clip < 0:
            bad("grad_clip must be >= 0")
        if self.sim_reduction not in ("sum", "mean"):
            bad(f"sim_reduction must be 'sum' or 'mean', got {self.sim_reduction!r}")
        if len(self.channel_list()) != 4:
            bad("channels must list four conv widths")

    def channel_list(self):
        try:
            return tuple(int(c) for c in str(self.channels).split(","))
        except ValueError:
            raise ConfigError(f"channels must be comma-separated ints, got {self.channels!r}") from None

    # -- text form -----------------------------------------------------------

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def to_text(self):
        return "".join(f"{k} = {getattr(self, k)}\n" for k in sorted(self.keys()))

    def run_hash(self):
        """Names the run; output_dir is excluded so moving a run keeps its name."""
        text = "".join(f"{k} = {getattr(self, k)}\n" for k in sorted(self.keys()) if k != "output_dir")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @classmethod
    def from_text(cls, text):
        values = {}
        known = set(cls.keys())
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"unknown key {key!r}", lineno)
            try:
                if key in cls._INT:
                    value = int(value)
                elif key in cls._FLOAT:
                    value = float(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}", lineno) from None
            values[key] = value
        try:
            return cls(**values)
        except ConfigError as exc:
            line = None
            for lineno, raw in enumerate(text.splitlines(), 1):
                k = raw.split("=", 1)[0].strip()
                if k and k in str(exc).split()[0]:
                    line = lineno
            raise ConfigError(str(exc), line) from None

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def architecture(self, input_shape, num_classes):
        return default_architecture(tuple(input_shape), num_classes, self.channel_list())


@dataclass
class TrainResult:
    net: TapNet
    mixer: simreg.GammaMixer
    records: list = field(default_factory=list)
    config: ExperimentConfig | None = None

    @property
    def epochs(self):
        return [r for r in self.records if r["kind"] == "epoch"]

    @property
    def steps(self):
        return [r for r in self.records if r["kind"] == "step"]

    def log_lines(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# --- data plumbing ------------------------------------------------------------

def load_splits(cfg):
    train = datasets.load_dataset(cfg.classification_dataset, "train", cfg.data_dir)
    test = datasets.load_dataset(cfg.classification_dataset, "test", cfg.data_dir)
    if cfg.train_size and cfg.train_size < len(train):
        train = train.subset(np.arange(cfg.train_size), f"first:{cfg.train_size}")
    if cfg.test_size and cfg.test_size < len(test):
        test = test.subset(np.arange(cfg.test_size), f"first:{cfg.test_size}")
    if cfg.regularization_dataset == cfg.classification_dataset:
        reg_pool = train
    else:
        reg_pool = datasets.load_dataset(cfg.regularization_dataset, "train", cfg.data_dir)
    reg = datasets.select_regularization_images(reg_pool, cfg.num_reg_images, cfg.seed)
    if reg.shape[1:] != train.shape[1:]:
        reg = datasets.resize(reg, train.shape[1])
    if reg.shape[0] != train.shape[0]:
        raise ConfigError(f"regularization images have {reg.shape[0]} channels, "
                          f"classifier expects {train.shape[0]}")
    return train, test, reg


def build_target(reg_images, cfg):
    s_pix = simreg.pixel_similarity(reg_images, center=cfg.target_center)
    return simreg.make_target(s_pix, cfg.th, cfg.eps_clamp, cfg.target_mode, cfg.th2 or None)


def streams(seed):
    """Independent RNG streams: batch order, pair draws, evaluation noise."""
    return (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]),
            np.random.default_rng([seed, 3]))


def epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


class PairSampler:
    """Uniform draws of unordered contributing pairs from a target."""

    def __init__(self, target, rng):
        self.target = target
        self.rng = rng
        self.n = target.n
        self.all_pairs = bool(target.mask.sum() == self.n * (self.n - 1))
        if not self.all_pairs:
            self.pairs = np.argwhere(np.triu(target.mask, 1))
            if not len(self.pairs):
                raise ConfigError("target mask admits no pairs")

    def draw(self, k):
        if self.all_pairs:
            i = self.rng.integers(0, self.n, k)
            j = self.rng.integers(0, self.n - 1, k)
            j = j + (j >= i)
        else:
            sel = self.pairs[self.rng.integers(0, len(self.pairs), k)]
            i, j = sel[:, 0], sel[:, 1]
        return i, j


def pair_similarities(net, mixer, images_i, images_j):
    """Mixed network similarity for each (i, j) pair, plus the per-layer values."""
    k = len(images_i)
    _, feats = net.forward(np.concatenate([images_i, images_j]))
    left, right = np.arange(k), np.arange(k, 2 * k)
    per_layer = [simreg.pair_similarity_t(f, left, right, layer=l) for l, f in enumerate(feats)]
    return simreg.mix_layers(per_layer, mixer), per_layer


def regularization_loss(net, mixer, reg_images, target, i, j, eps_clamp, reduction="sum"):
    s_cnn, _ = pair_similarities(net, mixer, reg_images[i], reg_images[j])
    loss = simreg.sim_loss(s_cnn, target.values[i, j], eps_clamp=eps_clamp)
    if reduction == "mean":
        loss = T.mul(loss, 1.0 / (2 * len(i)))
    return loss


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / norm)
        grads = [g * scale for g in grads]
    return grads, norm


def lr_at(cfg, step, total_steps):
    return cfg.lr * (0.1 if step >= math.floor(cfg.decay_at * total_steps) else 1.0)


# --- training -------------------------------------------------------------------

def train(cfg, data=None, log_every_step=True):
    """Train a TapNet with ``L = L_task + alpha * L_sim``.

    ``data`` may supply ``(train, test, reg)`` sets to skip loading. With
    alpha == 0 the similarity loss is still measured each step (outside the
    tape) but never reaches the parameters.
    """
    train_set, test_set, reg_set = data if data is not None else load_splits(cfg)
    arch = cfg.architecture(train_set.shape, max(train_set.num_classes, test_set.num_classes))
    net = TapNet(arch, seed=cfg.seed)
    mixer = simreg.GammaMixer(net.num_taps)
    target = build_target(reg_set.images, cfg)
    batch_rng, pair_rng, _ = streams(cfg.seed)
    sampler = PairSampler(target, pair_rng)

    params = net.parameters() + mixer.parameters()
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    x_train, y_train = train_set.images, train_set.labels
    reg_images = reg_set.images
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    result = TrainResult(net, mixer, config=cfg)
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"task": 0.0, "sim": 0.0, "correct": 0, "seen": 0}
        for idx in epoch_batches(batch_rng, len(train_set), cfg.batch_size):
            i, j = sampler.draw(cfg.pair_batch)
            with GradTape() as tape:
                tape.watch(*params)
                logits, _ = net.forward(x_train[idx])
                l_task = T.cross_entropy(logits, y_train[idx])
                if cfg.alpha > 0:
                    l_sim = regularization_loss(net, mixer, reg_images, target, i, j, cfg.eps_clamp,
                                                cfg.sim_reduction)
                    loss = T.add(l_task, T.mul(l_sim, cfg.alpha))
                else:
                    loss = l_task
            if cfg.alpha == 0:
                l_sim = regularization_loss(net, mixer, reg_images, target, i, j, cfg.eps_clamp,
                                                cfg.sim_reduction)
            if not np.isfinite(loss.data) or not np.isfinite(l_sim.data):
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            grads, gnorm = clip_by_global_norm(tape.gradient(loss, params), cfg.grad_clip)
            opt.lr = lr_at(cfg, step, total)
            opt.step(grads)
            sums["task"] += l_task.item() * len(idx)
            sums["sim"] += l_sim.item() * len(idx)
            sums["correct"] += int((logits.data.argmax(1) == y_train[idx]).sum())
            sums["seen"] += len(idx)
            if log_every_step:
                result.records.append({"kind": "step", "step": step, "epoch": epoch,
                                       "l_task": l_task.item(), "l_sim": l_sim.item(),
                                       "grad_norm": gnorm, "lr": opt.lr})
            step += 1
        rec = {
            "kind": "epoch", "epoch": epoch,
            "train_acc": sums["correct"] / sums["seen"],
            "test_acc": evaluate(net, test_set),
            "l_task": sums["task"] / sums["seen"],
            "l_sim": sums["sim"] / sums["seen"],
            "gamma": [float(g) for g in mixer.gammas()],
        }
        result.records.append(rec)
        log.info("epoch %d: train %.4f test %.4f L_task %.4f L_sim %.3f gamma %s", epoch,
                 rec["train_acc"], rec["test_acc"], rec["l_task"], rec["l_sim"],
                 np.round(rec["gamma"], 3))
    return result


def evaluate(net, dataset, transform=None, seed=0, batch_size=500):
    """Fraction of correct argmax predictions, optionally on transformed inputs.

    ``transform(images, rng)`` receives a generator seeded from ``seed``, so
    stochastic perturbations are reproducible per call.
    """
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if transform is not None:
        images = transform(images, np.random.default_rng(seed))
    return float((net.predict(images, batch_size) == np.asarray(labels)).mean())
