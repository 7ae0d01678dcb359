"""
Regularized training and a black-box attack battery
===================================================

Two small networks are trained on synthetic digits, one plain and one with
the similarity term. Both then face random noise, transferred FGSM and the
Boundary Attack, and the pair is placed on the accuracy trade-off plane.
"""
import numpy as np

from pixreg import analysis, attacks
from pixreg.datasets import synthetic_digits
from pixreg.trainer import ExperimentConfig, train

base = dict(classification_dataset="synthetic", regularization_dataset="synthetic",
            train_size=1500, test_size=300, num_reg_images=100, epochs=3,
            channels="8,8,8,8", lr=0.05)
plain = train(ExperimentConfig(**base, alpha=0.0, seed=0))
reg = train(ExperimentConfig(**base, alpha=1.0, eps_clamp=0.01, seed=0))
for name, run in (("plain", plain), ("regularized", reg)):
    last = run.epochs[-1]
    print(f"{name:12s} test acc {last['test_acc']:.3f}  gamma {np.round(last['gamma'], 3)}")

test = synthetic_digits(300, seed=1)

# random noise: accuracy as the noise level grows
grid = [0.0, 0.1, 0.3, 0.5]
curves = {}
for name, run in (("plain", plain), ("regularized", reg)):
    rep = attacks.noise_attack(run.net, test.images, test.labels, "gaussian", grid, seed=0)
    curves[name] = rep.accuracy
    print(f"{name:12s} gaussian", np.round(rep.accuracy, 3))

# transferred FGSM: examples crafted on an independent plain substitute
substitute = train(ExperimentConfig(**base, alpha=0.0, seed=7)).net
fgsm_grid = [0.0, 0.02, 0.1]
for name, run in (("plain", plain), ("regularized", reg)):
    rep = attacks.transfer_attack(substitute, run.net, test.images, test.labels, fgsm_grid)
    print(f"{name:12s} transfer FGSM", np.round(rep.accuracy, 3))

# decision-based attack on a handful of images; larger score = more robust
for name, run in (("plain", plain), ("regularized", reg)):
    rep = attacks.boundary_report(run.net, test.images[:10], test.labels[:10], steps=50, repeats=2)
    print(f"{name:12s} boundary score {rep.score:.5f}  failures {rep.failures}")

point = analysis.tradeoff(curves["regularized"], curves["plain"], grid, alpha=1.0, th=0.2)
print(f"R0/U0 = {point.clean_ratio:.3f}   RD/UD = {point.distorted_ratio:.3f}   acceptable: {point.acceptable}")
