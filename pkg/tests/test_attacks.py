import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixreg import attacks
from pixreg.attacks import AttackError, NoiseSpec, apply_noise, boundary_attack, boundary_score, fgsm
from pixreg.datasets import synthetic_digits
from pixreg.nn import TapNet, Tensor
from pixreg.nn import tensor as T
from pixreg.trainer import ExperimentConfig, train


@pytest.fixture(scope="module")
def toy_model():
    cfg = ExperimentConfig(classification_dataset="synthetic", regularization_dataset="synthetic",
                           train_size=1000, test_size=200, num_reg_images=20, epochs=3,
                           channels="8,8,8,8", alpha=0.0, lr=0.05)
    return train(cfg).net


@pytest.fixture(scope="module")
def toy_data():
    return synthetic_digits(200, seed=1)


@pytest.mark.parametrize("family", attacks.NOISE_FAMILIES)
def test_zero_noise_is_identity(family):
    x = np.random.default_rng(0).uniform(0, 1, (3, 1, 5, 5)).astype(np.float32)
    assert apply_noise(x, NoiseSpec(family, 0.0)).tobytes() == x.tobytes()


def test_gaussian_noise_std():
    x = np.full((1, 1, 100, 100), 0.5, np.float32)
    d = apply_noise(x, NoiseSpec("gaussian", 0.1, seed=1)) - x
    assert d.std() == pytest.approx(0.1, rel=0.05)


def test_uniform_noise_range():
    x = np.full((1, 1, 100, 100), 0.5, np.float32)
    d = apply_noise(x, NoiseSpec("uniform", 0.2, seed=1)) - x
    assert np.abs(d).max() <= 0.2 + 1e-6
    assert d.std() == pytest.approx(0.2 / np.sqrt(3), rel=0.05)


def test_salt_pepper_fraction():
    x = np.full((1, 1, 100, 100), 0.5, np.float32)
    out = apply_noise(x, NoiseSpec("salt_pepper", 0.06, seed=2))
    replaced = out != 0.5
    assert replaced.mean() == pytest.approx(0.06, rel=0.1)
    assert set(np.unique(out[replaced])) <= {0.0, 1.0}


@pytest.mark.parametrize("family", attacks.NOISE_FAMILIES)
def test_noise_is_clipped_and_reproducible(family):
    x = np.random.default_rng(0).uniform(0, 1, (4, 1, 6, 6)).astype(np.float32)
    spec = NoiseSpec(family, 0.7, seed=9)
    a, b = apply_noise(x, spec), apply_noise(x, spec)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


def test_noise_spec_validation():
    with pytest.raises(AttackError):
        NoiseSpec("gaussian", -0.1)
    with pytest.raises(AttackError):
        NoiseSpec("pink", 0.1)


def logistic(w=1.0, b=0.0):
    """Two-class model whose class-1 logit is w * x + b (class 0 logit fixed at 0)."""
    def model(x):
        flat = T.reshape(x, (x.shape[0], -1))
        z = T.add(T.mul(flat, w), b)
        return T.concat([T.mul(z, 0.0), z], axis=1)
    return model


def test_fgsm_on_logistic_model():
    x = np.array([[0.5]], np.float32)
    assert fgsm(logistic(), x, np.array([0]), 0.1)[0, 0] == pytest.approx(0.6)
    assert fgsm(logistic(), x, np.array([1]), 0.1)[0, 0] == pytest.approx(0.4)
    assert fgsm(logistic(), x, np.array([0]), 0.0).tobytes() == x.tobytes()


def test_fgsm_sign_of_zero_gradient_is_zero():
    x = np.array([[0.3]], np.float32)
    assert fgsm(logistic(w=0.0), x, np.array([0]), 0.2)[0, 0] == np.float32(0.3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fgsm_rejects_non_finite_gradient():
    x = np.array([[0.5]], np.float32)
    with pytest.raises(AttackError):
        fgsm(logistic(w=np.inf), x, np.array([0]), 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 0.5))
def test_fgsm_respects_linf_budget(seed, eps):
    net = TapNet(ExperimentConfig(channels="2,2,2,2").architecture((1, 8, 8), 3), seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
    adv = fgsm(net, x, rng.integers(0, 3, 4), eps)
    assert np.abs(adv - x).max() <= np.float32(eps) + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1


def test_transfer_attack_self(toy_model, toy_data):
    grid = [0.0, 0.05, 0.1, 0.2, 0.3]
    rep = attacks.transfer_attack(toy_model, toy_model, toy_data.images, toy_data.labels, grid)
    clean = float((toy_model.predict(toy_data.images) == toy_data.labels).mean())
    assert rep.accuracy[0] == clean
    assert rep.accuracy[-1] < rep.accuracy[0]
    assert all(b <= a + 0.02 for a, b in zip(rep.accuracy, rep.accuracy[1:]))


def test_transfer_to_untrained_target_is_chance(toy_model):
    ds = synthetic_digits(1000, seed=2)
    target = TapNet(toy_model.arch, seed=77)
    rep = attacks.transfer_attack(toy_model, target, ds.images, ds.labels, [0.0, 0.1])
    assert all(abs(a - 0.1) < 0.08 for a in rep.accuracy)


def test_transfer_needs_matching_shapes(toy_model):
    other = TapNet(ExperimentConfig(channels="2,2,2,2").architecture((1, 8, 8), 10), seed=0)
    with pytest.raises(AttackError):
        attacks.transfer_attack(toy_model, other, np.zeros((1, 1, 8, 8)), [0], [0.0])


def test_boundary_attack_constant_adversary_shrinks_to_zero():
    x = np.random.default_rng(0).uniform(0, 1, (1, 6, 6)).astype(np.float32)
    res = boundary_attack(lambda img: 1, x, 0, steps=50, seed=0)
    assert not res.failed
    assert res.distances[-1] <= 1e-3 * np.sqrt(x.size)
    assert res.violations == 0


def test_boundary_attack_linear_boundary_distance():
    w, c = np.array([0.6, 0.8]), 0.9
    x = np.array([0.3, 0.4], np.float32)
    decide = lambda p: int(np.dot(w, p) > c)
    analytic = abs(np.dot(w, x) - c) / np.linalg.norm(w)
    res = boundary_attack(decide, x, 0, steps=200, seed=3)
    assert res.distances[-1] == pytest.approx(analytic, rel=0.1)
    assert all(b <= a for a, b in zip(res.distances, res.distances[1:]))


def test_boundary_attack_reports_failed_initialization():
    res = boundary_attack(lambda img: 0, np.zeros((1, 3, 3), np.float32), 0, seed=0)
    assert res.failed and res.adversarial is None and res.queries == 50


def test_boundary_attack_on_trained_model(toy_model, toy_data):
    decide = attacks.net_decision(toy_model)
    for i in range(10):
        x, y = toy_data.images[i], int(toy_data.labels[i])
        if decide(x) != y:
            continue
        res = boundary_attack(decide, x, y, steps=50, seed=i)
        if res.failed:
            continue
        assert decide(res.adversarial) != y
        assert res.violations == 0
        assert all(b <= a for a, b in zip(res.distances, res.distances[1:]))
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1


def test_boundary_score_examples():
    assert boundary_score([np.array([0.1, 0, 0, 0])], 4) == pytest.approx(0.0025)
    assert boundary_score([np.zeros(4), np.zeros(4)]) == 0.0
    etas = [np.array([1.0, 0, 0, 0]), np.array([2.0, 0, 0, 0]), np.array([3.0, 0, 0, 0])]
    assert boundary_score(etas, 4) == pytest.approx(4 / 4)
    with pytest.raises(AttackError):
        boundary_score([])


def test_boundary_report_defaults_and_json(toy_model, toy_data):
    rep = attacks.boundary_report(toy_model, toy_data.images[:4], toy_data.labels[:4], steps=5, repeats=2)
    assert rep.params["steps"] == 5 and rep.params["repeats"] == 2
    assert len(rep.scores) == 2 and rep.score == pytest.approx(np.mean(rep.scores))
    back = attacks.AttackReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()


def test_noise_attack_report(toy_model, toy_data):
    rep = attacks.noise_attack(toy_model, toy_data.images, toy_data.labels, "gaussian", [0, 0.05, 0.1])
    assert len(rep.accuracy) == 3
    assert rep.accuracy[0] == float((toy_model.predict(toy_data.images) == toy_data.labels).mean())
