import os
import subprocess
import sys

import numpy as np
import pytest

from helpers import conv_loops, grad_check, rel_error, tape_grad
from pixreg.nn import (SGD, Architecture, BadMagic, GradTape, LayerSpec, ModelFormatError,
                       NonFiniteGradient, ShapeError, TapeError, TapNet, Tensor, TruncatedStream,
                       UnsupportedVersion, default_architecture, load_model, save_model, sgd_step)
from pixreg.nn import tensor as T

SEEDS = range(10)


def away_from(rng, shape, lo=0.05, hi=1.0):
    """Random values with magnitude in [lo, hi] so kinks are never crossed."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def small_arch(skip=True):
    layers = (LayerSpec("conv", 3), LayerSpec("relu"),
              LayerSpec("conv", 3, skip=skip), LayerSpec("relu"), LayerSpec("pool", kernel=2),
              LayerSpec("flatten"), LayerSpec("linear", 4))
    return Architecture((1, 6, 6), 4, layers, taps=(1, 3))


# each case: (name, builder taking rng -> (function, arrays))
def _cases():
    def elementwise(op, make):
        return lambda rng: (lambda a, b: T.tsum(T.square(op(a, b))), make(rng))

    yield "add_broadcast", elementwise(T.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))])
    yield "sub_broadcast", elementwise(T.sub, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))])
    yield "mul_broadcast", elementwise(T.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))])
    yield "div", elementwise(T.div, lambda r: [r.normal(size=(3,)), r.uniform(0.5, 2, (3,))])
    yield "sqrt_exp_log", lambda r: (lambda a: T.tsum(T.mul(T.sqrt(a), T.log(a)) + T.exp(a)),
                                     [r.uniform(0.5, 2.0, (4, 3))])
    yield "relu", lambda r: (lambda a: T.tsum(T.square(T.relu(a))), [away_from(r, (5, 4))])
    yield "clip", lambda r: (lambda a: T.tsum(T.square(T.clip(a, -0.5, 0.5))),
                             [away_from(r, (6,), 0.05, 0.45) * np.array([1, 1, 1, 3, 3, 3])])
    yield "arctanh", lambda r: (lambda a: T.tsum(T.square(T.arctanh(a))), [r.uniform(-0.9, 0.9, (5,))])
    yield "sum_mean_axes", lambda r: (lambda a: T.tsum(T.square(T.mean(a, axis=1))) +
                                      T.tsum(T.square(T.tsum(a, axis=0, keepdims=True))),
                                      [r.normal(size=(3, 4))])
    yield "reshape_transpose", lambda r: (lambda a: T.tsum(T.mul(T.transpose(T.reshape(a, (3, 4))),
                                                                 T.reshape(a, (4, 3)))),
                                          [r.normal(size=(2, 6))])
    yield "take_repeated", lambda r: (lambda a: T.tsum(T.square(T.take(a, np.array([0, 2, 2, 1])))),
                                      [r.normal(size=(3, 2))])
    yield "concat", lambda r: (lambda a, b: T.tsum(T.square(T.concat([a, b], axis=0))),
                               [r.normal(size=(2, 3)), r.normal(size=(1, 3))])
    yield "matmul", lambda r: (lambda a, b: T.tsum(T.square(T.matmul(a, b))),
                               [r.normal(size=(3, 4)), r.normal(size=(4, 2))])
    yield "softmax", lambda r: (lambda a: T.tsum(T.mul(T.softmax(a), np.arange(5.0))), [r.normal(size=(2, 5))])
    yield "log_softmax", lambda r: (lambda a: T.tsum(T.mul(T.log_softmax(a), np.arange(5.0))),
                                    [r.normal(size=(2, 5))])
    yield "cross_entropy", lambda r: (lambda a: T.cross_entropy(a, np.array([1, 0, 4])), [r.normal(size=(3, 5))])
    yield "conv2d_pad1", lambda r: (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, padding=1))),
                                    [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))])
    yield "conv2d_stride2", lambda r: (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, stride=2))),
                                       [r.normal(size=(1, 2, 7, 7)), r.normal(size=(2, 2, 3, 3)), r.normal(size=(2,))])
    yield "avg_pool2d", lambda r: (lambda x: T.tsum(T.square(T.avg_pool2d(x, 2))), [r.normal(size=(2, 3, 4, 4))])
    yield "linear", lambda r: (lambda x, w, b: T.tsum(T.square(T.linear(x, w, b))),
                               [r.normal(size=(3, 5)), r.normal(size=(4, 5)), r.normal(size=(4,))])


CASES = dict(_cases())


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("case", sorted(CASES))
def test_op_gradients_match_central_differences(case, seed):
    fn, arrays = CASES[case](np.random.default_rng(seed))
    assert grad_check(fn, arrays) < 1e-3


def net_loss_fn(net, x, y):
    """Loss as a function of the parameter arrays, plus the ReLU on/off pattern it used."""
    names = list(net.params)

    def run(*ps):
        saved = dict(net.params)
        try:
            net.params.update(dict(zip(names, ps)))
            logits, feats = net.forward(Tensor(x))
            return T.cross_entropy(logits, y), [f.data > 0 for f in feats]
        finally:
            net.params.clear()
            net.params.update(saved)

    return run, [net.params[n].data.copy() for n in names]


def kink_free_check(run, arrays, h=1e-3):
    """Compare autodiff with central differences on every coordinate whose +-h
    evaluations keep the ReLU pattern of the base point (elsewhere the loss is
    not differentiable). Returns (relative error, fraction of coordinates kept)."""
    auto = tape_grad(lambda *ps: run(*ps)[0], arrays)
    base = run(*[Tensor(a) for a in arrays])[1]
    kept_auto, kept_num, total = [], [], 0
    for a, ga in zip(arrays, auto):
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            total += 1
            old = a[idx]
            vals = []
            for step in (h, -h):
                a[idx] = old + step
                loss, pattern = run(*[Tensor(q) for q in arrays])
                vals.append(loss.item() if all((p == b).all() for p, b in zip(pattern, base)) else None)
            a[idx] = old
            if None not in vals:
                kept_auto.append(ga[idx])
                kept_num.append((vals[0] - vals[1]) / (2 * h))
    return rel_error(np.array(kept_auto), np.array(kept_num)), len(kept_auto) / total


@pytest.mark.parametrize("skip", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_tapnet_parameter_gradients(seed, skip):
    rng = np.random.default_rng(seed)
    net = TapNet(small_arch(skip), seed=seed, dtype=np.float64)
    run, arrays = net_loss_fn(net, rng.uniform(0, 1, (3, 1, 6, 6)), np.array([0, 3, 1]))
    err, kept = kink_free_check(run, arrays)
    assert err < 1e-3
    assert kept > 0.75


def test_gradient_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    with GradTape() as tape:
        tape.watch(x)
        loss = x.sum()
    np.testing.assert_array_equal(tape.gradient(loss, x), np.ones((3, 4)))


def test_linear_mse_matches_closed_form():
    x = np.array([[0.5, -1.0, 2.0]])
    w = np.array([[0.3, 0.1, -0.2]])
    b = np.array([0.05])
    y = 1.5
    gw, gb = tape_grad(lambda w_, b_: T.tsum(T.square(T.sub(T.linear(Tensor(x), w_, b_), y))), [w, b])
    yhat = (x @ w.T + b)[0, 0]
    np.testing.assert_allclose(gw, 2 * (yhat - y) * x, rtol=1e-12)
    np.testing.assert_allclose(gb, [2 * (yhat - y)], rtol=1e-12)


def test_tape_rejects_misuse():
    a = Tensor(np.ones(3))
    outsider = Tensor(np.ones(3))
    with GradTape() as tape:
        tape.watch(a)
        loss = T.tsum(T.square(a))
        with pytest.raises(TapeError):
            tape.gradient(loss, a)
    with pytest.raises(TapeError):
        tape.gradient(loss, outsider)
    with GradTape() as tape2:
        tape2.watch(a)
        vec = T.square(a)
    with pytest.raises(TapeError):
        tape2.gradient(vec, a)
    with GradTape() as tape3:
        tape3.watch(a)
        loss = T.tsum(a)
    tape3.gradient(loss, a)
    with pytest.raises(TapeError):
        tape3.gradient(loss, a)


def test_gradients_are_bit_identical_on_replay():
    arch = small_arch()
    x = np.random.default_rng(3).uniform(0, 1, (4, 1, 6, 6))

    def grads():
        net = TapNet(arch, seed=11)
        with GradTape() as tape:
            loss = T.cross_entropy(net.forward(x)[0], np.array([0, 1, 2, 3]))
        return tape.gradient(loss, net.parameters())

    for a, b in zip(grads(), grads()):
        np.testing.assert_array_equal(a, b)


def test_forward_shapes_and_taps():
    net = TapNet(default_architecture(), seed=0)
    logits, feats = net.forward(np.zeros((2, 1, 28, 28), np.float32))
    assert logits.shape == (2, 10)
    assert [f.shape for f in feats] == [(2, 16, 28, 28), (2, 32, 28, 28), (2, 32, 14, 14), (2, 64, 14, 14)]
    assert all(f.dtype == np.float32 for f in feats)


def test_zero_weight_net_gives_zero_logits():
    net = TapNet(default_architecture((1, 8, 8), 3, (2, 2, 2, 2)), seed=0)
    net.load_state({k: np.zeros_like(v) for k, v in net.state().items()})
    logits, _ = net.forward(np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)))
    np.testing.assert_array_equal(logits.data, 0)


def test_identity_1x1_conv():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_two_conv_net_matches_loop_oracle():
    rng = np.random.default_rng(5)
    layers = (LayerSpec("conv", 2), LayerSpec("relu"), LayerSpec("conv", 3), LayerSpec("relu"),
              LayerSpec("flatten"), LayerSpec("linear", 2))
    net = TapNet(Architecture((1, 4, 4), 2, layers, (1, 3)), seed=2, dtype=np.float64)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape)
    x = rng.uniform(0, 1, (2, 1, 4, 4))
    s = net.state()
    h = np.maximum(conv_loops(x, s["0.weight"], s["0.bias"], 1), 0)
    h = np.maximum(conv_loops(h, s["2.weight"], s["2.bias"], 1), 0)
    want = h.reshape(2, -1) @ s["5.weight"].T + s["5.bias"]
    np.testing.assert_allclose(net.forward(x)[0].data, want, rtol=1e-10, atol=1e-12)


def test_shape_mismatch_names_layer():
    net = TapNet(default_architecture(), seed=0)
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((1, 1, 27, 28), np.float32))
    bad = (LayerSpec("conv", 2), LayerSpec("relu"), LayerSpec("pool", kernel=3), LayerSpec("flatten"),
           LayerSpec("linear", 2))
    with pytest.raises(ShapeError, match="layer 2"):
        TapNet(Architecture((1, 4, 4), 2, bad, (1,)))


@pytest.mark.parametrize("taps", [(), (3, 1), (1, 99)])
def test_invalid_taps_rejected(taps):
    arch = default_architecture()
    with pytest.raises(ValueError):
        TapNet(Architecture(arch.input_shape, arch.num_classes, arch.layers, taps))


def test_cross_entropy_uniform_logits():
    ce = T.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4))
    assert ce.item() == pytest.approx(np.log(10), rel=1e-12)


def test_sgd_examples():
    p = Tensor(np.ones(2), requires_grad=True)
    SGD([p], lr=0.0, momentum=0.9).step([np.full(2, 3.0)])
    np.testing.assert_array_equal(p.data, 1.0)
    SGD([p], lr=0.1, momentum=0.0).step([np.ones(2)])
    np.testing.assert_allclose(p.data, 0.9)
    q = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD([q], lr=0.1, momentum=0.9)
    opt.step([np.ones(1)])
    opt.step([np.ones(1)])
    np.testing.assert_allclose(q.data, [-0.29], rtol=1e-12)
    (p2,), v = sgd_step([np.zeros(1)], [np.ones(1)], 0.1, 0.9)
    (p2,), _ = sgd_step([p2], [np.ones(1)], 0.1, 0.9, v)
    np.testing.assert_allclose(p2, [-0.29], rtol=1e-12)


def test_sgd_refuses_non_finite_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    r = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NonFiniteGradient):
        SGD([p, r], lr=0.1).step([np.ones(2), np.array([1.0, np.nan])])
    np.testing.assert_array_equal(p.data, 1.0)


def test_model_round_trip_bit_exact():
    net = TapNet(small_arch(), seed=4)
    extras = {"gamma_logits": np.array([0.25, -1.5], np.float32)}
    back, ex = load_model(save_model(net, extras), with_extras=True)
    assert back.arch == net.arch
    for k, v in net.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
    np.testing.assert_array_equal(ex["gamma_logits"], extras["gamma_logits"])


def test_model_stream_errors():
    blob = save_model(TapNet(small_arch(), seed=0))
    with pytest.raises(BadMagic):
        load_model(b"XXXX" + blob[4:])
    with pytest.raises(UnsupportedVersion):
        load_model(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    for cut in (5, 20, len(blob) - 1):
        with pytest.raises(TruncatedStream):
            load_model(blob[:cut])
    with pytest.raises(ModelFormatError):
        load_model(blob + b"\0")


def test_model_loads_in_another_process(tmp_path):
    net = TapNet(default_architecture((1, 12, 12), 10, (4, 4, 4, 4)), seed=9)
    path = tmp_path / "m.tpnt"
    path.write_bytes(save_model(net))
    x = np.random.default_rng(0).uniform(0, 1, (5, 1, 12, 12)).astype(np.float32)
    np.save(tmp_path / "x.npy", x)
    code = ("import sys, numpy as np; from pixreg.nn import load_model;"
            "d = sys.argv[1]; n = load_model(open(d + '/m.tpnt', 'rb').read());"
            "np.save(d + '/out.npy', n.logits(np.load(d + '/x.npy')))")
    subprocess.run([sys.executable, "-c", code, str(tmp_path)], check=True, env=dict(os.environ))
    assert np.load(tmp_path / "out.npy").tobytes() == net.logits(x).tobytes()
