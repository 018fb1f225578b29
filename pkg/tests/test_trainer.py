import math

import numpy as np
import pytest

from snnq.data import SyntheticSpec, gen_synthetic, split, to_arrays
from snnq.network import NetworkSpec, build_network, dense, lif, parse_topology, preset, vote
from snnq.neuron import LifParams, SurrogateParams
from snnq.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    cosine_lr,
    evaluate,
    gradcheck,
    network_params,
    train,
)


@pytest.fixture(scope="module")
def tiny_task():
    spec = SyntheticSpec(samples_per_class=12, events_per_sample=600)
    train_s, test_s = split(gen_synthetic(spec, seed=0), 0.25, seed=0)
    return to_arrays(train_s), to_arrays(test_s)


def test_cosine_examples():
    assert cosine_lr(0, 1e-3, 64) == 1e-3
    assert cosine_lr(64, 1e-3, 64) == 0.0
    assert cosine_lr(32, 1e-3, 64) == pytest.approx(5e-4, abs=1e-18)
    assert cosine_lr(200, 1e-3, 64) == 0.0  # held after the cycle


def test_adam_first_step():
    out = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, AdamState(), 1e-3)
    assert out["p"] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_noop():
    p = np.array([1.5, -2.0])
    out = adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), 1e-3)
    np.testing.assert_array_equal(out["p"], p)


def test_adam_parameters_independent():
    a = adam_step({"x": np.array(1.0), "y": np.array(1.0)},
                  {"x": np.array(3.0), "y": np.array(0.0)}, AdamState(), 0.1)
    b = adam_step({"x": np.array(1.0)}, {"x": np.array(3.0)}, AdamState(), 0.1)
    assert a["x"] == b["x"] and a["y"] == 1.0


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="layer0.W"):
        adam_step({"layer0.W": np.zeros(2)}, {"layer0.W": np.array([1.0, np.nan])}, AdamState(), 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=-1.0)


def test_zero_lr_leaves_weights(tiny_task):
    net = build_network(preset("desk-tiny", bits=2), seed=0)
    before = {k: np.copy(v) for k, v in network_params(net).items()}
    hist = train(net, *tiny_task, TrainConfig(epochs=1, lr0=0.0, bits=2))
    assert len(hist) == 1
    for k, v in network_params(net).items():
        np.testing.assert_array_equal(v, before[k])


def test_history_is_seeded_and_consistent(tiny_task):
    cfg = TrainConfig(epochs=3, t_max=4, bits=1, seed=5)
    runs = [train(build_network(preset("desk-tiny", bits=1), seed=5), *tiny_task, cfg) for _ in range(2)]
    assert runs[0].to_csv() == runs[1].to_csv()
    temps = runs[0].column("temperature")
    assert temps == sorted(temps)
    assert runs[0].column("lr") == [cosine_lr(e, cfg.lr0, cfg.t_max) for e in range(3)]
    assert runs[0].to_csv().splitlines()[0] == "epoch,lr,temperature,train_loss,train_acc,test_acc"


def test_evaluate_invariances(tiny_task):
    net = build_network(preset("desk-tiny"), seed=0)
    X, y = tiny_task[1]
    acc = evaluate(net, (X, y))
    assert evaluate(net, (np.concatenate([X, X]), np.concatenate([y, y]))) == acc
    pred = net.predict(X[:1])
    assert evaluate(net, (X[:1], pred)) == 1.0
    with pytest.raises(ValueError):
        evaluate(net, (X[:0], y[:0]))


def test_untrained_net_near_chance():
    spec = parse_topology("8Conv3-MP2-100Dense100-AP10", (2, 8, 8), timesteps=4)
    rng = np.random.default_rng(0)
    X = rng.poisson(3.0, (400, 4, 2, 8, 8)).astype(np.float32)
    y = np.repeat(np.arange(10), 40)
    accs = [evaluate(build_network(spec, seed=s), (X, y)) for s in range(3)]
    # an untrained net picks classes independently of the labels
    assert all(abs(a - 0.1) < 0.1 for a in accs)


def test_gradcheck_rejects_bad_step():
    net = build_network(NetworkSpec((4, 1, 1), (dense(2), lif(), vote(1))))
    with pytest.raises(ValueError, match="invalid step"):
        gradcheck(net, (np.zeros((10, 4, 1, 1)), 0), h=0.0)


def test_gradcheck_linear_toy_is_exact():
    # inputs keep every membrane below the surrogate window, where the
    # relaxed spike is affine; tau=1 removes the reset's h*s product, so the
    # loss is an exact quadratic in every weight
    spec = NetworkSpec((6, 1, 1), (dense(4), lif(), dense(2), lif(), vote(1)), timesteps=3,
                       neuron=LifParams(tau=1.0), surrogate=SurrogateParams(leak=0.2))
    net = build_network(spec, seed=0, dtype=np.float64)
    for syn in net.synaptic_layers:
        syn.weight = np.abs(syn.weight) + 0.1  # positive weights on negative input stay sub-window
    frames = -1 - np.random.default_rng(0).random((3, 6, 1, 1))
    report = gradcheck(net, (frames, 1), h=1e-2)  # exact quadratic: large h only cuts roundoff
    assert report.n_flipped == 0
    assert report.max_rel_err < 1e-8


@pytest.mark.parametrize("bits", [32, 2])
def test_gradcheck_small_conv_net(bits):
    spec = parse_topology("2Conv3-MP2-Dense10-AP5", (2, 6, 6), timesteps=3, bits=bits)
    net = build_network(spec, seed=1, dtype=np.float64)
    frames = np.random.default_rng(1).poisson(3.0, (3, 2, 6, 6)).astype(float)
    report = gradcheck(net, (frames, 1))
    assert report.passed, report.summary()
    assert report.flip_fraction < 0.02
    assert not math.isnan(report.max_rel_err)
