import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relnov import numerics as nx
from relnov.data import LabeledDataset, generate_synthetic, benchmark_spec
from relnov.model import ModelConfig, RelationalModel
from relnov.training import (OptimizerState, TrainConfig, binary_ce_from_logits,
                             binary_ce_pair_loss, lars_step, lr_at, mse_pair_loss, pair_loss,
                             sgd_step, train, windowed_means, write_trace)

TINY = dict(input_dim=6, feature_dim=8, model_dim=8, num_blocks=1, num_heads=2)


def tiny_support(n_per=6, seed=0):
    rng = np.random.default_rng(seed)
    means = np.eye(3, 6) * 6
    x = np.concatenate([m + rng.normal(size=(n_per, 6)) for m in means])
    return LabeledDataset(x, np.repeat(np.arange(3), n_per))


def test_mse_examples():
    assert mse_pair_loss([1.0], [1]).item() == 0.0
    assert mse_pair_loss([0.5, 0.5], [1, 0]).item() == 0.25
    assert mse_pair_loss([0.0], [1]).item() == 1.0


def test_binary_ce_examples():
    assert binary_ce_pair_loss([0.5], [1]).item() == pytest.approx(math.log(2), rel=1e-15)
    assert binary_ce_pair_loss([1.0], [0]).item() == pytest.approx(-math.log(1 - (1 - 1e-12)), rel=1e-12)


def test_loss_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        mse_pair_loss([0.5, 0.5], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20), st.integers(0, 2 ** 20))
def test_logit_ce_matches_probability_ce(logits, bits):
    x = np.array(logits)
    y = np.array([(bits >> i) & 1 for i in range(len(x))], dtype=float)
    direct = binary_ce_from_logits(nx.Tensor(x), y).item()
    # high-precision probability-space oracle
    with mpmath.workdps(60):
        terms = []
        for xi, yi in zip(x, y):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(xi)))
            terms.append(-(yi * mpmath.log(p) + (1 - yi) * mpmath.log(1 - p)))
        ref = float(mpmath.fsum(terms) / len(terms))
    assert direct == pytest.approx(ref, rel=1e-9, abs=1e-15)


def test_loss_trend_facts():
    # cross-entropy punishes a confident miss harder than the scaled squared error
    ce = lambda p: -math.log(p)
    sq = lambda p: ((p - 1) / 0.5) ** 2
    assert ce(0.01) > sq(0.01)
    assert ce(0.5) < sq(0.5)


def test_mse_gradient_fd():
    rng = np.random.default_rng(0)
    logits = nx.Tensor(rng.normal(size=5), requires_grad=True)
    labels = np.array([1, 0, 1, 1, 0.0])
    for kind in ("mse", "binary_ce"):
        rep = nx.finite_diff_check(lambda: pair_loss(logits, labels, kind), {"l": logits})
        assert rep.passed


def test_lr_schedule():
    cfg = TrainConfig(base_lr=0.008, warmup_iters=500)
    assert lr_at(0, cfg) == pytest.approx(0.008 / 500)
    assert lr_at(499, cfg) == pytest.approx(0.008)
    assert lr_at(5000, cfg) == 0.008
    lrs = [lr_at(i, cfg) for i in range(600)]
    assert all(b >= a for a, b in zip(lrs, lrs[1:]))


def _one(w, g):
    p = nx.Tensor(np.array(w, dtype=np.float64), requires_grad=True)
    p.grad = np.array(g, dtype=np.float64)
    return {"w": p}


def test_lars_step_hand_computed():
    cfg = TrainConfig(optimizer="lars", momentum=0.9, weight_decay=0.0, trust_coefficient=0.001)
    params = _one([3.0, 4.0], [0.0, 2.0])
    state = OptimizerState.for_params(params)
    lars_step(params, state, cfg, lr=1.0)
    # local lr = 0.001 * 5 / 2
    np.testing.assert_allclose(params["w"].data, [3.0, 4.0 - 0.0025 * 2], rtol=1e-12)
    np.testing.assert_allclose(state.momentum["w"], [0, 0.005])


def test_lars_zero_weight_uses_unit_ratio():
    cfg = TrainConfig(optimizer="lars", momentum=0.0, weight_decay=0.0)
    params = _one([0.0, 0.0], [1.0, -1.0])
    lars_step(params, OptimizerState.for_params(params), cfg, lr=0.1)
    np.testing.assert_allclose(params["w"].data, [-0.1, 0.1])


def test_sgd_momentum_accumulates():
    cfg = TrainConfig(momentum=0.5, weight_decay=0.0)
    params = _one([0.0], [1.0])
    state = OptimizerState.for_params(params)
    sgd_step(params, state, cfg, lr=1.0)
    params["w"].grad = np.array([1.0])
    sgd_step(params, state, cfg, lr=1.0)
    np.testing.assert_allclose(params["w"].data, [-(1 + 1.5)])


def test_zero_lr_leaves_weights():
    m = RelationalModel(ModelConfig(**TINY))
    before = {n: p.data.copy() for n, p in m.params.items()}
    train(m, tiny_support(), TrainConfig(iterations=3, batch_size=8, base_lr=0.0, warmup_iters=1))
    for n, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_head_loss_mismatch():
    m = RelationalModel(ModelConfig(**TINY))
    with pytest.raises(ValueError, match="head_mode"):
        train(m, tiny_support(), TrainConfig(iterations=1, loss="binary_ce"))


def test_single_class_support_rejected():
    sup = LabeledDataset(np.zeros((4, 6)), np.zeros(4, dtype=int))
    with pytest.raises(ValueError):
        train(RelationalModel(ModelConfig(**TINY)), sup, TrainConfig(iterations=1))


def test_nan_loss_aborts():
    m = RelationalModel(ModelConfig(**TINY))
    m["head.bias"].data[...] = np.nan
    with pytest.raises(nx.NumericError, match="iteration 0"):
        train(m, tiny_support(), TrainConfig(iterations=2, batch_size=8))


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    sup = tiny_support(n_per=10)
    cfg = TrainConfig(iterations=150, batch_size=32, base_lr=0.05, warmup_iters=10, log_every=50)
    seen = []
    m1, t1 = train(RelationalModel(ModelConfig(**TINY)), sup, cfg,
                   callback=lambda *a: seen.append(a[0]))
    m2, t2 = train(RelationalModel(ModelConfig(**TINY)), sup, cfg)
    assert seen == [49, 99, 149]
    w = windowed_means(t1, 50)
    assert w[-1] < 0.5 * w[0]
    for n in m1.params:
        assert m1[n].data.tobytes() == m2[n].data.tobytes()
    write_trace(t1, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,lr" and len(lines) == 151


def test_lars_training_moves_weights():
    sup = tiny_support()
    m = RelationalModel(ModelConfig(**TINY))
    before = m["proj.weight"].data.copy()
    train(m, sup, TrainConfig(iterations=5, batch_size=8, optimizer="lars", base_lr=1.0,
                             warmup_iters=1))
    assert not np.array_equal(before, m["proj.weight"].data)


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(momentum=1.0), dict(optimizer="adam"),
                                 dict(loss="hinge"), dict(base_lr=float("nan"))])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_desk_config_converges_on_separable_data():
    from pathlib import Path
    from relnov import config as cf
    raw = cf.read_config_file(Path(__file__).resolve().parents[1] / "configs" / "desk.cfg")
    tcfg = cf.build_section("train", raw["train"])
    mcfg = cf.build_section("model", raw["model"])
    assert tcfg.iterations <= 2000
    sup, _ = generate_synthetic(benchmark_spec("intra", seed=0))
    _, trace = train(RelationalModel(mcfg), sup, tcfg)
    assert windowed_means(trace, 100)[-1] < 0.05
