"""
逐层生长测试: 停止准则, 第一阶段, 加层, 可训练性, 逐层损失单调, 记录读写
"""

import numpy as np
import pytest

from errors import ConfigError
from grower import (CONTINUE, STOP, GrowthConfig, GrowthData, GrowthTrace, StageRecord,
                    active_table, grow, grow_step, initial_gradient_norm, stopping_check,
                    train_stage_one)
from numeric_core import make_rng
from physics_tasks import piann_data, piann_problem
from regularizers import build_similarity_kmeans, manifold_loss
from resnet import GrowableResNet, forward, grow_layer
from stage_trainer import objective_and_gradients


def record(L, eta):
    return StageRecord(stage=L - 1, L=L, eta=eta, val_loss=float("nan"), active_frac=1.0,
                       alpha=0.0, gamma=0.0, delta=0.0, seconds=0.0)


def trace_of(*etas):
    return GrowthTrace([record(k + 2, eta) for k, eta in enumerate(etas)])


def test_relative_improvement_stopping():
    config = GrowthConfig(eps_eta=0.035)
    assert stopping_check(trace_of(1.0), config) == CONTINUE
    assert stopping_check(trace_of(1.0, 0.9), config) == CONTINUE
    assert stopping_check(trace_of(1.0, 0.97), config) == STOP
    assert stopping_check(trace_of(1.0, 1.1), config) == STOP
    assert stopping_check(trace_of(0.0, 0.0), config) == STOP


def test_max_data_loss_increase_stopping():
    config = GrowthConfig(eps_eta=0.035, stopping="max-data-loss-increase")
    assert stopping_check(trace_of(0.5, 0.52), config) == CONTINUE
    assert stopping_check(trace_of(0.5, 0.6), config) == STOP


def test_l2_error_stopping():
    config = GrowthConfig(eps_eta=1e-4, stopping="l2-error")
    assert stopping_check(trace_of(1.0), config, reference_error=5e-4) == CONTINUE
    assert stopping_check(trace_of(1.0), config, reference_error=5e-5) == STOP
    with pytest.raises(ConfigError):
        stopping_check(trace_of(1.0), config)


def test_fixed_depth_never_stops_early():
    config = GrowthConfig(stopping="fixed-depth", max_layers=5)
    assert stopping_check(trace_of(1.0, 1.0, 1.0), config) == CONTINUE
    assert config.layer_cap() == 5


def test_config_validation():
    with pytest.raises(ConfigError):
        GrowthConfig(stopping="never")
    with pytest.raises(ConfigError):
        GrowthConfig(eps_eta=0.0)
    with pytest.raises(ConfigError):
        GrowthConfig(max_layers=2)
    with pytest.raises(ConfigError):
        GrowthConfig(head_phase="sometimes")


def test_layer_cap_and_learning_rate_schedule():
    config = GrowthConfig(delta_schedule=(10.0, 15.0, 20.0), lr_schedule=(0.001, 0.0005))
    assert config.layer_cap() == 4
    assert config.learning_rate_for(2) == 0.001
    assert config.learning_rate_for(3) == 0.0005
    assert config.learning_rate_for(7) == 0.0005
    assert GrowthConfig().layer_cap() == 16


def test_head_phase():
    even = GrowthConfig()
    assert even.head_trainable(4) and not even.head_trainable(3)
    assert GrowthConfig(head_phase="odd").head_trainable(3)
    assert GrowthConfig(head_phase="always").head_trainable(3)


def toy_data(rng, n=80):
    X = rng.uniform(-1.0, 1.0, size=(n, 3))
    C = (np.sin(2 * X[:, 0]) + X[:, 1] * X[:, 2]).reshape(-1, 1)
    return X, C


def test_stage_one_and_grow_step(rng):
    X, C = toy_data(rng)
    config = GrowthConfig(width=8, epochs=20, batch_size=16, learning_rate=0.01, alpha=1e-4,
                          rho=1e-6)
    data = GrowthData(X, C)
    net, trace = train_stage_one(config, data, rng)
    assert net.depth == 2 and len(trace) == 1
    assert trace.last.trainable == net.param_count()
    frozen = {name: value.copy() for name, value in net.parameters().items()
              if name not in ("W_pred", "b_pred")}
    rec = grow_step(net, config, data, rng)
    assert net.depth == 3 and rec.L == 3
    for name, value in frozen.items():
        np.testing.assert_array_equal(net.parameters()[name], value)
    # 数据模式下阶段不会让数据损失上升
    assert rec.eta <= trace.last.eta + 1e-12
    table = active_table(net)
    assert list(table["layer"]) == [1, 2, 3]


def test_monotone_data_loss_across_stages(rng):
    X, C = toy_data(rng)
    similarity = build_similarity_kmeans(X, 3, rng)
    config = GrowthConfig(width=8, epochs=15, batch_size=16, learning_rate=0.01, alpha=1e-4,
                          gamma=0.01, stopping="fixed-depth", max_layers=5)
    net, trace = grow(config, GrowthData(X, C, similarity=similarity), rng)
    assert net.depth == 5
    etas = trace.etas()
    assert all(b <= a + 1e-12 for a, b in zip(etas, etas[1:]))
    gammas = [r.gamma for r in trace.records]
    np.testing.assert_allclose(gammas, [0.01, 0.005, 0.0025, 0.00125])


def test_rejected_stage_is_removed(rng):
    X, C = toy_data(rng)
    config = GrowthConfig(width=6, epochs=5, batch_size=16, stopping="max-data-loss-increase",
                          eps_eta=1e-12, best="final", learning_rate=0.5, max_layers=4)
    net, trace = grow(config, GrowthData(X, C), rng)
    assert net.depth == len(trace) + 1
    assert trace.records[-1].L == net.depth


def test_new_layer_gradient_follows_head_gradient(rng):
    X, C = toy_data(rng, n=60)
    similarity = build_similarity_kmeans(X, 3, rng)
    config = GrowthConfig(width=8, epochs=30, batch_size=60, learning_rate=0.01, gamma=0.05,
                          rho=0.0)
    data = GrowthData(X, C, similarity=similarity)
    net, _ = train_stage_one(config, data, rng)
    grow_layer(net)
    W_pred = net.parameters()["W_pred"]

    # 零初始化的新层: 数据项梯度等于输出层梯度乘以 W_pred^T, 输出层收敛时随之消失
    _, grads = objective_and_gradients(net, X, C, data.objective("mse", 0.0, 0.0, 0.0))
    np.testing.assert_allclose(grads["W3"], grads["W_pred"] @ W_pred.T, atol=1e-12)
    np.testing.assert_allclose(grads["b3"], grads["b_pred"] @ W_pred.T, atol=1e-12)

    # 流形项对新层梯度的贡献与新阶段的 gamma 成正比
    base = grads["W3"]
    _, g1 = objective_and_gradients(net, X, C, data.objective("mse", 0.0, 0.05, 0.0))
    _, g2 = objective_and_gradients(net, X, C, data.objective("mse", 0.0, 0.1, 0.0))
    np.testing.assert_allclose(g2["W3"] - base, 2.0 * (g1["W3"] - base), atol=1e-10)
    assert np.linalg.norm(g1["W3"] - base) > 0

    halved = GrowthConfig(width=8, gamma=0.05, gamma_factor=0.5)
    expected = np.sqrt(np.sum(g1["W3"] ** 2) + np.sum(g1["b3"] ** 2))
    same = GrowthConfig(width=8, gamma=0.05, gamma_factor=1.0)
    assert initial_gradient_norm(net, data, same) == pytest.approx(expected, rel=1e-10)
    assert initial_gradient_norm(net, data, halved) != pytest.approx(expected, rel=1e-6)


def test_trace_csv_round_trip(tmp_path):
    trace = trace_of(1.0, 0.5)
    trace.records[1].l2_error = 1e-3
    path = trace.to_csv(str(tmp_path / "trace.csv"), extended=True)
    loaded = GrowthTrace.from_csv(path)
    assert loaded.etas() == [1.0, 0.5]
    assert loaded.records[1].l2_error == 1e-3
    empty = GrowthTrace().to_csv(str(tmp_path / "empty.csv"))
    with open(empty, encoding="utf-8") as f:
        assert f.read().strip() == ",".join(
            ["stage", "L", "eta", "val_loss", "active_frac", "alpha", "gamma", "delta", "seconds"])


def test_forward_thinking_mode(rng):
    X, C = toy_data(rng)
    config = GrowthConfig(width=6, epochs=5, batch_size=16, forward_thinking=True,
                          alpha=0.1, gamma=0.1, stopping="fixed-depth", max_layers=4)
    net, trace = grow(config, GrowthData(X, C), make_rng(3))
    assert not any(layer.skip for layer in net.hidden)
    assert all(r.alpha == 0.0 and r.gamma == 0.0 for r in trace.records)


def stationary_targets(net, X, similarity, gamma):
    """使 d J / d Y^(L) 在每个样本上都为零的标签, J = MSE + gamma * 流形项"""
    tape = forward(net, X)
    _, m_grad = manifold_loss(tape.Y[-1], similarity)
    shift = np.linalg.solve(net.W_pred, m_grad.T).T
    return tape.output + 0.5 * tape.output.size * gamma * shift


def test_same_gamma_leaves_new_layer_untrainable():
    rng = make_rng(11)
    X, _ = toy_data(rng, n=60)
    similarity = build_similarity_kmeans(X, 3, rng)
    net = GrowableResNet.initialize(rng, 3, 2, 2)
    net.W_pred[...] = [[1.0, 0.5], [-0.5, 1.0]]
    net.mark_modified()
    data = GrowthData(X, stationary_targets(net, X, similarity, 0.1), similarity=similarity)

    # 第一阶段已经收敛: 输出层以下的参数梯度为零
    _, grads = objective_and_gradients(net, data.X, data.C, data.objective("mse", 0.0, 0.1, 0.0))
    for name in ("U", "u", "W2", "b2"):
        assert np.linalg.norm(grads[name]) < 1e-8

    grow_layer(net)
    same = GrowthConfig(width=2, gamma=0.1, gamma_factor=1.0)
    halved = GrowthConfig(width=2, gamma=0.1, gamma_factor=0.5)
    assert initial_gradient_norm(net, data, same) < 1e-5
    assert initial_gradient_norm(net, data, halved) > 1e-3


def solve_head(net, data, objective):
    """目标函数对输出层参数是二次的, 用两步牛顿迭代求出输出层的驻点"""
    names = ("W_pred", "b_pred")
    params = net.parameters()
    sizes = [params[n].size for n in names]

    def head_vector():
        return np.concatenate([params[n].ravel() for n in names])

    def set_head(vector):
        for n, part in zip(names, np.split(vector, np.cumsum(sizes)[:-1])):
            params[n][...] = part.reshape(params[n].shape)
        net.mark_modified()

    def head_grad():
        _, grads = objective_and_gradients(net, data.X, data.C, objective)
        return np.concatenate([grads[n].ravel() for n in names])

    for _ in range(2):
        theta, g0 = head_vector(), head_grad()
        hessian = np.empty((g0.size, g0.size))
        for k in range(g0.size):
            set_head(theta + np.eye(g0.size)[k])
            hessian[:, k] = head_grad() - g0
        set_head(theta - np.linalg.solve(hessian, g0))


@pytest.mark.parametrize("delta", [1e-2, 1.0])
def test_constant_delta_leaves_new_layer_untrainable(delta):
    problem = piann_problem("a", n=7)
    data = piann_data(problem, make_rng(0), 40)
    net = GrowableResNet.initialize(make_rng(1), 2, 4, 1)
    solve_head(net, data, data.objective("mse", 0.0, 0.0, delta))
    grow_layer(net)
    same = initial_gradient_norm(net, data, GrowthConfig(width=4, delta=delta))
    changed = initial_gradient_norm(net, data,
                                    GrowthConfig(width=4, delta_schedule=(delta, 2 * delta)))
    assert same < 1e-6
    assert changed > 100 * same
    assert changed > 1e-6


def test_large_alpha_sparsifies_first_stage(rng):
    X, C = toy_data(rng)
    config = GrowthConfig(width=8, epochs=300, batch_size=80, learning_rate=0.02, decay=0.97,
                          alpha=1e3, rho=1e-3, best="final")
    net, _ = train_stage_one(config, GrowthData(X, C), rng)
    params = net.parameters()
    values = np.concatenate([params[n].ravel() for n in ("U", "u", "W2", "b2")])
    assert np.mean(values == 0.0) > 0.5


def test_first_stage_fits_linear_data(rng):
    X = rng.uniform(-1.0, 1.0, size=(80, 3))
    C = (X @ np.array([1.0, -2.0, 0.5]) + 0.3).reshape(-1, 1)
    config = GrowthConfig(width=8, epochs=500, batch_size=16, learning_rate=0.01, decay=0.995)
    _, trace = train_stage_one(config, GrowthData(X, C), rng)
    assert trace.last.eta < 1e-3
