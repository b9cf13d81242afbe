"""
物理约束任务测试: 电荷分布, 边界采样, delta 控制器, 测量数据, 迁移学习
"""

import numpy as np
import pytest

from grower import GrowthConfig, GrowthTrace, StageRecord
from numeric_core import make_rng
from physics_tasks import (PrannController, assumed_charge, boundary_samples, darcy_problem,
                           fem_reference, measurement_data, piann_data, piann_problem, piann_run,
                           prann_data, prann_delta_fn, prann_delta_update, prann_run,
                           transfer_retrain, true_charge)
from resnet import GrowableResNet


def test_charge_distributions():
    centre = np.array([[0.5, 0.5]])
    assert assumed_charge(centre)[0] == pytest.approx(400.0)
    assert true_charge(centre)[0] == pytest.approx(425.0)
    corner = np.array([[0.0, 0.0]])
    assert assumed_charge(corner)[0] == pytest.approx(0.0, abs=1e-12)
    assert true_charge(corner)[0] == pytest.approx(25.0)


def test_boundary_samples_lie_on_boundary(rng):
    points = boundary_samples(rng, 500)
    assert points.shape == (500, 2)
    assert np.all((points >= 0.0) & (points <= 1.0))
    on_edge = np.isclose(points, 0.0) | np.isclose(points, 1.0)
    assert np.all(on_edge.any(axis=1))


def test_controller_moves_towards_target():
    ctrl = PrannController(100.0, target=1.0, step=10.0, rng=make_rng(0))
    assert prann_delta_update(ctrl, 0.5) > 100.0
    before = ctrl.delta
    after = prann_delta_update(ctrl, 2.0)
    assert 0.5 * before <= after < before
    assert prann_delta_update(ctrl, 1.0) == after


def test_controller_floor_and_errors():
    ctrl = PrannController(1.0, target=0.0, step=1e6, rng=make_rng(0))
    assert prann_delta_update(ctrl, 5.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        prann_delta_update(ctrl, -1.0)
    with pytest.raises(ValueError):
        PrannController(0.0)


def test_prann_delta_fn_reads_last_stage():
    trace = GrowthTrace([StageRecord(stage=1, L=2, eta=5.0, val_loss=float("nan"),
                                     active_frac=1.0, alpha=0.0, gamma=0.0, delta=10.0,
                                     seconds=0.0)])
    next_delta = prann_delta_fn(10.0, make_rng(0), target=1.0, step=0.1)
    first = next_delta(trace)
    assert first < 10.0
    assert next_delta(trace) < first


def test_measurement_data():
    problem = fem_reference("prann-true", n=11)
    points, values = measurement_data(problem, make_rng(0), count=40, noise=0.0)
    assert points.shape == (40, 2)
    assert np.all((points >= 0.4) & (points <= 0.6))
    noisy = measurement_data(problem, make_rng(0), count=40)[1]
    assert not np.allclose(noisy, values)
    np.testing.assert_allclose(noisy, values, atol=0.1 * np.max(np.abs(values)))


def test_piann_and_prann_data():
    problem = piann_problem("b", n=7)
    data = piann_data(problem, make_rng(0), boundary_count=30)
    assert data.X.shape == (30, 2) and np.all(data.C == 0)
    assert data.physics.points.shape == (49, 2)

    data, truth = prann_data(make_rng(0), boundary_count=20, measurements=10, radius=0.05)
    assert data.X.shape == (30, 2) and data.C.shape == (30, 1)
    assert np.all(data.C[10:] == 0)
    assert data.similarity is not None
    assert truth.name == "prann-true"
    assert prann_data(make_rng(0), 20, 10, radius=0.0)[0].similarity is None


def test_fem_reference_cases():
    for case in ("a", "b", "darcy", "prann-true", "prann-assumed"):
        problem = fem_reference(case, n=7)
        assert problem.reference_frame().shape == (49, 3)
        assert np.all(np.isfinite(problem.reference))
    assert fem_reference("b", n=7).mesh.slit
    with pytest.raises(ValueError):
        fem_reference("c")
    with pytest.raises(ValueError):
        piann_problem("c")


def test_problem_error_of_zero_network():
    problem = piann_problem("a", n=7)
    net = GrowableResNet.initialize(make_rng(0), 2, 4, 1)
    net.W_pred[:] = 0.0
    net.b_pred[:] = 0.0
    assert problem.error(net) == pytest.approx(1.0)


def test_transfer_retrain_structure():
    net = GrowableResNet.initialize(make_rng(0), 2, 5, 1, hidden_layers=3)
    config = GrowthConfig(width=5, epochs=2, batch_size=10)
    problem = piann_problem("b", n=7)
    with pytest.raises(ValueError):
        transfer_retrain(net.copy(), problem, 4, config, make_rng(1))

    pruned = net.copy()
    transfer_retrain(pruned, problem, 2, config, make_rng(1), epochs=0)
    assert pruned.depth == 4
    assert pruned.hidden[-1].frozen is False
    assert all(layer.frozen for layer in pruned.hidden[:-1])
    np.testing.assert_array_equal(pruned.hidden[-1].W, 0.0)

    trained = net.copy()
    transfer_retrain(trained, problem, 2, config, make_rng(1), boundary_count=20)
    np.testing.assert_array_equal(trained.hidden[0].W, net.hidden[0].W)
    np.testing.assert_array_equal(trained.U, net.U)


@pytest.mark.slow
def test_piann_run_small():
    problem = piann_problem("a", n=11)
    config = GrowthConfig(width=10, epochs=30, batch_size=32, learning_rate=0.005, delta=1e-4,
                          delta_schedule=(1e-4, 1e-3, 1e-2), stopping="fixed-depth",
                          max_layers=4)
    net, trace, field, problem = piann_run("a", config, make_rng(0), boundary_count=200,
                                           problem=problem)
    assert net.depth == 4 and len(trace) == 3
    assert len(field) == 121
    assert np.all(np.isfinite(trace.etas()))
    assert all(np.isfinite(r.l2_error) for r in trace.records)


@pytest.mark.slow
def test_prann_run_small():
    config = GrowthConfig(width=10, epochs=10, batch_size=64, learning_rate=0.005, delta=1e-4,
                          stopping="fixed-depth", max_layers=3)
    net, trace, truth = prann_run(config, make_rng(0), boundary_count=100, measurements=100)
    assert net.depth == 3 and len(trace) == 2
    assert all(r.delta > 0 for r in trace.records)
    assert np.isfinite(truth.error(net))


def reduced_piann_config(max_layers=5):
    return GrowthConfig(width=10, epochs=200, batch_size=128, learning_rate=0.01,
                        delta=1.0, delta_schedule=(1.0, 2.0, 4.0, 8.0), stopping="fixed-depth",
                        max_layers=max_layers, best="objective")


def test_piann_error_decreases_layer_by_layer():
    problem = piann_problem("a", n=9)
    _, trace, _, _ = piann_run("a", reduced_piann_config(), make_rng(0), boundary_count=80,
                               problem=problem)
    errors = [r.l2_error for r in trace.records]
    assert len(errors) == 4
    assert all(b <= a for a, b in zip(errors, errors[1:]))


@pytest.mark.slow
def test_transfer_beats_random_features():
    config = reduced_piann_config(max_layers=4)
    pretrained, _, _, _ = piann_run("a", config, make_rng(0), boundary_count=80,
                                    problem=piann_problem("a", n=9))
    target = darcy_problem(n=9)
    random_base = GrowableResNet.initialize(make_rng(5), 2, 10, 1, hidden_layers=3)
    # 两边用同样的截断, 同样的新层训练, 区别只在冻结的前两层是否来自已训练的网络
    transfer_retrain(pretrained, target, 2, config, make_rng(1), epochs=300, boundary_count=80)
    transfer_retrain(random_base, target, 2, config, make_rng(1), epochs=300, boundary_count=80)
    assert target.error(pretrained) < target.error(random_base)
