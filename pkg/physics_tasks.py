#!/usr/bin/env python
"""
物理约束任务
PIANN (泊松方程, 情形 a 无裂缝 / 情形 b 带裂缝), PRANN (带噪声测量 + 近似电荷分布,
delta 随机游走控制) 以及迁移学习重训练
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np

from fem import (StructuredMesh, assemble, interpolate, physics_loss, relative_l2,
                 solution_frame)
from grower import GrowthData, grow
from numeric_core import make_rng
from regularizers import build_similarity_eps
from resnet import active_fraction, grow_layer, prune_tail, threshold
from stage_trainer import PhysicsTerm, StageObjective, StageSettings, train_stage

logger = logging.getLogger(__name__)

GRID_NODES = 31
BOUNDARY_POINTS = 4000
PIANN_SOURCE = 200.0

PRANN_REGION = (0.4, 0.6)
PRANN_MEASUREMENTS = 1000
PRANN_NOISE = 0.01
PRANN_TARGET = 1.0
PRANN_STEP = 1000.0
PRANN_RADIUS = 0.05


@dataclass
class PdeProblem:
    """一个泊松型问题: 网格, 残差算子和参考解 (全部节点上)"""

    name: str
    mesh: StructuredMesh
    operator: object
    reference: np.ndarray

    def physics_term(self):
        return PhysicsTerm(self.mesh.points, partial(physics_loss, self.operator))

    def reference_grid(self):
        return self.mesh.grid_values(self.reference)

    def error(self, net):
        """网络在配点上的输出相对参考解的 L2 误差"""
        return relative_l2(net.predict(self.mesh.points)[:, 0], self.reference_grid())

    def reference_frame(self):
        return solution_frame(self.mesh.points, self.reference_grid())


def make_problem(name, coefficient=1.0, source=0.0, slit=False, n=GRID_NODES):
    mesh = StructuredMesh(n, n, slit=slit)
    operator = assemble(mesh, coefficient, source)
    return PdeProblem(name, mesh, operator, operator.solve())


def piann_problem(case, n=GRID_NODES, source=PIANN_SOURCE):
    """情形 a: 单位正方形; 情形 b: 去掉 (0.5,1)x{0.5} 的裂缝区域. a=1, f=200"""
    if case not in ("a", "b"):
        raise ValueError(f"未知 PIANN 情形: {case}")
    return make_problem(f"piann-{case}", 1.0, source, slit=(case == "b"), n=n)


def darcy_problem(n=GRID_NODES, source=PIANN_SOURCE):
    """迁移学习使用的新问题: 带裂缝区域, a = exp(x1 + x2), f = 200"""
    return make_problem("darcy", lambda p: np.exp(p[:, 0] + p[:, 1]), source, slit=True, n=n)


def boundary_samples(rng, count=BOUNDARY_POINTS):
    """在单位正方形边界上按弧长均匀采样"""
    s = rng.uniform(0.0, 4.0, size=count)
    side = np.minimum(np.floor(s).astype(int), 3)
    t = s - side
    points = np.empty((count, 2))
    points[side == 0] = np.column_stack([t[side == 0], np.zeros(np.sum(side == 0))])
    points[side == 1] = np.column_stack([np.ones(np.sum(side == 1)), t[side == 1]])
    points[side == 2] = np.column_stack([1.0 - t[side == 2], np.ones(np.sum(side == 2))])
    points[side == 3] = np.column_stack([np.zeros(np.sum(side == 3)), 1.0 - t[side == 3]])
    return points


def piann_data(problem, rng, boundary_count=BOUNDARY_POINTS):
    """PIANN 训练数据: 边界点 (值为 0) 加上问题的物理项"""
    X = boundary_samples(rng, boundary_count)
    return GrowthData(X, np.zeros((boundary_count, 1)), physics=problem.physics_term())


def piann_run(case, config, rng, boundary_count=BOUNDARY_POINTS, problem=None):
    """
    PIANN: 训练数据只有边界点 (值为 0), 内部由物理损失约束, delta 逐层增加

    返回:
        (net, GrowthTrace, 解场 DataFrame), 另附 problem 以便计算误差
    """
    problem = problem or piann_problem(case)
    data = piann_data(problem, rng, boundary_count)
    net, trace = grow(config, data, rng, error_fn=problem.error)
    field = solution_frame(problem.mesh.points, net.predict(problem.mesh.points)[:, 0])
    logger.info("PIANN(%s) 完成: L=%d, 相对 L2 误差 %.3e", case, net.depth, trace.last.l2_error)
    return net, trace, field, problem


# ---------------------------------------------------------------------------
# PRANN
# ---------------------------------------------------------------------------

def assumed_charge(points):
    """近似电荷分布: 50 * sum_{k=1..4} (-1)^(k+1) 2k sin(k pi x1) sin(k pi x2)"""
    x1, x2 = points[:, 0], points[:, 1]
    total = np.zeros(len(points))
    for k in range(1, 5):
        total += (-1) ** (k + 1) * 2 * k * np.sin(k * math.pi * x1) * np.sin(k * math.pi * x2)
    return 50.0 * total


def true_charge(points):
    """真实电荷分布: 近似分布再加 25 cos(2 pi x1) cos(2 pi x2)"""
    x1, x2 = points[:, 0], points[:, 1]
    return assumed_charge(points) + 25.0 * np.cos(2 * math.pi * x1) * np.cos(2 * math.pi * x2)


@dataclass
class PrannController:
    """delta 的随机游走控制器"""

    delta: float
    target: float = PRANN_TARGET
    step: float = PRANN_STEP
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta 必须为正")
        if self.rng is None:
            self.rng = make_rng(0, 2)


def prann_delta_update(ctrl, x):
    """
    delta <- delta + h * sgn(delta_c - x) * |N(0, |x - delta_c|)|

    更新结果不低于原值的一半, 保证 delta 始终为正
    """
    if x < 0:
        raise ValueError("数据损失必须非负")
    spread = abs(x - ctrl.target)
    if spread == 0:
        return ctrl.delta
    draw = abs(float(ctrl.rng.normal(0.0, spread)))
    proposed = ctrl.delta + ctrl.step * math.copysign(1.0, ctrl.target - x) * draw
    if proposed < 0.5 * ctrl.delta:
        logger.warning("delta 更新值 %.4g 过小, 截断为 %.4g", proposed, 0.5 * ctrl.delta)
        proposed = 0.5 * ctrl.delta
    ctrl.delta = proposed
    return proposed


def measurement_data(problem, rng, count=PRANN_MEASUREMENTS, noise=PRANN_NOISE, region=PRANN_REGION):
    """在测量区域内均匀取点, 用真实解插值并加高斯噪声 (sigma = noise * max|y|)"""
    lo, hi = region
    points = rng.uniform(lo, hi, size=(count, 2))
    values = interpolate(problem.mesh, problem.reference, points)
    sigma = noise * float(np.max(np.abs(values))) if count else 0.0
    return points, values + rng.normal(0.0, sigma, size=count)


def prann_data(rng, boundary_count=BOUNDARY_POINTS, measurements=PRANN_MEASUREMENTS,
               radius=PRANN_RADIUS):
    """
    PRANN 训练数据: 测量数据来自真实电荷分布, 物理损失使用近似电荷分布;
    radius > 0 时流形项使用该半径的空间近邻相似

    返回:
        (GrowthData, 真实电荷对应的参考问题)
    """
    truth = make_problem("prann-true", 1.0, true_charge)
    mesh = truth.mesh
    assumed = assemble(mesh, 1.0, assumed_charge)
    physics = PhysicsTerm(mesh.points, partial(physics_loss, assumed))
    m_points, m_values = measurement_data(truth, rng, measurements)
    X = np.vstack([m_points, boundary_samples(rng, boundary_count)])
    C = np.concatenate([m_values, np.zeros(boundary_count)]).reshape(-1, 1)
    similarity = build_similarity_eps(X, radius) if radius > 0 else None
    return GrowthData(X, C, similarity=similarity, physics=physics), truth


def prann_delta_fn(delta, rng, target=PRANN_TARGET, step=PRANN_STEP):
    """grow_loop 使用的 delta_fn: 按上一阶段的数据损失更新 delta"""
    ctrl = PrannController(delta, target, step, rng)

    def next_delta(trace):
        return prann_delta_update(ctrl, trace.last.eta)

    return next_delta


def prann_run(config, rng, boundary_count=BOUNDARY_POINTS, measurements=PRANN_MEASUREMENTS,
              target=PRANN_TARGET, step=PRANN_STEP, radius=PRANN_RADIUS):
    """
    PRANN: 每加一层按上一阶段的数据损失更新 delta

    返回:
        (net, GrowthTrace, 参考问题)
    """
    data, truth = prann_data(rng, boundary_count, measurements, radius)
    net, trace = grow(config, data, rng, error_fn=truth.error,
                      delta_fn=prann_delta_fn(config.delta, rng, target, step))
    logger.info("PRANN 完成: L=%d, 数据损失 %.4g, delta %.4g", net.depth, trace.last.eta,
                trace.last.delta)
    return net, trace, truth


# ---------------------------------------------------------------------------
# 迁移学习
# ---------------------------------------------------------------------------

def transfer_retrain(net, problem, keep, config, rng, epochs=None, delta=None,
                     boundary_count=BOUNDARY_POINTS):
    """
    截断到 keep 个隐藏层, 再加一个零初始化的新层, 只在新问题上训练新层和输出层

    参数:
        net: 已训练的 PIANN 网络 (原地修改)
        problem: 新的 PdeProblem
        keep: 保留的隐藏层数
        config: GrowthConfig, 提供学习率, batch, alpha 和 delta 列表
        epochs: 新层训练轮数, 默认 config.epochs; 0 表示只加层不训练
        delta: 物理损失权重, 默认取新层对应的 delta

    返回:
        net
    """
    if keep >= net.depth:
        raise ValueError(f"keep={keep} 必须小于当前层数 {net.depth}")
    prune_tail(net, keep)
    grow_layer(net, activation=config.activation)
    L = net.depth
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0:
        return net
    alpha, _, schedule_delta = config.weights.for_layer(L)
    delta = schedule_delta if delta is None else delta
    X = boundary_samples(rng, boundary_count)
    objective = StageObjective(loss=config.loss, alpha=alpha, delta=delta,
                               sparsity_names=net.layer_names(L), physics=problem.physics_term())
    settings = StageSettings(epochs=epochs, batch_size=config.batch_size,
                             learning_rate=config.learning_rate_for(L), decay=config.decay,
                             best="objective", progress=config.progress, stage=L)
    train_stage(net, X, np.zeros((boundary_count, 1)), objective, settings, rng)
    threshold(net, config.rho, layer=L)
    logger.info("迁移学习完成: L=%d, 新层有效比例 %.3f, 相对 L2 误差 %.3e", L,
                active_fraction(net, L), problem.error(net))
    return net


def fem_reference(case, n=GRID_NODES):
    """命令行 fem-reference 使用的参考问题"""
    builders = {
        "a": lambda: piann_problem("a", n),
        "b": lambda: piann_problem("b", n),
        "darcy": lambda: darcy_problem(n),
        "prann-true": lambda: make_problem("prann-true", 1.0, true_charge, n=n),
        "prann-assumed": lambda: make_problem("prann-assumed", 1.0, assumed_charge, n=n),
    }
    if case not in builders:
        raise ValueError(f"未知参考问题: {case} (可选: {', '.join(builders)})")
    return builders[case]()
