#!/usr/bin/env python
"""
逐层生长模块
第一阶段联合训练, 之后循环执行 加层 -> 冻结 -> 训练 -> 阈值剪枝, 直到停止准则成立
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import ConfigError
from numeric_core import as_matrix
from regularizers import RegWeights, SimilarityMatrix
from resnet import GrowableResNet, active_fraction, grow_layer, prune_tail, threshold
from stage_trainer import (PhysicsTerm, StageObjective, StageSettings, data_loss,
                           objective_and_gradients, train_stage)

logger = logging.getLogger(__name__)

STOPPING_MODES = ("relative-improvement", "max-data-loss-increase", "l2-error", "fixed-depth")
HEAD_PHASES = ("even", "odd", "always")
TRACE_COLUMNS = ["stage", "L", "eta", "val_loss", "active_frac", "alpha", "gamma", "delta", "seconds"]
DEFAULT_MAX_LAYERS = 16

CONTINUE = "continue"
STOP = "stop"


@dataclass
class GrowthConfig:
    """
    逐层训练的全部输入参数

    alpha/gamma/delta 是第一阶段的值; 给出 *_schedule 列表时按层取值 (第 i 项对应 L=i+2),
    gamma 每加一层乘以 gamma_factor
    """

    eps_eta: float = 0.035
    rho: float = 1e-6
    alpha: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    gamma_factor: float = 0.5
    alpha_schedule: Sequence[float] = ()
    delta_schedule: Sequence[float] = ()
    lr_schedule: Sequence[float] = ()
    learning_rate: float = 0.001
    decay: float = 1.0
    epochs: int = 100
    width: int = 100
    batch_size: int = 32
    stopping: str = "relative-improvement"
    max_layers: Optional[int] = None
    activation: str = "elu"
    head_activation: str = "identity"
    loss: str = "mse"
    head_phase: str = "even"
    best: str = "data"
    early_stopping: bool = True
    adaptive: bool = False
    forward_thinking: bool = False
    progress: bool = False

    def __post_init__(self):
        if self.stopping not in STOPPING_MODES:
            raise ConfigError(f"未知停止准则: {self.stopping} (可选: {', '.join(STOPPING_MODES)})")
        if self.stopping != "fixed-depth" and self.eps_eta <= 0:
            raise ConfigError("eps_eta 必须为正")
        if self.rho < 0:
            raise ConfigError("rho 必须非负")
        if self.epochs < 1:
            raise ConfigError("epochs 必须 >= 1")
        if self.head_phase not in HEAD_PHASES:
            raise ConfigError(f"未知输出层冻结方式: {self.head_phase}")
        if self.max_layers is not None and self.max_layers < 3:
            raise ConfigError("max_layers 至少为 3")

    @property
    def weights(self):
        return RegWeights(self.alpha, self.gamma, self.delta, self.gamma_factor,
                          tuple(self.alpha_schedule), tuple(self.delta_schedule))

    def layer_cap(self):
        """层数上限; 未给出时有 delta 列表就用 1 + len(delta 列表), 否则 16"""
        if self.max_layers is not None:
            return self.max_layers
        if self.delta_schedule:
            return max(3, 1 + len(self.delta_schedule))
        return DEFAULT_MAX_LAYERS

    def learning_rate_for(self, L):
        step = L - 2
        if self.lr_schedule:
            return float(self.lr_schedule[min(step, len(self.lr_schedule) - 1)])
        return float(self.learning_rate)

    def stage_settings(self, L):
        return StageSettings(epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.learning_rate_for(L), decay=self.decay,
                             best=self.best, early_stopping=self.early_stopping,
                             adaptive=self.adaptive, progress=self.progress, stage=L)

    def head_trainable(self, L):
        if self.forward_thinking or self.head_phase == "always":
            return True
        return (L % 2 == 0) == (self.head_phase == "even")


@dataclass
class GrowthData:
    """训练数据以及各正则项需要的附加信息"""

    X: np.ndarray
    C: np.ndarray
    val: Optional[tuple] = None
    similarity: Optional[SimilarityMatrix] = None
    manifold_inputs: Optional[np.ndarray] = None
    manifold_groups: Optional[np.ndarray] = None
    physics: Optional[PhysicsTerm] = None

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.C = as_matrix(self.C, "C")

    def objective(self, loss, alpha, gamma, delta, sparsity_names=()):
        return StageObjective(loss=loss, alpha=alpha, gamma=gamma, delta=delta,
                              sparsity_names=tuple(sparsity_names), similarity=self.similarity,
                              manifold_inputs=self.manifold_inputs,
                              manifold_groups=self.manifold_groups, physics=self.physics)


@dataclass
class StageRecord:
    """一个训练阶段的记录"""

    stage: int
    L: int
    eta: float
    val_loss: float
    active_frac: float
    alpha: float
    gamma: float
    delta: float
    seconds: float
    physics_loss: float = float("nan")
    l2_error: float = float("nan")
    trainable: int = 0


@dataclass
class GrowthTrace:
    records: List[StageRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record):
        self.records.append(record)

    @property
    def last(self):
        return self.records[-1] if self.records else None

    def etas(self):
        return [r.eta for r in self.records]

    def max_trainable(self):
        return max((r.trainable for r in self.records), default=0)

    def to_frame(self, extended=False):
        """固定列的 DataFrame; extended=True 时附加 physics_loss, l2_error, trainable"""
        columns = list(TRACE_COLUMNS)
        if extended:
            columns += ["physics_loss", "l2_error", "trainable"]
        rows = [{c: getattr(r, c) for c in columns} for r in self.records]
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path, extended=False):
        self.to_frame(extended).to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_csv(cls, path):
        frame = pd.read_csv(path)
        names = {f.name for f in fields(StageRecord)}
        records = []
        for row in frame.to_dict("records"):
            kwargs = {k: v for k, v in row.items() if k in names}
            kwargs["stage"], kwargs["L"] = int(kwargs["stage"]), int(kwargs["L"])
            if "trainable" in kwargs:
                kwargs["trainable"] = int(kwargs["trainable"])
            records.append(StageRecord(**kwargs))
        return cls(records)


def active_table(net):
    """每层 (1..L) 非零参数比例"""
    layers = list(range(1, net.depth + 1))
    return pd.DataFrame({"layer": layers,
                         "active_fraction": [active_fraction(net, l) for l in layers]})


# ---------------------------------------------------------------------------
# 停止准则
# ---------------------------------------------------------------------------

def stopping_check(trace, config, reference_error=None):
    """
    判断是否继续加层

    参数:
        trace: GrowthTrace
        config: GrowthConfig
        reference_error: l2-error 模式下当前网络相对参考解的相对 L2 误差

    返回:
        CONTINUE 或 STOP
    """
    mode = config.stopping
    if mode == "fixed-depth":
        return CONTINUE
    if mode == "l2-error":
        if reference_error is None:
            raise ConfigError("l2-error 停止准则需要参考解误差")
        return STOP if reference_error <= config.eps_eta else CONTINUE
    if len(trace) < 2:
        return CONTINUE
    prev, cur = trace.records[-2].eta, trace.records[-1].eta
    if mode == "max-data-loss-increase":
        return STOP if cur - prev > config.eps_eta else CONTINUE
    if prev <= 0:
        return STOP
    return STOP if (prev - cur) / prev <= config.eps_eta else CONTINUE


# ---------------------------------------------------------------------------
# 阶段
# ---------------------------------------------------------------------------

def _validation_loss(net, data, loss):
    if data.val is None:
        return float("nan")
    return data_loss(net, data.val[0], data.val[1], loss)


def train_stage_one(config, data, rng):
    """
    第一阶段: 联合训练 U, u, W^(2), b^(2) 和输出层

    返回:
        (GrowableResNet, GrowthTrace), 网络 L=2, 记录 eta^2
    """
    if data.X.shape[0] == 0:
        raise ConfigError("训练数据为空")
    started = time.perf_counter()
    net = GrowableResNet.initialize(rng, data.X.shape[1], config.width, data.C.shape[1],
                                    hidden_layers=1, activation=config.activation,
                                    head_activation=config.head_activation,
                                    skip=not config.forward_thinking)
    alpha, gamma, delta = config.weights.for_layer(2)
    if config.forward_thinking:
        alpha = gamma = 0.0
    objective = data.objective(config.loss, alpha, gamma, delta, ("U", "u", "W2", "b2"))
    trainable = net.trainable_count()
    result = train_stage(net, data.X, data.C, objective, config.stage_settings(2), rng, data.val)
    if not config.forward_thinking:
        threshold(net, config.rho, layer=1)
        threshold(net, config.rho, layer=2)
    eta = data_loss(net, data.X, data.C, config.loss)
    record = StageRecord(stage=1, L=2, eta=eta, val_loss=_validation_loss(net, data, config.loss),
                         active_frac=active_fraction(net, 2), alpha=result.alpha,
                         gamma=result.gamma, delta=delta,
                         seconds=time.perf_counter() - started,
                         physics_loss=float(result.physics_loss), trainable=trainable)
    logger.info("第一阶段完成: eta=%.6g, 有效参数比例 %.3f", eta, record.active_frac)
    return net, GrowthTrace([record])


def grow_step(net, config, data, rng, delta_override=None):
    """
    加一层并训练; 训练前后冻结参数保持不变

    返回:
        StageRecord
    """
    started = time.perf_counter()
    start_eta = data_loss(net, data.X, data.C, config.loss)
    if config.forward_thinking:
        grow_layer(net, activation=config.activation, skip=False, init="glorot", rng=rng)
    else:
        grow_layer(net, activation=config.activation)
    L = net.depth
    net.head_frozen = not config.head_trainable(L)
    alpha, gamma, delta = config.weights.for_layer(L)
    if delta_override is not None:
        delta = float(delta_override)
    if config.forward_thinking:
        alpha = gamma = 0.0
    objective = data.objective(config.loss, alpha, gamma, delta, net.layer_names(L))
    trainable = net.trainable_count()
    start_state = net.snapshot(net.trainable_names())
    result = train_stage(net, data.X, data.C, objective, config.stage_settings(L), rng, data.val)
    if not config.forward_thinking:
        threshold(net, config.rho, layer=L)
    eta = data_loss(net, data.X, data.C, config.loss)
    if config.best == "data" and not config.forward_thinking and eta > start_eta:
        logger.warning("L=%d 阈值剪枝后数据损失 %.6g 高于阶段起点 %.6g, 恢复起点参数",
                       L, eta, start_eta)
        net.restore(start_state)
        eta = data_loss(net, data.X, data.C, config.loss)
    record = StageRecord(stage=L - 1, L=L, eta=eta,
                         val_loss=_validation_loss(net, data, config.loss),
                         active_frac=active_fraction(net, L), alpha=result.alpha,
                         gamma=result.gamma, delta=delta,
                         seconds=time.perf_counter() - started,
                         physics_loss=float(result.physics_loss), trainable=trainable)
    logger.info("L=%d: eta=%.6g val=%.6g active=%.3f (alpha=%g, gamma=%g, delta=%g)",
                L, eta, record.val_loss, record.active_frac, alpha, gamma, delta)
    return record


def grow_loop(net, config, data, rng, trace=None, error_fn=None, delta_fn=None):
    """
    加层循环, 至少加一层 (L=3), 从 (eta^2, eta^3) 开始做比值检验

    参数:
        net: train_stage_one 得到的网络
        config: GrowthConfig
        data: GrowthData
        rng: 随机数生成器
        trace: 已有记录 (通常含第一阶段)
        error_fn: net -> 相对参考解的 L2 误差, l2-error 模式需要
        delta_fn: trace -> 下一层的 delta, 给出时覆盖 delta 列表 (PRANN 控制器)

    返回:
        (net, trace)
    """
    trace = trace if trace is not None else GrowthTrace()
    cap = config.layer_cap()
    if trace.last is not None and error_fn is not None and np.isnan(trace.last.l2_error):
        trace.last.l2_error = float(error_fn(net))
    while net.depth < cap:
        delta = delta_fn(trace) if delta_fn is not None else None
        head_before = net.snapshot(["W_pred", "b_pred"])
        record = grow_step(net, config, data, rng, delta_override=delta)
        if error_fn is not None:
            record.l2_error = float(error_fn(net))
        trace.append(record)
        decision = stopping_check(trace, config, record.l2_error if error_fn is not None else None)
        if decision == STOP:
            if config.stopping == "max-data-loss-increase":
                logger.warning("L=%d 数据损失增加 %.6g 超过 %.6g, 撤销该层", record.L,
                               record.eta - trace.records[-2].eta, config.eps_eta)
                prune_tail(net, len(net.hidden) - 1)
                net.restore(head_before)
                net.head_frozen = True
                trace.records.pop()
            logger.info("停止加层: L=%d (%s)", net.depth, config.stopping)
            break
    else:
        logger.info("达到层数上限 %d", cap)
    return net, trace


def grow(config, data, rng, error_fn=None, delta_fn=None):
    """完整的逐层训练: train_stage_one + grow_loop"""
    net, trace = train_stage_one(config, data, rng)
    return grow_loop(net, config, data, rng, trace, error_fn=error_fn, delta_fn=delta_fn)


def initial_gradient_norm(net, data, config, names=None):
    """
    当前网络在整个训练集上目标函数对指定参数 (默认最后一层) 的梯度范数

    用于检查新加层是否可训练
    """
    L = net.depth
    names = tuple(names or net.layer_names(L))
    alpha, gamma, delta = config.weights.for_layer(L)
    objective = data.objective(config.loss, 0.0, gamma, delta)
    _, grads = objective_and_gradients(net, data.X, data.C, objective)
    return float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names if n in grads)))
