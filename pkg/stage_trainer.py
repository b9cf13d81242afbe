#!/usr/bin/env python
"""
训练阶段模块
一个可复用的 mini-batch Adam 训练循环: 第一阶段联合训练, 每次加层后的训练,
残差网络, 基线网络和迁移学习都调用这里的 train_stage
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from errors import ConfigError, ShapeError, TrainingDivergedError
from numeric_core import AdamOptimizer, as_matrix
from regularizers import (AdaptiveRegState, SimilarityMatrix, adaptive_update, manifold_loss,
                          sparsity_loss)
from resnet import backward, forward

logger = logging.getLogger(__name__)

BEST_MODES = ("data", "objective", "validation", "final")
LOSS_KINDS = ("mse", "cross_entropy")

# 交叉熵里 log 的下限
_LOG_FLOOR = 1e-300


@dataclass
class PhysicsTerm:
    """
    物理正则项: 在配点上求网络输出, 再交给离散残差算子

    evaluate(y) 返回 (loss, dloss/dy), y 是第 output_index 个输出在全部配点上的取值
    """

    points: np.ndarray
    evaluate: Callable
    output_index: int = 0


@dataclass
class StageObjective:
    """
    一个训练阶段的目标函数

    data + alpha * L_s + gamma * L_m + delta * L_p

    流形项默认作用在 mini-batch 的顶层隐藏输出上; 给出 manifold_inputs 时改用单独的扩充集合
    (扰动流形), manifold_groups[k] 是扩充行 k 所属的训练样本编号
    """

    loss: str = "mse"
    alpha: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    sparsity_names: Sequence[str] = ()
    similarity: Optional[SimilarityMatrix] = None
    manifold_inputs: Optional[np.ndarray] = None
    manifold_groups: Optional[np.ndarray] = None
    physics: Optional[PhysicsTerm] = None

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"未知损失类型: {self.loss}")
        if min(self.alpha, self.gamma, self.delta) < 0:
            raise ConfigError("正则权重必须非负")


@dataclass
class StageSettings:
    """优化器和循环的设置"""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    decay: float = 1.0
    best: str = "data"
    early_stopping: bool = True
    patience: Optional[int] = None
    early_stop_target: float = 0.0
    adaptive: bool = False
    progress: bool = False
    stage: Optional[int] = None

    def __post_init__(self):
        if self.best not in BEST_MODES:
            raise ConfigError(f"未知 best-iterate 模式: {self.best} (可选: {', '.join(BEST_MODES)})")
        if self.epochs < 1:
            raise ConfigError("epochs 必须 >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须 >= 1")

    def resolved_patience(self):
        if self.patience is not None:
            return max(1, int(self.patience))
        return max(1, self.epochs // 10)


@dataclass
class StageResult:
    """train_stage 的结果; data_loss 是恢复 best iterate 之后的训练数据损失"""

    data_loss: float
    objective: float
    val_loss: Optional[float]
    physics_loss: float
    epochs_run: int
    best_epoch: int
    alpha: float
    gamma: float
    history: List[Dict[str, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def _data_term(tape, C, kind, net):
    """返回 (loss, d_output, d_logits), 两个梯度里只有一个非 None"""
    out = tape.output
    if out.shape != C.shape:
        raise ShapeError(f"标签形状 {C.shape} 与输出 {out.shape} 不一致")
    if kind == "mse":
        diff = out - C
        loss = float(np.mean(diff * diff))
        return loss, 2.0 * diff / diff.size, None
    if net.head_activation.kind != "softmax":
        raise ConfigError("交叉熵损失要求 softmax 输出层")
    M = out.shape[0]
    loss = float(-np.sum(C * np.log(np.maximum(out, _LOG_FLOOR))) / M)
    return loss, None, (out - C) / M


def data_loss(net, X, C, kind="mse"):
    """整个数据集上的数据损失 (MSE 或交叉熵)"""
    tape = forward(net, X)
    loss, _, _ = _data_term(tape, as_matrix(C, "C"), kind, net)
    return loss


def _accumulate(grads, extra):
    for name, g in extra.items():
        grads[name] = grads[name] + g if name in grads else g


def _zero_head_grad(tape):
    return np.zeros_like(tape.output)


def objective_and_gradients(net, X, C, objective, rows=None):
    """
    在 X[rows] 上计算目标函数各项及所有可训练参数的梯度

    参数:
        net: GrowableResNet
        X, C: 整个训练集 (流形项按训练行号取相似关系)
        objective: StageObjective
        rows: mini-batch 行号, 默认全部

    返回:
        (terms, grads); terms 含 data, sparsity, manifold, physics, total
    """
    if rows is None:
        rows = np.arange(X.shape[0])
    top = net.depth
    tape = forward(net, X[rows])
    data, d_output, d_logits = _data_term(tape, C[rows], objective.loss, net)
    terms = {"data": data, "sparsity": 0.0, "manifold": 0.0, "physics": 0.0}

    hidden_grads = {}
    use_manifold = objective.gamma > 0
    if use_manifold and objective.manifold_inputs is None and objective.similarity is not None:
        m_loss, m_grad = manifold_loss(tape.Y[-1], objective.similarity.subset(rows))
        terms["manifold"] = m_loss
        hidden_grads[top] = objective.gamma * m_grad
    grads = backward(net, tape, d_output=d_output, d_logits=d_logits, hidden_grads=hidden_grads)

    if use_manifold and objective.manifold_inputs is not None:
        mask = np.isin(objective.manifold_groups, rows)
        if np.any(mask):
            m_tape = forward(net, objective.manifold_inputs[mask])
            sim = SimilarityMatrix(int(mask.sum()), "perturbation",
                                   groups=np.asarray(objective.manifold_groups)[mask])
            m_loss, m_grad = manifold_loss(m_tape.Y[-1], sim)
            terms["manifold"] = m_loss
            _accumulate(grads, backward(net, m_tape, d_output=_zero_head_grad(m_tape),
                                        hidden_grads={top: objective.gamma * m_grad}))

    if objective.delta > 0 and objective.physics is not None:
        physics = objective.physics
        p_tape = forward(net, physics.points)
        p_loss, p_grad = physics.evaluate(p_tape.output[:, physics.output_index])
        terms["physics"] = p_loss
        d_out = _zero_head_grad(p_tape)
        d_out[:, physics.output_index] = objective.delta * np.asarray(p_grad).reshape(-1)
        _accumulate(grads, backward(net, p_tape, d_output=d_out))

    if objective.alpha > 0:
        params = net.parameters()
        for name in objective.sparsity_names:
            if name not in grads:
                continue
            s_loss, s_grad = sparsity_loss(params[name])
            terms["sparsity"] += s_loss
            grads[name] = grads[name] + objective.alpha * s_grad

    terms["total"] = (terms["data"] + objective.alpha * terms["sparsity"]
                      + objective.gamma * terms["manifold"] + objective.delta * terms["physics"])
    return terms, grads


def physics_value(net, physics):
    """网络在配点上的物理损失"""
    out = forward(net, physics.points).output[:, physics.output_index]
    loss, _ = physics.evaluate(out)
    return float(loss)


def manifold_value(net, X, objective):
    """整个训练集 (或全部扰动样本) 上的流形项, 与 rows 取全部时 objective_and_gradients 的值一致"""
    if objective.manifold_inputs is not None:
        groups = np.asarray(objective.manifold_groups)
        Y = forward(net, objective.manifold_inputs).Y[-1]
        return manifold_loss(Y, SimilarityMatrix(len(groups), "perturbation", groups=groups))[0]
    if objective.similarity is not None:
        return manifold_loss(forward(net, X).Y[-1], objective.similarity)[0]
    return 0.0


def _epoch_metrics(net, X, C, objective, val):
    metrics = {"data": data_loss(net, X, C, objective.loss), "sparsity": 0.0, "manifold": 0.0,
               "physics": 0.0}
    if objective.alpha > 0 and objective.sparsity_names:
        params = net.parameters()
        metrics["sparsity"] = sum(sparsity_loss(params[n])[0] for n in objective.sparsity_names)
    if objective.delta > 0 and objective.physics is not None:
        metrics["physics"] = physics_value(net, objective.physics)
    if objective.gamma > 0:
        metrics["manifold"] = manifold_value(net, X, objective)
    metrics["objective"] = (metrics["data"] + objective.alpha * metrics["sparsity"]
                            + objective.gamma * metrics["manifold"]
                            + objective.delta * metrics["physics"])
    metrics["val"] = data_loss(net, val[0], val[1], objective.loss) if val is not None else math.nan
    return metrics


def _monitor(metrics, mode):
    if mode == "data":
        return metrics["data"]
    if mode == "objective":
        return metrics["objective"]
    if mode == "validation":
        return metrics["val"] if not math.isnan(metrics["val"]) else metrics["data"]
    return None


def _check_finite(metrics, settings, epoch):
    bad = {k: v for k, v in metrics.items() if k != "val" and not math.isfinite(v)}
    if bad or (not math.isnan(metrics["val"]) and not math.isfinite(metrics["val"])):
        raise TrainingDivergedError("训练损失出现 NaN/Inf", stage=settings.stage, epoch=epoch,
                                    losses=metrics)


# ---------------------------------------------------------------------------
# 训练循环
# ---------------------------------------------------------------------------

def train_stage(net, X, C, objective, settings, rng, val=None):
    """
    用 mini-batch Adam 训练网络中未冻结的参数

    参数:
        net: GrowableResNet (原地修改)
        X, C: 训练输入和标签
        objective: StageObjective
        settings: StageSettings
        rng: 打乱 mini-batch 用的随机数生成器
        val: (X_val, C_val) 或 None

    返回:
        StageResult; 网络参数停留在 best iterate 上
    """
    X = as_matrix(X, "X")
    C = as_matrix(C, "C")
    if X.shape[0] != C.shape[0]:
        raise ShapeError(f"X 有 {X.shape[0]} 行而 C 有 {C.shape[0]} 行")
    if X.shape[0] == 0:
        raise ShapeError("训练数据为空")
    if val is not None:
        val = (as_matrix(val[0], "X_val"), as_matrix(val[1], "C_val"))

    trainable = net.trainable_names()
    params = net.parameters()
    optimizer = AdamOptimizer(settings.learning_rate, settings.decay)
    current = objective
    adaptive = AdaptiveRegState(objective.alpha, objective.gamma) if settings.adaptive else None

    metrics = _epoch_metrics(net, X, C, current, val)
    _check_finite(metrics, settings, -1)
    best_value = _monitor(metrics, settings.best)
    best_state = net.snapshot(trainable)
    best_epoch = -1
    history = []
    if not trainable:
        logger.warning("没有可训练参数, 跳过训练")
        return StageResult(metrics["data"], metrics["objective"],
                           None if val is None else metrics["val"], metrics["physics"], 0, -1,
                           current.alpha, current.gamma, history)

    M = X.shape[0]
    batch = min(settings.batch_size, M)
    patience = settings.resolved_patience()
    best_val, stale = math.inf, 0
    epochs_run = 0
    desc = "stage" if settings.stage is None else f"stage L={settings.stage}"
    for epoch in tqdm(range(settings.epochs), desc=desc, disable=not settings.progress, leave=False):
        order = rng.permutation(M)
        for start in range(0, M, batch):
            rows = order[start:start + batch]
            terms, grads = objective_and_gradients(net, X, C, current, rows)
            if not math.isfinite(terms["total"]):
                raise TrainingDivergedError("mini-batch 损失出现 NaN/Inf", stage=settings.stage,
                                            epoch=epoch, losses=terms)
            optimizer.step(params, grads, epoch)
            net.mark_modified()
        epochs_run = epoch + 1

        metrics = _epoch_metrics(net, X, C, current, val)
        _check_finite(metrics, settings, epoch)
        metrics["alpha"], metrics["gamma"] = current.alpha, current.gamma
        history.append(dict(metrics, epoch=epoch))
        logger.debug("epoch %d: data=%.6g objective=%.6g val=%.6g", epoch, metrics["data"],
                     metrics["objective"], metrics["val"])

        value = _monitor(metrics, settings.best)
        if value is not None and value < best_value:
            best_value = value
            best_state = net.snapshot(trainable)
            best_epoch = epoch

        if val is not None:
            if metrics["val"] < settings.early_stop_target:
                logger.debug("验证损失 %.6g 低于目标 %.6g, 提前结束", metrics["val"],
                             settings.early_stop_target)
                break
            if settings.early_stopping:
                if metrics["val"] < best_val:
                    best_val, stale = metrics["val"], 0
                else:
                    stale += 1
                    if stale >= patience:
                        logger.debug("验证损失 %d 轮没有改善, 提前结束", patience)
                        break
            if adaptive is not None:
                alpha, gamma = adaptive_update(adaptive, metrics["data"], metrics["val"])
                current = replace(current, alpha=alpha, gamma=gamma)

    if settings.best != "final":
        net.restore(best_state)
    else:
        best_epoch = epochs_run - 1
    final = _epoch_metrics(net, X, C, current, val)
    return StageResult(final["data"], final["objective"], None if val is None else final["val"],
                       final["physics"], epochs_run, best_epoch, current.alpha, current.gamma,
                       history)
