#!/usr/bin/env python
"""
残差序列学习
在逐层训练得到的网络之后, 依次训练若干小网络拟合前面所有网络留下的残差, 预测时求和
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

from errors import CheckpointError, ConfigError, ShapeError
from numeric_core import as_matrix
from resnet import GrowableResNet, load_checkpoint, save_checkpoint
from stage_trainer import StageObjective, StageSettings, data_loss, train_stage

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MAX_MEMBER_DEPTH = 2


@dataclass
class SeqConfig:
    """
    残差链的参数

    epochs 和 targets 可以是单个值或按网络给出的列表 (第 k 项对应第 k+2 个网络)
    """

    max_networks: int = 5
    eps_e: float = 0.1
    epochs: Union[int, Sequence[int]] = 100
    targets: Sequence[float] = ()
    width: int = 10
    depth: int = 1
    activation: str = "relu"
    learning_rate: float = 0.001
    decay: float = 1.0
    batch_size: int = 32
    progress: bool = False

    def __post_init__(self):
        if self.max_networks < 1:
            raise ConfigError("max_networks 必须 >= 1")
        if self.eps_e <= 0:
            raise ConfigError("eps_e 必须为正")
        if not 1 <= self.depth <= MAX_MEMBER_DEPTH:
            raise ConfigError(f"残差网络隐藏层数必须在 1..{MAX_MEMBER_DEPTH} 之间")
        if self.width < 1:
            raise ConfigError("width 必须 >= 1")

    def epochs_for(self, k):
        if isinstance(self.epochs, (int, np.integer)):
            return int(self.epochs)
        return int(self.epochs[min(k, len(self.epochs) - 1)])

    def target_for(self, k):
        if k < len(self.targets):
            return float(self.targets[k])
        return 0.0


@dataclass
class ResidualChain:
    """网络序列 N_1..N_r, 每个网络训练后的损失 e^i 和提前停止目标 eta_i"""

    networks: List[GrowableResNet] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    targets: List[float] = field(default_factory=list)
    classification: bool = False

    def __len__(self):
        return len(self.networks)

    def append(self, net, loss, target=0.0):
        self.networks.append(net)
        self.losses.append(float(loss))
        self.targets.append(float(target))

    def param_count(self):
        return sum(net.param_count() for net in self.networks)

    def summary(self):
        return pd.DataFrame({
            "member": np.arange(1, len(self) + 1),
            "params": [net.param_count() for net in self.networks],
            "loss": self.losses,
            "target": self.targets,
        })

    def save(self, directory):
        """每个成员一个 .npz 检查点, 另写 manifest.csv 记录顺序和损失"""
        os.makedirs(directory, exist_ok=True)
        rows = []
        for k, net in enumerate(self.networks):
            name = f"member_{k + 1}.npz"
            save_checkpoint(net, os.path.join(directory, name))
            rows.append({"index": k + 1, "file": name, "loss": self.losses[k],
                         "target": self.targets[k], "classification": int(self.classification)})
        frame = pd.DataFrame(rows, columns=["index", "file", "loss", "target", "classification"])
        frame.to_csv(os.path.join(directory, MANIFEST_NAME), index=False, float_format="%.17g")
        return directory

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, MANIFEST_NAME)
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise CheckpointError(f"无法读取残差链清单 {path}: {e}")
        if frame.empty:
            raise CheckpointError(f"残差链清单 {path} 为空")
        chain = cls(classification=bool(frame["classification"].iloc[0]))
        for row in frame.sort_values("index").itertuples(index=False):
            net, _ = load_checkpoint(os.path.join(directory, row.file))
            chain.append(net, row.loss, row.target)
        return chain


def small_network(rng, n_inputs, n_outputs, config):
    """残差链成员: 不带捷径的小前馈网络, 输出层为恒等映射"""
    return GrowableResNet.initialize(rng, n_inputs, config.width, n_outputs,
                                     hidden_layers=config.depth - 1,
                                     activation=config.activation,
                                     input_activation=config.activation, skip=False)


def residual_labels(C_prev, net, X):
    """C^(i) = C^(i-1) - N_i(X)"""
    C_prev = as_matrix(C_prev, "C")
    out = net.predict(X)
    if out.shape != C_prev.shape:
        raise ShapeError(f"网络输出形状 {out.shape} 与标签 {C_prev.shape} 不一致")
    return C_prev - out


def ensemble_predict(chain, X):
    """按链的顺序把所有成员的输出相加"""
    if not chain.networks:
        raise ValueError("残差链为空")
    total = chain.networks[0].predict(X).copy()
    for net in chain.networks[1:]:
        total += net.predict(X)
    return total


def predict_labels(chain, X):
    return np.argmax(ensemble_predict(chain, X), axis=1)


def _mse(residual):
    return float(np.mean(residual * residual))


def run_chain(seed_net, config, X, C, rng, val=None, classification=False):
    """
    以逐层训练的网络为 N_1, 依次训练残差网络

    参数:
        seed_net: 已训练的 N_1 (分类时输出 softmax 概率)
        config: SeqConfig
        X, C: 训练数据; 分类时 C 为 one-hot
        rng: 随机数生成器
        val: (X_val, C_val) 或 None, 给出时成员按验证损失选 best iterate 并按 eta_i 提前停止
        classification: 是否在概率/one-hot 空间上做分类残差

    返回:
        ResidualChain
    """
    X = as_matrix(X, "X")
    C = as_matrix(C, "C")
    residual = residual_labels(C, seed_net, X)
    val_residual = None
    if val is not None:
        val_residual = residual_labels(val[1], seed_net, val[0])

    chain = ResidualChain(classification=classification)
    chain.append(seed_net, _mse(residual))
    logger.info("残差链 N_1: 训练 MSE %.6g", chain.losses[-1])

    while len(chain) <= config.max_networks:
        if not np.any(residual):
            logger.info("残差已为零, 停止")
            break
        k = len(chain) - 1
        net = small_network(rng, X.shape[1], C.shape[1], config)
        target = config.target_for(k)
        settings = StageSettings(epochs=config.epochs_for(k), batch_size=config.batch_size,
                                 learning_rate=config.learning_rate, decay=config.decay,
                                 best="data" if val is None else "validation",
                                 early_stopping=False, early_stop_target=target,
                                 progress=config.progress, stage=len(chain) + 1)
        val_pair = None if val is None else (val[0], val_residual)
        train_stage(net, X, residual, StageObjective(loss="mse"), settings, rng, val=val_pair)
        loss = data_loss(net, X, residual)
        previous = chain.losses[-1]
        if loss > previous:
            logger.warning("N_%d 的训练损失 %.6g 高于前一个 %.6g, 丢弃并停止", len(chain) + 1,
                           loss, previous)
            break
        chain.append(net, loss, target)
        residual = residual_labels(residual, net, X)
        if val_residual is not None:
            val_residual = residual_labels(val_residual, net, val[0])
        logger.info("残差链 N_%d: 训练 MSE %.6g", len(chain), loss)
        if previous > 0 and (previous - loss) / previous <= config.eps_e:
            logger.info("相对改善 %.4g 不超过 eps_e=%.4g, 停止", (previous - loss) / previous,
                        config.eps_e)
            break
    return chain


def chain_metric(chain, X, C, classification=None):
    """分类返回 argmax 准确率, 回归返回 MSE"""
    classification = chain.classification if classification is None else classification
    C = as_matrix(C, "C")
    if classification:
        return float(np.mean(predict_labels(chain, X) == np.argmax(C, axis=1)))
    return _mse(ensemble_predict(chain, X) - C)


def seed_only(net, classification=False):
    """只含 N_1 的链, 用于只跑逐层训练的模式"""
    chain = ResidualChain(classification=classification)
    chain.append(net, float("nan"))
    return chain

