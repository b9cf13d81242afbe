#!/usr/bin/env python
"""
实验配置
INI 文件中 [problem] 一节的扁平键值; 列表用逗号分隔, 浮点数用 repr 写出以保证无损往返.
缺省键按问题编号取内置的标准参数 (GOLDEN), 再缺省才用字段默认值
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Tuple

from errors import ConfigError
from grower import GrowthConfig
from sequential import SeqConfig

logger = logging.getLogger(__name__)

SECTION = "problem"
TASKS = ("boston", "piann-a", "piann-b", "prann", "inverse", "mnist")
MODES = ("two-stage", "algo1-only", "baseline", "regularized-baseline", "forward-thinking")
SIMILARITIES = ("none", "kmeans", "label", "eps", "perturbation")


@dataclass
class ExperimentConfig:
    """一次实验的全部输入: 逐层训练参数, 残差链参数, 基线参数和数据路径"""

    problem: str = "I"
    task: str = "boston"
    mode: str = "two-stage"
    seed: int = 0

    # 逐层训练
    eps_eta: float = 0.035
    l2_target: float = 0.0
    rho: float = 1e-6
    alpha: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    gamma_factor: float = 0.5
    alpha_schedule: Tuple[float, ...] = ()
    delta_schedule: Tuple[float, ...] = ()
    lr_schedule: Tuple[float, ...] = ()
    learning_rate: float = 0.001
    decay: float = 1.0
    epochs: int = 100
    width: int = 100
    batch_size: int = 32
    stopping: str = "relative-improvement"
    max_layers: int = 0
    activation: str = "elu"
    head_activation: str = "identity"
    loss: str = "mse"
    head_phase: str = "even"
    best: str = "data"
    adaptive: bool = False

    # 流形正则的相似矩阵
    similarity: str = "none"
    kmeans_k: int = 5
    similarity_radius: float = 0.05

    # 残差链, seq_max_networks = 0 表示不用
    seq_max_networks: int = 0
    seq_eps_e: float = 0.1
    seq_width: int = 10
    seq_depth: int = 1
    seq_activation: str = "relu"
    seq_epochs: int = 500
    seq_learning_rate: float = 0.001
    seq_batch_size: int = 32
    chain_prune: int = 0

    # 基线
    baseline_depth: int = 1
    baseline_restarts: int = 10
    baseline_epochs: int = 0

    # 迁移学习 (只对 piann-b), transfer_keep = 0 表示不做
    transfer_keep: int = 0
    transfer_epochs: int = 0

    # 数据
    data_path: str = ""
    label_path: str = ""
    mnist_test_images: str = ""
    mnist_test_labels: str = ""
    n_train: int = 50
    boundary_points: int = 4000
    measurements: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"未知任务: {self.task} (可选: {', '.join(TASKS)})")
        if self.mode not in MODES:
            raise ConfigError(f"未知模式: {self.mode} (可选: {', '.join(MODES)})")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"未知相似矩阵: {self.similarity}")
        if self.baseline_restarts < 1:
            raise ConfigError("baseline_restarts 必须 >= 1")
        if self.stopping == "l2-error" and self.l2_target <= 0:
            raise ConfigError("l2-error 停止准则需要正的 l2_target")
        # 构造一次以检查取值范围
        self.growth_config()
        if self.seq_max_networks:
            self.seq_config()

    def growth_config(self, **overrides):
        eps_eta = self.l2_target if self.stopping == "l2-error" else self.eps_eta
        values = dict(eps_eta=eps_eta, rho=self.rho, alpha=self.alpha, gamma=self.gamma,
                      delta=self.delta, gamma_factor=self.gamma_factor,
                      alpha_schedule=tuple(self.alpha_schedule),
                      delta_schedule=tuple(self.delta_schedule),
                      lr_schedule=tuple(self.lr_schedule), learning_rate=self.learning_rate,
                      decay=self.decay, epochs=self.epochs, width=self.width,
                      batch_size=self.batch_size, stopping=self.stopping,
                      max_layers=self.max_layers or None, activation=self.activation,
                      head_activation=self.head_activation, loss=self.loss,
                      head_phase=self.head_phase, best=self.best, adaptive=self.adaptive,
                      forward_thinking=self.mode == "forward-thinking")
        values.update(overrides)
        return GrowthConfig(**values)

    def seq_config(self, **overrides):
        values = dict(max_networks=self.seq_max_networks, eps_e=self.seq_eps_e,
                      epochs=self.seq_epochs, width=self.seq_width, depth=self.seq_depth,
                      activation=self.seq_activation, learning_rate=self.seq_learning_rate,
                      batch_size=self.seq_batch_size)
        values.update(overrides)
        return SeqConfig(**values)

    # ------------------------------------------------------------------
    # 读写
    # ------------------------------------------------------------------
    def to_dict(self):
        return {key: _format(value) for key, value in asdict(self).items()}

    def to_file(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser[SECTION] = self.to_dict()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            parser.write(f)
        return path

    @classmethod
    def from_mapping(cls, mapping):
        """从字符串键值构造; 缺省键取 GOLDEN 中对应问题的值"""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigError(f"未知配置项: {', '.join(unknown)}")
        problem = mapping.get("problem", cls.problem)
        values = dict(GOLDEN.get(problem, {}))
        defaults = cls.__dataclass_fields__
        for key, raw in mapping.items():
            values[key] = _parse(key, raw, defaults[key].default)
        values["problem"] = problem
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except FileNotFoundError:
            raise ConfigError(f"找不到配置文件: {path}")
        except configparser.Error as e:
            raise ConfigError(f"配置文件格式错误 {path}: {e}")
        if not parser.has_section(SECTION):
            raise ConfigError(f"配置文件 {path} 缺少 [{SECTION}] 一节")
        return cls.from_mapping(dict(parser[SECTION]))

    @classmethod
    def golden(cls, problem):
        if problem not in GOLDEN:
            raise ConfigError(f"没有问题 {problem} 的标准参数 (可选: {', '.join(GOLDEN)})")
        return cls(**GOLDEN[problem])


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _parse(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"配置项 {key} 的值无法解析: {raw!r}")
    return raw


# 标准参数: 逐层训练部分按问题 I..V(b) 的输入参数表, 残差链部分按第二张表
GOLDEN = {
    "I": dict(problem="I", task="boston", eps_eta=0.035, rho=1e-6, alpha=0.05, delta=0.0,
              gamma=0.06, learning_rate=0.001, decay=0.9, epochs=50, width=100, batch_size=70,
              similarity="kmeans", kmeans_k=5, data_path="boston.csv",
              seq_max_networks=5, seq_eps_e=0.1, seq_activation="relu", seq_depth=1,
              seq_width=10, seq_epochs=500, baseline_depth=8),
    "II(a)": dict(problem="II(a)", task="piann-a", eps_eta=0.8, l2_target=1e-4,
                  stopping="l2-error", rho=1e-6, best="objective",
                  alpha_schedule=(0.001, 0.001, 0.003, 0.005, 0.05, 0.05),
                  delta_schedule=(10.0, 15.0, 20.0, 25.0, 30.0, 35.0),
                  lr_schedule=(0.001, 0.001, 0.0005, 0.0005, 0.0005, 0.0001),
                  alpha=0.001, delta=10.0, gamma=0.0, learning_rate=0.001, decay=1.0,
                  epochs=1000, width=100, batch_size=500, baseline_depth=6),
    "II(b)": dict(problem="II(b)", task="piann-b", eps_eta=0.5, l2_target=1e-4,
                  stopping="l2-error", rho=1e-6, best="objective",
                  alpha_schedule=(0.001, 0.001, 0.005, 0.01),
                  delta_schedule=(5.0, 10.0, 15.0, 20.0),
                  lr_schedule=(0.001, 0.001, 0.0005, 0.0005),
                  alpha=0.001, delta=5.0, gamma=0.0, learning_rate=0.001, decay=1.0,
                  epochs=2000, width=100, batch_size=500, baseline_depth=4,
                  transfer_keep=2),
    "III": dict(problem="III", task="prann", stopping="fixed-depth", max_layers=7, rho=1e-6,
                best="objective",
                alpha=0.0001, delta=290.0, gamma=0.001, learning_rate=0.001, decay=1.0,
                epochs=500, width=100, batch_size=500, similarity="eps",
                similarity_radius=0.05, baseline_depth=6),
    "IV(a)": dict(problem="IV(a)", task="inverse", stopping="max-data-loss-increase",
                  eps_eta=0.035, rho=1e-6, alpha=0.0001, delta=0.0, gamma=0.001,
                  gamma_factor=2.0, best="final", learning_rate=0.001, decay=1.0, epochs=400,
                  width=100, batch_size=20, n_train=20, similarity="perturbation",
                  baseline_depth=4),
    "IV(b)": dict(problem="IV(b)", task="inverse", stopping="max-data-loss-increase",
                  eps_eta=0.0015, rho=1e-6, alpha=0.0001, delta=0.0, gamma=0.001,
                  gamma_factor=2.0, best="final", learning_rate=0.001, decay=1.0, epochs=400,
                  width=100, batch_size=50, n_train=50, similarity="perturbation",
                  baseline_depth=4),
    "V(a)": dict(problem="V(a)", task="mnist", eps_eta=0.005, rho=1e-6, alpha=0.001, delta=0.0,
                 gamma=0.0035, learning_rate=0.001, decay=0.9, epochs=100, width=20,
                 batch_size=900, head_activation="softmax", loss="cross_entropy",
                 similarity="label", data_path="train-images-idx3-ubyte",
                 label_path="train-labels-idx1-ubyte",
                 mnist_test_images="t10k-images-idx3-ubyte",
                 mnist_test_labels="t10k-labels-idx1-ubyte",
                 seq_max_networks=20, seq_eps_e=0.05, seq_activation="elu", seq_depth=2,
                 seq_width=20, seq_epochs=100, seq_batch_size=900, chain_prune=4,
                 baseline_depth=13),
    "V(b)": dict(problem="V(b)", task="mnist", eps_eta=0.005, rho=1e-6, alpha=0.001, delta=0.0,
                 gamma=0.005, learning_rate=0.001, decay=0.9, epochs=100, width=500,
                 batch_size=900, head_activation="softmax", loss="cross_entropy",
                 similarity="label", data_path="train-images-idx3-ubyte",
                 label_path="train-labels-idx1-ubyte",
                 mnist_test_images="t10k-images-idx3-ubyte",
                 mnist_test_labels="t10k-labels-idx1-ubyte",
                 seq_max_networks=4, seq_eps_e=0.05, seq_activation="elu", seq_depth=2,
                 seq_width=500, seq_epochs=100, seq_batch_size=900, chain_prune=4,
                 baseline_depth=12),
}
