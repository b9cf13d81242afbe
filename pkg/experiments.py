#!/usr/bin/env python
"""
实验调度
按任务准备数据和评价函数, 再按模式调用逐层训练 (可接残差链), 基线或带正则的基线,
最后写出 report.csv / trace.csv / active.csv / solution.csv
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from datasets import load_boston, load_mnist, load_mnist_test, resolve_path
from errors import ConfigError
from fem import relative_l2, solution_frame
from grower import GrowthData, GrowthTrace, active_table, grow
from inverse_task import (generate_inverse_data, inverse_growth_data, kl_basis,
                          relative_field_error)
from numeric_core import make_rng
from physics_tasks import (darcy_problem, piann_data, piann_problem, prann_data,
                           prann_delta_fn, transfer_retrain)
from regularizers import build_similarity_kmeans, build_similarity_label
from resnet import GrowableResNet, prune_tail, save_checkpoint
from sequential import ResidualChain, chain_metric, ensemble_predict, run_chain, seed_only
from stage_trainer import StageSettings, train_stage

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["key", "value"]

# 各用途的随机流编号
DATA_STREAM = 3
TRAIN_STREAM = 4
CHAIN_STREAM = 6
BASELINE_STREAM = 20


@dataclass
class TaskSetup:
    """一个任务的训练数据和评价方式; evaluate 接收预测函数, 返回测试指标"""

    data: GrowthData
    evaluate: Callable
    metric_name: str
    higher_is_better: bool = False
    classification: bool = False
    error_fn: Optional[Callable] = None
    delta_fn: Optional[Callable] = None
    solution: Optional[Callable] = None
    extras: Optional[Callable] = None
    checkpoint_extras: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class RunReport:
    """一次实验的结果; wall_time 不写入 report.csv, 以保证同种子重跑结果逐字节相同"""

    problem: str
    task: str
    mode: str
    seed: int
    metric_name: str
    metric: float
    params_trained_simultaneously: int
    total_params: int
    depth: int
    chain_length: int
    extra: Dict[str, float] = field(default_factory=dict)
    trace: GrowthTrace = field(default_factory=GrowthTrace)
    active: Optional[pd.DataFrame] = None
    solution: Optional[pd.DataFrame] = None
    chain_summary: Optional[pd.DataFrame] = None
    wall_time: float = 0.0
    net: Optional[GrowableResNet] = None
    chain: Optional[ResidualChain] = None
    checkpoint_extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self):
        rows = [("problem", self.problem), ("task", self.task), ("mode", self.mode),
                ("seed", self.seed), ("metric_name", self.metric_name), ("metric", self.metric),
                ("params_trained_simultaneously", self.params_trained_simultaneously),
                ("total_params", self.total_params), ("depth", self.depth),
                ("chain_length", self.chain_length)]
        rows += sorted(self.extra.items())
        return rows

    def to_frame(self):
        return pd.DataFrame([(k, _format_value(v)) for k, v in self.rows()], columns=REPORT_COLUMNS)

    @classmethod
    def from_frame(cls, frame):
        """从 report.csv 的内容恢复 (不含 trace 等附表)"""
        values = {str(k): _parse_value(v) for k, v in zip(frame["key"], frame["value"])}
        base = {name: values.pop(name) for name in (
            "problem", "task", "mode", "seed", "metric_name", "metric",
            "params_trained_simultaneously", "total_params", "depth", "chain_length")}
        for name in ("problem", "task", "mode", "metric_name"):
            base[name] = str(base[name])
        base["metric"] = float(base["metric"])
        return cls(**base, extra=values)


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def _parse_value(text):
    text = str(text)
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# ---------------------------------------------------------------------------
# 任务准备
# ---------------------------------------------------------------------------

def _mse(pred, C):
    diff = pred - C
    return float(np.mean(diff * diff))


def _accuracy(pred, C):
    return float(np.mean(np.argmax(pred, axis=1) == np.argmax(C, axis=1)))


def _setup_boston(config, rng):
    split = load_boston(config.data_path, seed=config.seed)
    similarity = None
    if config.similarity == "kmeans":
        similarity = build_similarity_kmeans(split.X_train, config.kmeans_k, rng)
    data = GrowthData(split.X_train, split.C_train, val=split.val, similarity=similarity)
    X_test, C_test = split.val
    return TaskSetup(data, lambda predict: _mse(predict(X_test), C_test), "test_mse")


def _setup_mnist(config, rng):
    if not config.label_path:
        raise ConfigError("MNIST 任务需要 label_path")
    split = load_mnist(config.data_path, config.label_path, seed=config.seed)
    similarity = None
    if config.similarity == "label":
        similarity = build_similarity_label(np.argmax(split.C_train, axis=1))
    data = GrowthData(split.X_train, split.C_train, val=split.val, similarity=similarity)
    test_images = resolve_path(config.mnist_test_images) if config.mnist_test_images else ""
    if test_images and os.path.exists(test_images):
        X_test, C_test = load_mnist_test(config.mnist_test_images, config.mnist_test_labels)
    else:
        logger.warning("没有 MNIST 测试集文件, 用验证集计算准确率")
        X_test, C_test = split.val
    return TaskSetup(data, lambda predict: _accuracy(predict(X_test), C_test), "test_accuracy",
                     higher_is_better=True, classification=True)


def _pde_setup(data, problem, delta_fn=None):
    points = problem.mesh.points
    reference = problem.reference_grid()
    return TaskSetup(data, lambda predict: relative_l2(predict(points)[:, 0], reference),
                     "relative_l2", error_fn=problem.error, delta_fn=delta_fn,
                     solution=lambda predict: solution_frame(points, predict(points)[:, 0]))


def _setup_piann(config, rng):
    problem = piann_problem(config.task[-1])
    return _pde_setup(piann_data(problem, rng, config.boundary_points), problem)


def _setup_prann(config, rng):
    radius = config.similarity_radius if config.similarity == "eps" else 0.0
    data, truth = prann_data(rng, config.boundary_points, config.measurements, radius)
    return _pde_setup(data, truth, delta_fn=prann_delta_fn(config.delta, rng))


def _setup_inverse(config, rng):
    basis = kl_basis()
    dataset = generate_inverse_data(config.seed, config.n_train, basis=basis)
    data, scaler = inverse_growth_data(dataset, rng)
    if config.similarity != "perturbation":
        data.manifold_inputs = data.manifold_groups = None
    X_test = scaler.transform(dataset.test.observations)
    targets = dataset.test.targets

    def coefficient_error(predict):
        pred = predict(X_test)
        err = np.linalg.norm(pred - targets, axis=1) / np.linalg.norm(targets, axis=1)
        return {"coefficient_error": float(np.mean(err))}

    return TaskSetup(data, lambda predict: relative_field_error(basis, predict(X_test), targets),
                     "relative_error", extras=coefficient_error,
                     checkpoint_extras={"scaler_mean": scaler.mean_, "scaler_scale": scaler.scale_})


SETUPS = {
    "boston": _setup_boston,
    "mnist": _setup_mnist,
    "piann-a": _setup_piann,
    "piann-b": _setup_piann,
    "prann": _setup_prann,
    "inverse": _setup_inverse,
}


def prepare_task(config):
    return SETUPS[config.task](config, make_rng(config.seed, DATA_STREAM))


# ---------------------------------------------------------------------------
# 基线
# ---------------------------------------------------------------------------

def plain_network(config, rng, n_inputs, n_outputs):
    """基线网络: baseline_depth 个不带捷径的隐藏层, 宽度与逐层网络相同"""
    return GrowableResNet.initialize(rng, n_inputs, config.width, n_outputs,
                                     hidden_layers=config.baseline_depth,
                                     activation=config.activation,
                                     head_activation=config.head_activation,
                                     input_activation=config.activation, skip=False)


def train_baseline(config, setup, rng, regularized=False):
    """
    联合训练一个等深度的普通网络

    regularized=True 时在全部参数上加 L_s, 并使用同样的流形项
    """
    data = setup.data
    net = plain_network(config, rng, data.X.shape[1], data.C.shape[1])
    delta = config.delta_schedule[-1] if config.delta_schedule else config.delta
    alpha, gamma = (config.alpha, config.gamma) if regularized else (0.0, 0.0)
    names = net.trainable_names() if regularized else ()
    objective = data.objective(config.loss, alpha, gamma, delta, names)
    settings = StageSettings(epochs=config.baseline_epochs or config.epochs,
                             batch_size=config.batch_size, learning_rate=config.learning_rate,
                             decay=config.decay,
                             best="validation" if data.val is not None else "objective",
                             progress=False, stage=0)
    result = train_stage(net, data.X, data.C, objective, settings, rng, data.val)
    return net, result


def best_baseline(config, setup, regularized=False):
    """
    baseline_restarts 个随机初始化中按训练集上的目标函数取最好的一个, 再计算它的测试指标

    返回:
        (net, 测试指标)
    """
    best_net, best_loss = None, None
    for k in range(config.baseline_restarts):
        net, result = train_baseline(config, setup, make_rng(config.seed, BASELINE_STREAM, k),
                                     regularized)
        loss = result.objective
        logger.info("基线 %d/%d: 训练目标 %.6g", k + 1, config.baseline_restarts, loss)
        if best_loss is None or loss < best_loss:
            best_net, best_loss = net, loss
    return best_net, setup.evaluate(best_net.predict)


# ---------------------------------------------------------------------------
# 运行
# ---------------------------------------------------------------------------

def params_trained_simultaneously(trace, chain=None):
    """任一阶段同时训练的最大参数数 (残差链成员逐个训练, 各自计一次)"""
    counts = [trace.max_trainable()]
    if chain is not None:
        counts += [net.param_count() for net in chain.networks[1:]]
    return max(counts)


def _chain_seed(config, net):
    if config.chain_prune <= 0:
        return net
    seed = net.copy()
    keep = max(1, len(seed.hidden) - config.chain_prune)
    prune_tail(seed, keep)
    logger.info("残差链之前删去最后 %d 个隐藏层", len(net.hidden) - keep)
    return seed


def _transfer(config, net, rng):
    """piann-b 上的迁移学习: 截断后在达西问题上重训练, 返回新问题上的相对 L2 误差"""
    problem = darcy_problem()
    keep = min(config.transfer_keep, len(net.hidden))
    transferred = transfer_retrain(net.copy(), problem, keep, config.growth_config(), rng,
                                   epochs=config.transfer_epochs or None,
                                   boundary_count=config.boundary_points)
    return problem.error(transferred)


def run_experiment(config):
    """
    按 config.task 准备数据, 按 config.mode 训练并评价

    返回:
        RunReport
    """
    started = time.perf_counter()
    setup = prepare_task(config)
    extra: Dict[str, float] = {}
    trace = GrowthTrace()
    chain = None

    if config.mode in ("baseline", "regularized-baseline"):
        net, metric = best_baseline(config, setup, regularized=config.mode == "regularized-baseline")
        predict = net.predict
        trained = net.param_count()
        total = net.param_count()
        depth = net.depth
    else:
        rng = make_rng(config.seed, TRAIN_STREAM)
        net, trace = grow(config.growth_config(), setup.data, rng, error_fn=setup.error_fn,
                          delta_fn=setup.delta_fn)
        predict = net.predict
        depth = net.depth
        extra["algo1_metric"] = setup.evaluate(net.predict)
        if config.mode == "two-stage" and config.seq_max_networks > 0:
            seed_net = _chain_seed(config, net)
            chain = run_chain(seed_net, config.seq_config(), setup.data.X, setup.data.C,
                              make_rng(config.seed, CHAIN_STREAM), val=setup.data.val,
                              classification=setup.classification)
            predict = partial(ensemble_predict, chain)
            extra["chain_train_metric"] = chain_metric(chain, setup.data.X, setup.data.C)
        else:
            chain = seed_only(net, setup.classification)
        if config.transfer_keep > 0 and config.task == "piann-b":
            extra["transfer_relative_l2"] = _transfer(config, net,
                                                      make_rng(config.seed, TRAIN_STREAM, 1))
        metric = setup.evaluate(predict)
        trained = params_trained_simultaneously(trace, chain)
        total = chain.param_count()

    if setup.extras is not None:
        extra.update(setup.extras(predict))
    result = RunReport(
        problem=config.problem, task=config.task, mode=config.mode, seed=config.seed,
        metric_name=setup.metric_name, metric=float(metric),
        params_trained_simultaneously=int(trained), total_params=int(total), depth=depth,
        chain_length=len(chain) if chain is not None else 1, extra=extra, trace=trace,
        active=active_table(net),
        solution=setup.solution(predict) if setup.solution is not None else None,
        chain_summary=chain.summary() if chain is not None and len(chain) > 1 else None,
        wall_time=time.perf_counter() - started, net=net, chain=chain,
        checkpoint_extras=setup.checkpoint_extras)
    logger.info("%s [%s/%s]: %s=%.6g, 同时训练参数 %d, 总参数 %d, 用时 %.1fs", config.problem,
                config.task, config.mode, result.metric_name, result.metric,
                result.params_trained_simultaneously, result.total_params, result.wall_time)
    return result


def report(result, path):
    """
    写出结果文件

    返回:
        写出的文件路径列表
    """
    os.makedirs(path, exist_ok=True)
    written: List[str] = []
    target = os.path.join(path, "report.csv")
    result.to_frame().to_csv(target, index=False)
    written.append(target)
    written.append(result.trace.to_csv(os.path.join(path, "trace.csv"), extended=True))
    if result.active is not None:
        target = os.path.join(path, "active.csv")
        result.active.to_csv(target, index=False, float_format="%.17g")
        written.append(target)
    if result.solution is not None:
        target = os.path.join(path, "solution.csv")
        result.solution.to_csv(target, index=False, float_format="%.17g")
        written.append(target)
    if result.chain_summary is not None:
        target = os.path.join(path, "chain.csv")
        result.chain_summary.to_csv(target, index=False, float_format="%.17g")
        written.append(target)
    return written


def save_models(result, path):
    """保存逐层网络 (model.npz, 带输入标准化等附加数组) 和残差链 (chain/)"""
    if result.net is None:
        return []
    os.makedirs(path, exist_ok=True)
    written = [save_checkpoint(result.net, os.path.join(path, "model.npz"),
                               result.checkpoint_extras)]
    if result.chain is not None and len(result.chain) > 1:
        written.append(result.chain.save(os.path.join(path, "chain")))
    return written


def read_report(path):
    return RunReport.from_frame(pd.read_csv(os.path.join(path, "report.csv"), dtype=str))
