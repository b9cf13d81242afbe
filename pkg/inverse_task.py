#!/usr/bin/env python
"""
导热系数场反演任务
KL 展开采样, 热方程正演生成观测, 扰动流形构造, gamma 逐层加倍的生长训练
以及经验稳定性探针 delta_k
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy.linalg import eigh
from scipy.spatial.distance import cdist
from scipy.stats import qmc
from sklearn.preprocessing import StandardScaler

from errors import DatasetError, ShapeError
from fem import StructuredMesh, assemble, element_values_from_nodal, interpolate
from grower import GrowthData, grow
from numeric_core import as_matrix, make_rng
from regularizers import SimilarityMatrix

logger = logging.getLogger(__name__)

KL_GRID = 17
KL_MODES = 12
KL_VARIANCE = 1.0
KL_LENGTH = 0.5
HEAT_SOURCE = 20.0
SENSOR_COUNT = 10
SENSOR_MARGIN = 0.05
NOISE_LEVEL = 0.05
MANIFOLD_COPIES = 100
MANIFOLD_SCALE = 0.01
PROBE_COUNT = 5000
N_VALIDATION = 20
N_TEST = 500
# 热方程的 Dirichlet 边; 底边是零通量边
EXTERIOR_EDGES = ("left", "right", "top")


@dataclass
class KLBasis:
    """离散 KL 基: 特征值降序, 特征向量关于集中质量矩阵正交归一"""

    mesh: StructuredMesh
    eigenvalues: np.ndarray
    modes: np.ndarray
    weights: np.ndarray

    @property
    def n_modes(self):
        return len(self.eigenvalues)

    def mesh_norm(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.sqrt(np.sum(self.weights * u * u, axis=-1))


def lumped_mass(mesh):
    """集中质量: 每个节点分到相邻三角形面积的 1/3"""
    return np.bincount(mesh.elements.ravel(), weights=np.repeat(mesh.areas() / 3.0, 3),
                       minlength=mesh.n_nodes)


def kl_basis(n=KL_GRID, n_modes=KL_MODES, variance=KL_VARIANCE, length=KL_LENGTH):
    """
    指数核 C(p,q) = variance * exp(-||p-q||_1 / length) 在 n x n 网格上的前 n_modes 个特征对

    返回:
        KLBasis
    """
    mesh = StructuredMesh(n, n)
    weights = lumped_mass(mesh)
    cov = variance * np.exp(-cdist(mesh.nodes, mesh.nodes, "cityblock") / length)
    root = np.sqrt(weights)
    size = mesh.n_nodes
    vals, vecs = eigh(root[:, None] * cov * root[None, :],
                      subset_by_index=[size - n_modes, size - 1])
    order = np.argsort(vals)[::-1]
    modes = vecs[:, order] / root[:, None]
    return KLBasis(mesh, vals[order], modes, weights)


def kl_sample(basis, x):
    """u = sum_i sqrt(lambda_i) phi_i x_i; x 可以是单个向量或按行排列的多个向量"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.n_modes:
        raise ShapeError(f"KL 系数长度应为 {basis.n_modes}, 实际 {x.shape[-1]}")
    return (x * np.sqrt(basis.eigenvalues)) @ basis.modes.T


def sensor_locations(seed, count=SENSOR_COUNT, margin=SENSOR_MARGIN):
    """区域内部的拟随机 (Halton) 传感器位置"""
    sampler = qmc.Halton(d=2, scramble=True, seed=int(seed))
    return margin + (1.0 - 2.0 * margin) * sampler.random(count)


def heat_forward(basis, u, sensors, source=HEAT_SOURCE):
    """
    求解 -div(e^u grad y) = source (默认 20), 外边界 y=0, 底边零通量, 返回传感器处的 y
    """
    mesh = basis.mesh
    coefficient = element_values_from_nodal(mesh, u, np.exp)
    op = assemble(mesh, coefficient, source, dirichlet_edges=EXTERIOR_EDGES)
    return interpolate(mesh, op.solve(), sensors)


@dataclass
class InverseSplit:
    observations: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.observations.shape[0]


@dataclass
class InverseData:
    """反问题数据集: 训练/验证/测试观测和 KL 系数, 传感器位置和生成参数"""

    train: InverseSplit
    val: InverseSplit
    test: InverseSplit
    sensors: np.ndarray
    manifest: Dict[str, float] = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_inverse_data(seed, n_train, n_val=N_VALIDATION, n_test=N_TEST, basis=None,
                          noise=NOISE_LEVEL):
    """
    生成反问题数据集

    KL 系数取标准正态, 正演得到 10 个观测值, 再加 sigma = noise * (训练集上逐传感器标准差)
    的高斯噪声

    返回:
        InverseData
    """
    basis = basis or kl_basis()
    rng = make_rng(seed, 7)
    sensors = sensor_locations(seed)
    total = n_train + n_val + n_test
    targets = rng.standard_normal((total, basis.n_modes))
    u_fields = kl_sample(basis, targets)
    clean = np.array([heat_forward(basis, u, sensors) for u in u_fields])
    spread = clean[:n_train].std(axis=0) if n_train > 1 else np.abs(clean[:n_train]).max(axis=0)
    observations = clean + rng.standard_normal(clean.shape) * (noise * spread)
    cuts = np.cumsum([n_train, n_val])
    obs_parts = np.split(observations, cuts)
    tgt_parts = np.split(targets, cuts)
    manifest = {"seed": seed, "n_train": n_train, "n_val": n_val, "n_test": n_test,
                "noise": noise, "kl_grid": basis.mesh.nx, "kl_modes": basis.n_modes,
                "kl_variance": KL_VARIANCE, "kl_length": KL_LENGTH}
    logger.info("生成反问题数据: %d/%d/%d 样本", n_train, n_val, n_test)
    return InverseData(*(InverseSplit(o, t) for o, t in zip(obs_parts, tgt_parts)), sensors,
                       manifest)


def save_inverse_data(data, directory):
    """写出 observations.csv, targets.csv, sensors.csv, manifest.csv"""
    os.makedirs(directory, exist_ok=True)
    obs, tgt = [], []
    for name, split in data.splits().items():
        o = pd.DataFrame(split.observations,
                         columns=[f"o{k}" for k in range(split.observations.shape[1])])
        o.insert(0, "split", name)
        t = pd.DataFrame(split.targets, columns=[f"x{k}" for k in range(split.targets.shape[1])])
        t.insert(0, "split", name)
        obs.append(o)
        tgt.append(t)
    pd.concat(obs).to_csv(os.path.join(directory, "observations.csv"), index=False,
                          float_format="%.17g")
    pd.concat(tgt).to_csv(os.path.join(directory, "targets.csv"), index=False,
                          float_format="%.17g")
    pd.DataFrame(data.sensors, columns=["x", "y"]).to_csv(
        os.path.join(directory, "sensors.csv"), index=False, float_format="%.17g")
    pd.DataFrame({"key": list(data.manifest), "value": list(data.manifest.values())}).to_csv(
        os.path.join(directory, "manifest.csv"), index=False)
    return directory


def load_inverse_data(directory):
    try:
        obs = pd.read_csv(os.path.join(directory, "observations.csv"))
        tgt = pd.read_csv(os.path.join(directory, "targets.csv"))
        sensors = pd.read_csv(os.path.join(directory, "sensors.csv"))
        manifest = pd.read_csv(os.path.join(directory, "manifest.csv"))
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetError(f"无法读取反问题数据 {directory}: {e}")
    if len(obs) != len(tgt):
        raise DatasetError("观测和目标行数不一致")
    splits = {}
    for name in ("train", "val", "test"):
        o = obs[obs["split"] == name].drop(columns="split").to_numpy(dtype=np.float64)
        t = tgt[tgt["split"] == name].drop(columns="split").to_numpy(dtype=np.float64)
        splits[name] = InverseSplit(o, t)
    info = {row["key"]: float(row["value"]) for row in manifest.to_dict("records")}
    return InverseData(splits["train"], splits["val"], splits["test"],
                       sensors[["x", "y"]].to_numpy(dtype=np.float64), info)


# ---------------------------------------------------------------------------
# 扰动流形与稳定性探针
# ---------------------------------------------------------------------------

def build_perturbation_manifolds(X, count=MANIFOLD_COPIES, scale=MANIFOLD_SCALE, rng=None):
    """
    每个样本生成 count 个高斯扰动副本, 同组 (原样本 + 副本) 互为相似

    扰动标准差为各特征取值范围的 scale 倍

    返回:
        (扩充输入, 组号, SimilarityMatrix); 前 M 行为原样本, 之后按组排列副本
    """
    if count < 1:
        raise ValueError("count 必须 >= 1")
    X = as_matrix(X, "X")
    rng = rng if rng is not None else make_rng(0, 3)
    M = X.shape[0]
    sigma = scale * (X.max(axis=0) - X.min(axis=0))
    copies = np.repeat(X, count, axis=0) + rng.standard_normal((M * count, X.shape[1])) * sigma
    augmented = np.vstack([X, copies])
    groups = np.concatenate([np.arange(M), np.repeat(np.arange(M), count)])
    return augmented, groups, SimilarityMatrix(len(groups), "perturbation", groups=groups)


def ball_samples(rng, dim, count, radius):
    """半径 radius 的欧氏球内均匀采样"""
    direction = rng.standard_normal((count, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / dim)
    return direction * r


def stability_probe(net, x, count=PROBE_COUNT, eps=0.1, rng=None):
    """
    delta_k = max_i ||f(x) - f(x'_i)||_2, x'_i 在 B_eps(x) 内均匀采样

    参数:
        net: 网络 (任何带 predict 的对象)
        x: 一个输入向量
        count: 采样个数
        eps: 扰动半径
    """
    if count < 1:
        raise ValueError("count 必须 >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    rng = rng if rng is not None else make_rng(0, 5)
    if eps == 0:
        return 0.0
    samples = x + ball_samples(rng, x.shape[1], count, eps)
    base = net.predict(x)
    return float(np.max(np.linalg.norm(net.predict(samples) - base, axis=1)))


def stability_curve(net, x, radii, count=PROBE_COUNT, rng=None):
    """
    一组半径上的 delta_k, 与 radii 同顺序

    小球内的样本也落在大球内, 按半径从小到大取累计最大值, 结果关于半径不减
    """
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    if np.any(radii < 0):
        raise ValueError("半径必须非负")
    rng = rng if rng is not None else make_rng(0, 5)
    values = np.empty(len(radii))
    running = 0.0
    for k in np.argsort(radii, kind="stable"):
        running = max(running, stability_probe(net, x, count, radii[k], rng))
        values[k] = running
    return values


def relative_field_error(basis, predicted, true):
    """重建场的平均相对误差 ||u(x_hat) - u(x)|| / ||u(x)|| (网格范数)"""
    diff = basis.mesh_norm(kl_sample(basis, np.asarray(predicted) - np.asarray(true)))
    norm = basis.mesh_norm(kl_sample(basis, true))
    return float(np.mean(diff / np.maximum(norm, 1e-300)))


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass
class InverseResult:
    net: object
    trace: object
    scaler: StandardScaler
    test_error: float
    coefficient_error: float

    def checkpoint_extras(self):
        return {"scaler_mean": self.scaler.mean_, "scaler_scale": self.scaler.scale_}


def scaler_from_extras(extras):
    """从检查点附加数组恢复输入标准化"""
    scaler = StandardScaler()
    scaler.mean_ = np.asarray(extras["scaler_mean"], dtype=np.float64)
    scaler.scale_ = np.asarray(extras["scaler_scale"], dtype=np.float64)
    scaler.var_ = scaler.scale_ ** 2
    scaler.n_features_in_ = len(scaler.mean_)
    return scaler


def inverse_growth_data(data, rng, count=MANIFOLD_COPIES, scale=MANIFOLD_SCALE):
    scaler = StandardScaler().fit(data.train.observations)
    X = scaler.transform(data.train.observations)
    val = (scaler.transform(data.val.observations), data.val.targets)
    augmented, groups, _ = build_perturbation_manifolds(X, count, scale, rng)
    growth = GrowthData(X, data.train.targets, val=val, manifold_inputs=augmented,
                        manifold_groups=groups)
    return growth, scaler


def inverse_run(config, data, rng, basis=None):
    """
    反问题的逐层训练 (gamma 每层加倍, 按数据损失最大增量停止)

    返回:
        InverseResult; test_error 为测试集上重建场的平均相对误差
    """
    basis = basis or kl_basis()
    growth, scaler = inverse_growth_data(data, rng)
    net, trace = grow(config, growth, rng)
    predicted = net.predict(scaler.transform(data.test.observations))
    test_error = relative_field_error(basis, predicted, data.test.targets)
    coefficient_error = float(np.mean(np.linalg.norm(predicted - data.test.targets, axis=1)
                                      / np.linalg.norm(data.test.targets, axis=1)))
    logger.info("反问题完成: L=%d, 场相对误差 %.4f, 系数相对误差 %.4f", net.depth, test_error,
                coefficient_error)
    return InverseResult(net, trace, scaler, test_error, coefficient_error)


def probe_dataset(net, inputs, count=PROBE_COUNT, eps=0.1, seed=0):
    """对每个输入做稳定性探针, 返回 delta_k 数组"""
    inputs = as_matrix(inputs, "inputs")
    return np.array([stability_probe(net, x, count, eps, make_rng(seed, 5, k))
                     for k, x in enumerate(inputs)])


def curve_dataset(net, inputs, radii, count=PROBE_COUNT, seed=0):
    """每个输入一行 stability_curve, 返回 (输入数 x 半径数) 数组"""
    inputs = as_matrix(inputs, "inputs")
    return np.array([stability_curve(net, x, radii, count, make_rng(seed, 5, k))
                     for k, x in enumerate(inputs)]).reshape(len(inputs), -1)


def stability_sweep(config, data, seed, factors=(1.0, 2.0, 4.0), eps=0.1, count=PROBE_COUNT,
                    probe_points: Optional[int] = 20, basis=None):
    """
    用相同数据和种子在 gamma0 * factor 下分别训练, 返回各模型在测试输入上的平均 delta_k
    """
    results = []
    for factor in factors:
        rng = make_rng(seed, 11)
        scaled = replace(config, gamma=config.gamma * factor)
        run = inverse_run(scaled, data, rng, basis=basis)
        inputs = run.scaler.transform(data.test.observations[:probe_points])
        results.append(float(np.mean(probe_dataset(run.net, inputs, count, eps, seed))))
        logger.info("gamma=%.4g: 平均 delta_k = %.4g", scaled.gamma, results[-1])
    return results
