#!/usr/bin/env python
"""
正则项模块
L1 稀疏正则, 基于相似矩阵的流形正则 (标签 / K-means / epsilon 近邻 / 扰动流形),
逐层 (alpha, gamma, delta) 调度以及自适应正则控制器
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from numeric_core import as_matrix

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50
ADAPTIVE_RATIO_MAX = 10.0


# ---------------------------------------------------------------------------
# 相似矩阵
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityMatrix:
    """
    mini-batch 上的相似矩阵 beta_ij (取值 0/1, 对称, 对角为 0)

    按组构造时只保存每行的组号, 成对列表按需生成; epsilon 近邻只保存坐标和半径,
    取 mini-batch 子集时再求近邻对; 也可以直接给出有序对列表
    """

    size: int
    kind: str = "label"
    groups: Optional[np.ndarray] = None
    explicit_pairs: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    radius: float = 0.0

    @property
    def pairs(self):
        """所有有序对 (i, j), i != j, 形状 (P, 2)"""
        if self.explicit_pairs is not None:
            return self.explicit_pairs
        if self.points is not None:
            return _eps_pairs(self.points, self.radius)
        if self.groups is None:
            return np.zeros((0, 2), dtype=np.int64)
        order = np.argsort(self.groups, kind="stable")
        sorted_groups = self.groups[order]
        boundaries = np.flatnonzero(np.diff(sorted_groups)) + 1
        blocks = np.split(order, boundaries)
        chunks = []
        for members in blocks:
            if members.size < 2:
                continue
            members = np.sort(members)
            ii, jj = np.meshgrid(members, members, indexing="ij")
            mask = ii != jj
            chunks.append(np.stack([ii[mask], jj[mask]], axis=1))
        if not chunks:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = np.concatenate(chunks)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]

    @property
    def pair_count(self):
        if self.explicit_pairs is not None or self.points is not None:
            return len(self.pairs)
        if self.groups is None:
            return 0
        _, counts = np.unique(self.groups, return_counts=True)
        return int(np.sum(counts * (counts - 1)))

    def subset(self, indices):
        """取 mini-batch 子集上的相似矩阵 (行号重新编号)"""
        indices = np.asarray(indices, dtype=np.int64)
        if self.groups is not None:
            return SimilarityMatrix(len(indices), self.kind, groups=self.groups[indices])
        if self.points is not None:
            return SimilarityMatrix(len(indices), self.kind, points=self.points[indices],
                                    radius=self.radius)
        position = np.full(self.size, -1, dtype=np.int64)
        position[indices] = np.arange(len(indices))
        pairs = self.pairs
        keep = (position[pairs[:, 0]] >= 0) & (position[pairs[:, 1]] >= 0)
        sub = position[pairs[keep]]
        return SimilarityMatrix(len(indices), self.kind, explicit_pairs=sub.reshape(-1, 2))

    def to_dense(self):
        beta = np.zeros((self.size, self.size))
        pairs = self.pairs
        beta[pairs[:, 0], pairs[:, 1]] = 1.0
        return beta


def _group_ids(labels):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        _, inverse = np.unique(labels, return_inverse=True)
    else:
        _, inverse = np.unique(labels.reshape(len(labels), -1), axis=0, return_inverse=True)
    return np.asarray(inverse, dtype=np.int64).reshape(-1)


def build_similarity_label(labels, kind="label"):
    """标签相同 (且 i != j) 时 beta_ij = 1; 二维标签 (如 one-hot) 按整行比较"""
    groups = _group_ids(labels)
    return SimilarityMatrix(len(groups), kind, groups=groups)


def farthest_point_centroids(X, K, rng):
    """最远点初始化: 随机选第一个中心, 之后每次选离已有中心最远的点"""
    X = as_matrix(X, "X")
    M = X.shape[0]
    chosen = [int(rng.integers(M))]
    dist = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def kmeans_labels(X, K, rng, max_iter=KMEANS_MAX_ITER):
    """
    Lloyd K-means 聚类, 初始中心由最远点规则给出

    返回:
        每行的簇编号
    """
    X = as_matrix(X, "X")
    M = X.shape[0]
    if M == 0:
        raise ValueError("K-means 输入为空")
    if not 1 <= K <= M:
        raise ValueError(f"簇数 K={K} 必须在 1..{M} 之间")
    if K == 1:
        return np.zeros(M, dtype=np.int64)
    init = farthest_point_centroids(X, K, rng)
    model = KMeans(n_clusters=K, init=init, n_init=1, max_iter=max_iter, tol=0.0,
                   algorithm="lloyd")
    return model.fit_predict(X).astype(np.int64)


def build_similarity_kmeans(X, K, rng, max_iter=KMEANS_MAX_ITER):
    """同一 K-means 簇内的样本互为相似"""
    return build_similarity_label(kmeans_labels(X, K, rng, max_iter), kind="kmeans")


def _eps_pairs(X, eps):
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    near = d2 < eps * eps
    np.fill_diagonal(near, False)
    ii, jj = np.nonzero(near)
    return np.stack([ii, jj], axis=1).astype(np.int64)


def build_similarity_eps(X, eps):
    """epsilon 近邻相似: ||x_i - x_j|| < eps 且 i != j; 近邻对在取子集时才计算"""
    if eps < 0:
        raise ValueError("eps 必须非负")
    X = as_matrix(X, "X")
    return SimilarityMatrix(X.shape[0], "eps", points=X, radius=float(eps))


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def sparsity_loss(theta):
    """
    L1 稀疏正则 sum |theta_k| 及其次梯度 (theta_k = 0 处取 0)

    返回:
        (loss, subgradient), subgradient 与 theta 同形状
    """
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.sum(np.abs(theta))), np.sign(theta)


def manifold_loss(Y, sim):
    """
    流形正则 (1/2) sum_{i,j} beta_ij ||Y_i - Y_j||^2 (有序对求和) 及其对 Y 的梯度

    参数:
        Y: 某一隐藏层在 mini-batch 上的输出 (M x o)
        sim: SimilarityMatrix, 行号必须小于 M

    返回:
        (loss, grad), grad_i = 2 sum_j beta_ij (Y_i - Y_j)
    """
    Y = as_matrix(Y, "Y")
    M = Y.shape[0]
    if sim.groups is not None:
        if len(sim.groups) != M:
            raise IndexError(f"相似矩阵大小 {len(sim.groups)} 与 batch 行数 {M} 不一致")
        _, inverse, counts = np.unique(sim.groups, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        sums = np.zeros((len(counts), Y.shape[1]))
        np.add.at(sums, inverse, Y)
        centered = Y - sums[inverse] / counts[inverse, None]
        n = counts[inverse].astype(np.float64)
        loss = float(np.sum(n * np.sum(centered * centered, axis=1)))
        return loss, 2.0 * n[:, None] * centered
    pairs = sim.pairs
    if len(pairs) and int(pairs.max()) >= M:
        raise IndexError(f"相似矩阵下标 {int(pairs.max())} 超出 batch 行数 {M}")
    diff = Y[pairs[:, 0]] - Y[pairs[:, 1]]
    loss = 0.5 * float(np.sum(diff * diff))
    grad = np.zeros_like(Y)
    np.add.at(grad, pairs[:, 0], diff)
    np.add.at(grad, pairs[:, 1], -diff)
    return loss, grad


# ---------------------------------------------------------------------------
# 调度
# ---------------------------------------------------------------------------

def _pick(schedule, index, default):
    if schedule:
        return float(schedule[min(index, len(schedule) - 1)])
    return float(default)


@dataclass
class RegWeights:
    """
    逐层正则权重

    gamma^L = gamma0 * gamma_factor^(L-2) (默认因子 0.5, 反问题为 2);
    alpha/delta 给出逐层列表时按列表取值, 超出列表长度时沿用最后一个值
    """

    alpha: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    gamma_factor: float = 0.5
    alpha_schedule: Sequence[float] = field(default_factory=tuple)
    delta_schedule: Sequence[float] = field(default_factory=tuple)

    def for_layer(self, L):
        """第 L 层训练阶段 (L>=2) 使用的 (alpha, gamma, delta)"""
        if L < 2:
            raise ValueError("层编号从 2 开始")
        step = L - 2
        alpha = _pick(self.alpha_schedule, step, self.alpha)
        delta = _pick(self.delta_schedule, step, self.delta)
        gamma = float(self.gamma) * float(self.gamma_factor) ** step
        return alpha, gamma, delta


@dataclass
class AdaptiveRegState:
    """自适应正则: alpha(e) = r(e) alpha0, gamma(e) = r(e) gamma0, r = t_e / t_r"""

    alpha0: float
    gamma0: float
    ratio: float = 1.0
    r_max: float = ADAPTIVE_RATIO_MAX


def adaptive_update(state, t_r, t_e):
    """
    根据训练误差 t_r 和验证误差 t_e 更新下一轮的 (alpha, gamma)

    t_r = 0 时无法求比值, 取 r = r_max 并记录警告
    """
    if t_r <= 0:
        logger.warning("训练误差 t_r=%r 非正, 自适应比值取上限 %.3g", t_r, state.r_max)
        ratio = state.r_max
    else:
        ratio = float(np.clip(t_e / t_r, 0.0, state.r_max))
    state.ratio = ratio
    return ratio * state.alpha0, ratio * state.gamma0
