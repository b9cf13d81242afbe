#!/usr/bin/env python
"""
线性 Lagrange (P1) 有限元模块
单位正方形上的结构三角网格 (可带 (0.5,1)x{0.5} 裂缝), 刚度/载荷组装,
Dirichlet 边界处理, 稀疏直接求解, 离散物理残差损失和 P1 插值
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from errors import MeshError, ShapeError

logger = logging.getLogger(__name__)

# 三角形面积下限, 低于此值视为退化
MIN_TRIANGLE_AREA = 1e-14

EDGES = ("left", "right", "bottom", "top")


class StructuredMesh:
    """
    单位正方形上 nx x ny 节点的结构网格, 每个单元格分成两个三角形

    节点编号: 几何节点 j*nx+i 在前, 裂缝上侧的复制节点在后;
    带裂缝时 y=0.5 且 x>0.5 的节点复制一份, 裂缝上方一排单元使用复制节点
    """

    def __init__(self, nx, ny=None, slit=False):
        ny = nx if ny is None else ny
        if nx < 2 or ny < 2:
            raise MeshError("网格每个方向至少需要 2 个节点")
        if slit and (nx % 2 == 0 or ny % 2 == 0):
            raise MeshError("带裂缝的网格要求 nx, ny 为奇数, 使裂缝落在网格线上")
        self.nx, self.ny, self.slit = int(nx), int(ny), bool(slit)
        xs = np.linspace(0.0, 1.0, self.nx)
        ys = np.linspace(0.0, 1.0, self.ny)
        gx, gy = np.meshgrid(xs, ys)
        grid = np.column_stack([gx.ravel(), gy.ravel()])
        n_grid = self.nx * self.ny

        top_copy = {}
        if self.slit:
            mid_i, mid_j = (self.nx - 1) // 2, (self.ny - 1) // 2
            for i in range(mid_i + 1, self.nx):
                top_copy[mid_j * self.nx + i] = n_grid + len(top_copy)
        self.slit_pairs = np.array(sorted(top_copy.items()), dtype=np.int64).reshape(-1, 2)
        self.nodes = np.vstack([grid, grid[self.slit_pairs[:, 0]]]) if len(top_copy) else grid
        self.grid_index = np.concatenate([np.arange(n_grid), self.slit_pairs[:, 0]])

        elements = []
        above_slit = (self.ny - 1) // 2 if self.slit else -1
        for j in range(self.ny - 1):
            for i in range(self.nx - 1):
                n00 = j * self.nx + i
                n10, n01, n11 = n00 + 1, n00 + self.nx, n00 + self.nx + 1
                if j == above_slit:
                    n00 = top_copy.get(n00, n00)
                    n10 = top_copy.get(n10, n10)
                elements.append((n00, n10, n11))
                elements.append((n00, n11, n01))
        self.elements = np.array(elements, dtype=np.int64)

        x, y = self.nodes[:, 0], self.nodes[:, 1]
        self.edge_masks = {"left": np.isclose(x, 0.0), "right": np.isclose(x, 1.0),
                           "bottom": np.isclose(y, 0.0), "top": np.isclose(y, 1.0)}
        self.boundary = np.logical_or.reduce(list(self.edge_masks.values()))

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_grid(self):
        return self.nx * self.ny

    @property
    def points(self):
        """几何节点坐标 (nx*ny x 2), 即配点"""
        return self.nodes[:self.n_grid]

    @property
    def h(self):
        return 1.0 / (max(self.nx, self.ny) - 1)

    def dirichlet_mask(self, edges=EDGES):
        unknown = set(edges) - set(EDGES)
        if unknown:
            raise MeshError(f"未知边界: {', '.join(sorted(unknown))}")
        return np.logical_or.reduce([self.edge_masks[e] for e in edges])

    def prolongation(self):
        """把几何节点上的值扩展到全部节点 (复制节点取对应几何节点的值)"""
        n = self.n_nodes
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.grid_index)), shape=(n, self.n_grid))

    def centroids(self):
        return self.nodes[self.elements].mean(axis=1)

    def areas(self):
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def grid_values(self, nodal):
        """取几何节点上的值 (裂缝处取下侧)"""
        return np.asarray(nodal)[:self.n_grid]

    def export(self, directory):
        """写出 nodes.csv (id, x, y, boundary) 和 elements.csv (n0, n1, n2)"""
        os.makedirs(directory, exist_ok=True)
        nodes = pd.DataFrame({"id": np.arange(self.n_nodes), "x": self.nodes[:, 0],
                              "y": self.nodes[:, 1], "boundary": self.boundary.astype(int)})
        elements = pd.DataFrame(self.elements, columns=["n0", "n1", "n2"])
        nodes_path = os.path.join(directory, "nodes.csv")
        elements_path = os.path.join(directory, "elements.csv")
        nodes.to_csv(nodes_path, index=False, float_format="%.17g")
        elements.to_csv(elements_path, index=False)
        return nodes_path, elements_path

    def __repr__(self):
        return f"StructuredMesh(nx={self.nx}, ny={self.ny}, slit={self.slit}, nodes={self.n_nodes})"


def element_values(mesh, field):
    """
    把系数/源项转换为每个三角形上的值

    参数:
        field: 常数, 形如 f(points) 的函数 (在重心处求值), 或者长度为单元数的数组
    """
    if callable(field):
        values = np.asarray(field(mesh.centroids()), dtype=np.float64).reshape(-1)
    elif np.ndim(field) == 0:
        values = np.full(len(mesh.elements), float(field))
    else:
        values = np.asarray(field, dtype=np.float64).reshape(-1)
    if values.shape != (len(mesh.elements),):
        raise ShapeError(f"单元值长度 {values.shape} 与单元数 {len(mesh.elements)} 不一致")
    return values


def element_values_from_nodal(mesh, nodal, transform=None):
    """节点值先在三个顶点上取平均, 再可选地做变换 (如 exp)"""
    nodal = np.asarray(nodal, dtype=np.float64).reshape(-1)
    if nodal.shape != (mesh.n_nodes,):
        raise ShapeError(f"节点值长度 {nodal.shape[0]} 与节点数 {mesh.n_nodes} 不一致")
    values = nodal[mesh.elements].mean(axis=1)
    return transform(values) if transform is not None else values


@dataclass
class DiscreteResidualOperator:
    """
    组装好的离散残差 r(y) = A P y - F

    A 是 Dirichlet 行替换为单位行后的刚度矩阵, F 是对应的载荷向量,
    P 把配点 (几何节点) 上的值扩展到全部节点

    带裂缝时 m = n + 裂缝复制节点数. 复制节点经 P 取下侧几何节点的值, 所以任何配点场
    在裂缝两侧连续, 参考解在裂缝处有跳跃时残差不能降到零; 误差只在几何节点 (下侧) 上比较
    """

    mesh: StructuredMesh
    stiffness: sp.csr_matrix
    system: sp.csr_matrix
    load: np.ndarray
    dirichlet: np.ndarray
    prolongation: sp.csr_matrix

    @property
    def m(self):
        """残差分量个数"""
        return self.system.shape[0]

    @property
    def n(self):
        """配点个数"""
        return self.prolongation.shape[1]

    @property
    def collocation_points(self):
        return self.mesh.points

    def residual(self, y):
        return self.system @ (self.prolongation @ y) - self.load

    def solve(self):
        """直接稀疏求解, 返回全部节点上的解"""
        solution = spsolve(self.system.tocsc(), self.load)
        if not np.all(np.isfinite(solution)):
            raise MeshError("有限元求解失败: 解中含 NaN/Inf")
        return np.asarray(solution)

    def reduced_stiffness(self):
        """消去 Dirichlet 节点后的刚度矩阵"""
        free = np.flatnonzero(~self.dirichlet)
        return self.stiffness[free][:, free]


def assemble(mesh, coefficient=1.0, source=0.0, dirichlet_edges=EDGES, boundary_value=0.0):
    """
    P1 刚度和载荷组装, 系数和源项在三角形重心处取值

    参数:
        mesh: StructuredMesh
        coefficient: a(x), 必须为正
        source: f(x)
        dirichlet_edges: 施加 Dirichlet 条件的边, 其余边界为自然边界 (零通量)
        boundary_value: Dirichlet 值

    返回:
        DiscreteResidualOperator
    """
    a = element_values(mesh, coefficient)
    f = element_values(mesh, source)
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise MeshError("系数 a 必须为正且有限")
    p = mesh.nodes[mesh.elements]
    x, y = p[:, :, 0], p[:, :, 1]
    area = 0.5 * np.abs((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                        - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    if np.any(area < MIN_TRIANGLE_AREA):
        raise MeshError(f"存在退化三角形 (最小面积 {area.min():.3e})")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
    local *= (a / (4.0 * area))[:, None, None]

    n = mesh.n_nodes
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    stiffness = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    load = np.bincount(mesh.elements.ravel(), weights=np.repeat(f * area / 3.0, 3), minlength=n)

    dirichlet = mesh.dirichlet_mask(dirichlet_edges)
    keep = sp.diags((~dirichlet).astype(np.float64))
    system = (keep @ stiffness + sp.diags(dirichlet.astype(np.float64))).tocsr()
    load = np.where(dirichlet, boundary_value, load)
    logger.debug("组装完成: %d 节点, %d 单元", n, len(mesh.elements))
    return DiscreteResidualOperator(mesh, stiffness, system, load, dirichlet, mesh.prolongation())


def physics_loss(op, y):
    """
    离散物理损失 sum_i r_i^2 及其对配点值 y 的梯度 2 P^T A^T r

    参数:
        op: DiscreteResidualOperator
        y: 配点上的网络输出, 长度 n
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (op.n,):
        raise ShapeError(f"y 长度 {y.shape[0]} 与配点数 {op.n} 不一致")
    r = op.residual(y)
    grad = 2.0 * (op.prolongation.T @ (op.system.T @ r))
    return float(r @ r), np.asarray(grad).reshape(-1)


def interpolate(mesh, nodal, points):
    """
    P1 插值: 在任意点上求节点值定义的分片线性函数

    恰好落在裂缝上的点取上侧单元
    """
    nodal = np.asarray(nodal, dtype=np.float64).reshape(-1)
    if nodal.shape != (mesh.n_nodes,):
        raise ShapeError(f"节点值长度 {nodal.shape[0]} 与节点数 {mesh.n_nodes} 不一致")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    sx = np.clip(points[:, 0], 0.0, 1.0) * (mesh.nx - 1)
    sy = np.clip(points[:, 1], 0.0, 1.0) * (mesh.ny - 1)
    i = np.minimum(np.floor(sx).astype(np.int64), mesh.nx - 2)
    j = np.minimum(np.floor(sy).astype(np.int64), mesh.ny - 2)
    s, t = sx - i, sy - j
    cell = j * (mesh.nx - 1) + i
    lower = s >= t
    tri = mesh.elements[2 * cell + np.where(lower, 0, 1)]
    # 下三角 (n00, n10, n11), 上三角 (n00, n11, n01)
    w = np.where(lower[:, None],
                 np.column_stack([1.0 - s, s - t, t]),
                 np.column_stack([1.0 - t, s, t - s]))
    return np.sum(w * nodal[tri], axis=1)


def relative_l2(pred, ref):
    """节点相对 L2 误差 ||pred - ref|| / ||ref||"""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if pred.shape != ref.shape:
        raise ShapeError(f"长度不一致: {pred.shape} vs {ref.shape}")
    norm = np.linalg.norm(ref)
    if norm == 0:
        return float(np.linalg.norm(pred))
    return float(np.linalg.norm(pred - ref) / norm)


def solution_frame(points, values):
    """(x, y, value) 表, 用于导出解场"""
    points = np.asarray(points, dtype=np.float64)
    return pd.DataFrame({"x": points[:, 0], "y": points[:, 1],
                         "value": np.asarray(values, dtype=np.float64).reshape(-1)})
