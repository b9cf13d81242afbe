#!/usr/bin/env python
"""
可生长的全连接残差网络
前向传播, 反向传播 (伴随形式), 零初始化加层, 冻结, 阈值剪枝, 截断和检查点读写
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass
from typing import List

import numpy as np

from errors import ActivationError, CheckpointError, ShapeError, StaleTapeError
from numeric_core import Activation, as_matrix, get_activation, glorot_uniform, ltp_check

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class HiddenLayer:
    """一个隐藏层: Y_next = Y + h(Y W + b) (skip=True) 或 h(Y W + b) (skip=False)"""

    W: np.ndarray
    b: np.ndarray
    activation: Activation
    frozen: bool = False
    skip: bool = True

    @property
    def width(self):
        return self.W.shape[1]

    def param_count(self):
        return self.W.size + self.b.size


@dataclass
class ForwardTape:
    """一个 mini-batch 的前向记录, 供 backward 使用"""

    X: np.ndarray
    input_pre: np.ndarray
    Y: List[np.ndarray]
    pre: List[np.ndarray]
    act: List[np.ndarray]
    head_pre: np.ndarray
    output: np.ndarray
    version: int

    def hidden_output(self, l):
        """Y^(l), l 从 1 开始计数"""
        return self.Y[l - 1]


class GrowableResNet:
    """
    可生长残差网络

    Y^(1) = h_in(X U + u)
    Y^(l+1) = Y^(l) + h(Y^(l) W^(l+1) + b^(l+1))
    Y^(L+1) = h_pred(Y^(L) W_pred + b_pred)
    """

    def __init__(self, U, u, W_pred, b_pred, hidden=None, head_activation="identity",
                 input_activation="identity"):
        self.U = as_matrix(U, "U")
        self.u = np.asarray(u, dtype=np.float64).reshape(-1).copy()
        self.W_pred = as_matrix(W_pred, "W_pred")
        self.b_pred = np.asarray(b_pred, dtype=np.float64).reshape(-1).copy()
        self.hidden: List[HiddenLayer] = list(hidden or [])
        self.head_activation = get_activation(head_activation)
        self.input_activation = get_activation(input_activation)
        self.input_frozen = False
        self.head_frozen = False
        self.version = 0
        self._check_shapes()

    # ------------------------------------------------------------------
    # 构造
    # ------------------------------------------------------------------
    @classmethod
    def initialize(cls, rng, n_inputs, width, n_outputs, hidden_layers=1, activation="elu",
                   head_activation="identity", input_activation="identity", skip=True):
        """
        用 Glorot 均匀分布初始化一个网络

        参数:
            rng: 随机数生成器
            n_inputs: 输入特征数 S
            width: 隐藏宽度 o
            n_outputs: 输出数 O
            hidden_layers: 残差隐藏层数 (L-1)
            activation: 隐藏层激活
            head_activation: 输出层激活
            input_activation: Y^(1) 上的激活 (默认恒等, 即仿射映射)
            skip: 隐藏层是否带恒等捷径
        """
        act = get_activation(activation)
        U = glorot_uniform(rng, n_inputs, width)
        u = glorot_uniform(rng, n_inputs, width, shape=(width,))
        hidden = []
        for _ in range(hidden_layers):
            W = glorot_uniform(rng, width, width)
            b = glorot_uniform(rng, width, width, shape=(width,))
            hidden.append(HiddenLayer(W, b, act, skip=skip))
        W_pred = glorot_uniform(rng, width, n_outputs)
        b_pred = glorot_uniform(rng, width, n_outputs, shape=(n_outputs,))
        return cls(U, u, W_pred, b_pred, hidden, head_activation, input_activation)

    def _check_shapes(self):
        o = self.U.shape[1]
        if self.u.shape != (o,):
            raise ShapeError(f"u 长度应为 {o}")
        for k, layer in enumerate(self.hidden):
            if layer.W.shape != (o, o) or layer.b.shape != (o,):
                raise ShapeError(f"隐藏层 {k + 2} 形状应为 ({o},{o})")
        if self.W_pred.shape[0] != o or self.b_pred.shape != (self.W_pred.shape[1],):
            raise ShapeError("输出层形状与隐藏宽度不一致")

    # ------------------------------------------------------------------
    # 属性
    # ------------------------------------------------------------------
    @property
    def n_inputs(self):
        return self.U.shape[0]

    @property
    def width(self):
        return self.U.shape[1]

    @property
    def n_outputs(self):
        return self.W_pred.shape[1]

    @property
    def depth(self):
        """L: 最后一个隐藏输出 Y^(L) 的编号"""
        return len(self.hidden) + 1

    def mark_modified(self):
        """参数被原地修改后调用, 使旧的 ForwardTape 失效"""
        self.version += 1

    def parameters(self):
        """按名字返回所有参数 (引用, 非拷贝)"""
        params = {"U": self.U, "u": self.u}
        for k, layer in enumerate(self.hidden):
            params[f"W{k + 2}"] = layer.W
            params[f"b{k + 2}"] = layer.b
        params["W_pred"] = self.W_pred
        params["b_pred"] = self.b_pred
        return params

    def layer_names(self, l):
        """第 l 层 (论文编号) 的参数名; l=1 表示输入映射"""
        if l == 1:
            return ("U", "u")
        if 2 <= l <= self.depth:
            return (f"W{l}", f"b{l}")
        raise IndexError(f"层编号 {l} 超出范围 1..{self.depth}")

    def trainable_names(self):
        names = []
        if not self.input_frozen:
            names += ["U", "u"]
        for k, layer in enumerate(self.hidden):
            if not layer.frozen:
                names += [f"W{k + 2}", f"b{k + 2}"]
        if not self.head_frozen:
            names += ["W_pred", "b_pred"]
        return names

    def param_count(self):
        return sum(p.size for p in self.parameters().values())

    def trainable_count(self):
        params = self.parameters()
        return sum(params[name].size for name in self.trainable_names())

    def frozen_count(self):
        return self.param_count() - self.trainable_count()

    def snapshot(self, names=None):
        """拷贝指定参数 (默认全部)"""
        params = self.parameters()
        names = params.keys() if names is None else names
        return {name: params[name].copy() for name in names}

    def restore(self, snapshot):
        params = self.parameters()
        for name, value in snapshot.items():
            params[name][...] = value
        self.mark_modified()

    def freeze_all(self):
        self.input_frozen = True
        self.head_frozen = True
        for layer in self.hidden:
            layer.frozen = True

    def copy(self):
        return copy.deepcopy(self)

    def predict(self, X):
        return forward(self, X).output

    def __repr__(self):
        return (f"GrowableResNet(S={self.n_inputs}, o={self.width}, O={self.n_outputs}, "
                f"L={self.depth}, params={self.param_count()})")


# ----------------------------------------------------------------------
# 前向 / 反向
# ----------------------------------------------------------------------

def forward(net, X):
    """
    前向传播, 记录每层激活前后的值

    参数:
        net: GrowableResNet
        X: 输入矩阵 (M x S)

    返回:
        ForwardTape
    """
    X = as_matrix(X, "X")
    if X.shape[1] != net.n_inputs:
        raise ShapeError(f"输入宽度 {X.shape[1]} 与网络输入 {net.n_inputs} 不一致")
    input_pre = X @ net.U + net.u
    Y = [net.input_activation(input_pre)]
    pre, act = [], []
    for layer in net.hidden:
        z = Y[-1] @ layer.W + layer.b
        a = layer.activation(z)
        pre.append(z)
        act.append(a)
        Y.append(Y[-1] + a if layer.skip else a)
    head_pre = Y[-1] @ net.W_pred + net.b_pred
    output = net.head_activation(head_pre)
    return ForwardTape(X, input_pre, Y, pre, act, head_pre, output, net.version)


def _lowest_trainable_level(net):
    """需要回传到的最低层编号; 0 表示输入映射, None 表示只有输出层或没有可训练参数"""
    if not net.input_frozen:
        return 0
    for k, layer in enumerate(net.hidden):
        if not layer.frozen:
            return k + 1
    return None


def backward(net, tape, d_output=None, d_logits=None, hidden_grads=None):
    """
    反向传播, 只为未冻结参数返回梯度

    参数:
        net: 与 tape 对应的网络
        tape: forward 的记录
        d_output: 损失对 Y^(L+1) 的梯度
        d_logits: 损失对输出层激活前的梯度 (给定时忽略 d_output)
        hidden_grads: {l: 损失对 Y^(l) 的额外梯度}, 如流形正则项

    返回:
        dict: 参数名 -> 梯度
    """
    if tape.version != net.version:
        raise StaleTapeError("网络在 forward 之后被修改, 请重新前向传播")
    hidden_grads = hidden_grads or {}
    if d_logits is None:
        if d_output is None:
            raise ValueError("d_output 和 d_logits 至少给出一个")
        d_output = np.asarray(d_output, dtype=np.float64)
        if d_output.shape != tape.output.shape:
            raise ShapeError(f"输出梯度形状 {d_output.shape} 与输出 {tape.output.shape} 不一致")
        d_logits = net.head_activation.backprop(tape.head_pre, tape.output, d_output)
    grads = {}
    y_top = tape.Y[-1]
    if not net.head_frozen:
        grads["W_pred"] = y_top.T @ d_logits
        grads["b_pred"] = d_logits.sum(axis=0)

    lowest = _lowest_trainable_level(net)
    if lowest is None:
        return grads

    # 伴随变量: 损失对 Y^(L) 的梯度 (lambda^1)
    dY = d_logits @ net.W_pred.T
    top = net.depth
    if top in hidden_grads:
        dY = dY + hidden_grads[top]
    stop_at = 0 if lowest == 0 else lowest - 1
    for k in range(len(net.hidden) - 1, stop_at - 1, -1):
        layer = net.hidden[k]
        dZ = layer.activation.backprop(tape.pre[k], tape.act[k], dY)
        if not layer.frozen:
            grads[f"W{k + 2}"] = tape.Y[k].T @ dZ
            grads[f"b{k + 2}"] = dZ.sum(axis=0)
        if k == stop_at and lowest != 0:
            # 更低的层都已冻结
            break
        dY = (dY if layer.skip else 0.0) + dZ @ layer.W.T
        if (k + 1) in hidden_grads:
            dY = dY + hidden_grads[k + 1]
    if lowest == 0:
        d_in = net.input_activation.backprop(tape.input_pre, tape.Y[0], dY)
        grads["U"] = tape.X.T @ d_in
        grads["u"] = d_in.sum(axis=0)
    return grads


# ----------------------------------------------------------------------
# 结构操作
# ----------------------------------------------------------------------

def grow_layer(net, activation=None, skip=True, init="zeros", rng=None):
    """
    在顶端增加一个隐藏层并冻结之前的所有隐藏层和输入映射

    参数:
        net: 已训练的网络 (原地修改)
        activation: 新层激活, 默认沿用最后一层的激活 (没有时用 elu)
        skip: 是否带恒等捷径; 带捷径时要求激活满足 LTP
        init: "zeros" (输出保持) 或 "glorot" (forward-thinking 模式)
        rng: init="glorot" 时需要

    返回:
        同一个 net
    """
    if activation is None:
        activation = net.hidden[-1].activation if net.hidden else "elu"
    act = get_activation(activation)
    if skip and init == "zeros" and not ltp_check(act):
        raise ActivationError(f"激活 {act.kind} 不满足 LTP 性质, 零初始化的新层无法训练")
    o = net.width
    if init == "zeros":
        W = np.zeros((o, o))
        b = np.zeros(o)
    elif init == "glorot":
        if rng is None:
            raise ValueError("glorot 初始化需要 rng")
        W = glorot_uniform(rng, o, o)
        b = glorot_uniform(rng, o, o, shape=(o,))
    else:
        raise ValueError(f"未知初始化方式: {init}")
    net.input_frozen = True
    for layer in net.hidden:
        layer.frozen = True
    net.hidden.append(HiddenLayer(W, b, act, frozen=False, skip=skip))
    net.head_frozen = False
    net.mark_modified()
    logger.debug("加层完成: L=%d, 可训练参数 %d", net.depth, net.trainable_count())
    return net


def threshold(net, rho, layer=None):
    """
    把指定层中绝对值小于 rho 的权重和偏置置为 0

    参数:
        net: 网络 (原地修改)
        rho: 阈值, >= 0
        layer: 论文编号 (1 为输入映射), 默认最后一个隐藏层
    """
    if rho < 0:
        raise ValueError("阈值 rho 必须非负")
    if rho == 0:
        return net
    l = net.depth if layer is None else layer
    params = net.parameters()
    for name in net.layer_names(l):
        p = params[name]
        p[np.abs(p) < rho] = 0.0
    net.mark_modified()
    return net


def active_fraction(net, layer):
    """第 layer 层 (论文编号) 非零参数所占比例"""
    params = net.parameters()
    names = net.layer_names(layer)
    total = sum(params[n].size for n in names)
    nonzero = sum(int(np.count_nonzero(params[n])) for n in names)
    return nonzero / total


def prune_tail(net, keep):
    """保留前 keep 个隐藏层, 删除其余尾部隐藏层, 输出层不变"""
    if keep < 1:
        raise ValueError("keep 必须 >= 1")
    if keep > len(net.hidden):
        raise ValueError(f"keep={keep} 超过当前隐藏层数 {len(net.hidden)}")
    del net.hidden[keep:]
    net.mark_modified()
    return net


# ----------------------------------------------------------------------
# 检查点
# ----------------------------------------------------------------------

def save_checkpoint(net, path, extras=None):
    """
    把网络保存为 .npz 文件, 可附带额外数组 (如输入标准化参数)

    返回:
        写入的路径
    """
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION]),
        "U": net.U, "u": net.u, "W_pred": net.W_pred, "b_pred": net.b_pred,
        "hidden_activations": np.array([layer.activation.kind for layer in net.hidden], dtype="<U16"),
        "hidden_frozen": np.array([layer.frozen for layer in net.hidden], dtype=bool),
        "hidden_skip": np.array([layer.skip for layer in net.hidden], dtype=bool),
        "flags": np.array([net.input_frozen, net.head_frozen], dtype=bool),
        "activations": np.array([net.head_activation.kind, net.input_activation.kind], dtype="<U16"),
    }
    for k, layer in enumerate(net.hidden):
        arrays[f"W{k + 2}"] = layer.W
        arrays[f"b{k + 2}"] = layer.b
    for key, value in (extras or {}).items():
        arrays[f"extra__{key}"] = np.asarray(value)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_checkpoint(path):
    """
    读取 save_checkpoint 写出的文件

    返回:
        (GrowableResNet, extras 字典)
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"无法读取检查点 {path}: {e}")
    version = int(arrays.get("format_version", np.array([-1]))[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"检查点版本 {version} 不受支持")
    hidden = []
    for k, kind in enumerate(arrays["hidden_activations"]):
        hidden.append(HiddenLayer(arrays[f"W{k + 2}"].copy(), arrays[f"b{k + 2}"].copy(),
                                  get_activation(str(kind)),
                                  frozen=bool(arrays["hidden_frozen"][k]),
                                  skip=bool(arrays["hidden_skip"][k])))
    head_kind, input_kind = (str(s) for s in arrays["activations"])
    net = GrowableResNet(arrays["U"], arrays["u"], arrays["W_pred"], arrays["b_pred"], hidden,
                         head_activation=head_kind, input_activation=input_kind)
    net.input_frozen, net.head_frozen = (bool(f) for f in arrays["flags"])
    extras = {key[len("extra__"):]: value for key, value in arrays.items() if key.startswith("extra__")}
    return net, extras
