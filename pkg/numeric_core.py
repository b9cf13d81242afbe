#!/usr/bin/env python
"""
数值核心模块
提供矩阵检查, 可复现随机数, 激活函数 (含 LTP 判定), Glorot 初始化和 Adam 优化器
上层的网络, 正则项和训练器都只依赖这里的基本操作
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from errors import NonFiniteInputError, ShapeError

logger = logging.getLogger(__name__)

# Adam 默认常数
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# ELU 形状参数固定为 1
ELU_ALPHA = 1.0


def as_matrix(data, name="matrix", check_finite=True):
    """
    把输入转换为二维 float64 矩阵

    参数:
        data: 任意可转换为数组的对象; 一维输入视为单列
        name: 出错时使用的名字
        check_finite: 为 True 时拒绝 NaN/Inf

    返回:
        np.ndarray, 形状 (rows, cols)
    """
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)
    if matrix.ndim != 2:
        raise ShapeError(f"{name} 必须是二维矩阵, 实际维度 {matrix.ndim}")
    if check_finite and not np.all(np.isfinite(matrix)):
        raise NonFiniteInputError(f"{name} 含有 NaN 或 Inf")
    return matrix


def matmul(a, b):
    """矩阵乘积, 维度不匹配时抛出 ShapeError"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul 只接受二维矩阵")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul 维度不匹配: {a.shape} x {b.shape}")
    return a @ b


def make_rng(seed, *stream):
    """
    创建基于计数器的随机数生成器 (Philox)

    同一 (seed, stream) 在任何平台上产生同一序列; 不同 stream 标签得到互不相关的子序列,
    并行评估时各自持有独立的生成器
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# 激活函数
# ---------------------------------------------------------------------------

def elu(x):
    """ELU: x>=0 时为 x, 否则 exp(x)-1"""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def elu_prime(x):
    """ELU 导数: x>=0 时为 1, 否则 exp(x)"""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _tanh_prime(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_prime(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _relu_prime(x):
    return np.where(np.asarray(x) > 0.0, 1.0, 0.0)


def _identity(x):
    return np.asarray(x, dtype=np.float64)


def _identity_prime(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


def softmax(z):
    """按行 softmax"""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Activation:
    """激活函数: 数值映射和 (逐元素) 导数映射; softmax 没有逐元素导数"""

    kind: str
    value: Callable
    derivative: Optional[Callable] = None

    def __call__(self, z):
        return self.value(z)

    def backprop(self, z, out, grad):
        """
        把对输出的梯度传回到激活前

        参数:
            z: 激活前的值
            out: 激活后的值 (softmax 需要)
            grad: 对 out 的梯度
        """
        if self.derivative is None:
            # softmax 的雅可比-向量积
            inner = np.sum(grad * out, axis=-1, keepdims=True)
            return out * (grad - inner)
        return grad * self.derivative(z)


ACTIVATIONS: Dict[str, Activation] = {
    "elu": Activation("elu", elu, elu_prime),
    "tanh": Activation("tanh", np.tanh, _tanh_prime),
    "sigmoid": Activation("sigmoid", _sigmoid, _sigmoid_prime),
    "relu": Activation("relu", _relu, _relu_prime),
    "identity": Activation("identity", _identity, _identity_prime),
    "softmax": Activation("softmax", softmax, None),
}


def get_activation(kind):
    """按名字取激活函数"""
    if isinstance(kind, Activation):
        return kind
    try:
        return ACTIVATIONS[str(kind).lower()]
    except KeyError:
        raise ValueError(f"未知激活函数: {kind} (可选: {', '.join(ACTIVATIONS)})")


def ltp_check(activation):
    """
    判断激活函数是否具有逐层训练促进 (LTP) 性质: h(0)=0 且 h'(0)!=0

    没有标量导数的激活 (softmax) 一律返回 False
    """
    act = get_activation(activation)
    if act.derivative is None:
        return False
    zero = np.zeros(1)
    value = float(act.value(zero)[0])
    slope = float(act.derivative(zero)[0])
    return value == 0.0 and abs(slope) > 0.0


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    """均匀 Glorot 初始化: U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))"""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """单个参数张量的 Adam 状态"""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    decay: float = 1.0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params, learning_rate=0.001, decay=1.0):
        params = np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(params), np.zeros_like(params),
                   learning_rate=learning_rate, decay=decay)

    def learning_rate_at(self, epoch):
        """第 epoch 轮的学习率 l_r * d_l^epoch"""
        return self.learning_rate * self.decay ** epoch


def adam_step(state, params, grads, epoch=0):
    """
    执行一步 Adam 更新 (带偏差修正)

    参数:
        state: AdamState, 原地更新矩估计和步数
        params: 当前参数
        grads: 梯度, 形状必须与 params 一致
        epoch: 当前轮次, 决定衰减后的学习率

    返回:
        更新后的参数 (新数组)
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(f"Adam 形状不匹配: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    lr = state.learning_rate_at(epoch)
    denom = np.sqrt(state.v / bc2) + state.epsilon
    return params - (lr / bc1) * state.m / denom


@dataclass
class AdamOptimizer:
    """按参数名管理多个 AdamState, 每个训练阶段新建一个"""

    learning_rate: float = 0.001
    decay: float = 1.0
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, params, grads, epoch=0):
        """原地更新 params 字典中出现在 grads 里的条目"""
        for name, grad in grads.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(params[name], self.learning_rate, self.decay)
            params[name][...] = adam_step(self.states[name], params[name], grad, epoch)

    def reset(self):
        self.states.clear()
