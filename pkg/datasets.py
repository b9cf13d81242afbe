#!/usr/bin/env python
"""
数据集读取
Boston 房价 (本地 CSV, 70-30 划分, 按训练集标准化) 和 MNIST (IDX 文件, 80-20 划分)
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from errors import DatasetError
from numeric_core import make_rng

logger = logging.getLogger(__name__)

BOSTON_COLUMNS = 14
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MNIST_CLASSES = 10

# 划分用的随机流编号
SPLIT_STREAM = 1


@dataclass
class SplitData:
    """划分好的数据; val 对 Boston 是测试集, 对 MNIST 是验证集"""

    X_train: np.ndarray
    C_train: np.ndarray
    X_val: np.ndarray
    C_val: np.ndarray
    scaler: Optional[StandardScaler] = None
    train_index: Optional[np.ndarray] = None
    val_index: Optional[np.ndarray] = None

    @property
    def val(self):
        return self.X_val, self.C_val

    def __len__(self):
        return len(self.X_train) + len(self.X_val)


def resolve_path(path):
    """相对路径相对于 LAYERWISE_DATA_DIR 解析 (若已设置)"""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get("LAYERWISE_DATA_DIR")
    if root:
        return os.path.join(root, path)
    return path


def split_indices(n, seed, train_fraction):
    """按种子打乱后取前 floor(n * fraction) 个作训练集"""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction 必须在 (0, 1) 之间")
    order = make_rng(seed, SPLIT_STREAM).permutation(n)
    n_train = int(np.floor(n * train_fraction))
    return order[:n_train], order[n_train:]


def load_boston(path, seed=0, train_fraction=0.7):
    """
    读取 Boston 房价 CSV: 13 个特征列加 1 个目标列, 逗号或空白分隔, 可带表头

    返回:
        SplitData; 特征用训练集的均值和标准差标准化, 目标保持原值
    """
    path = resolve_path(path)
    try:
        frame = pd.read_csv(path, sep=r"[,\s]+", header=None, engine="python", skipinitialspace=True)
    except FileNotFoundError:
        raise DatasetError(f"找不到 Boston 数据文件: {path}")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"无法解析 Boston 数据文件 {path}: {e}")
    frame = frame.dropna(axis=1, how="all")
    if frame.shape[1] != BOSTON_COLUMNS:
        raise DatasetError(f"Boston 数据应有 {BOSTON_COLUMNS} 列, 实际 {frame.shape[1]} 列")
    values = frame.apply(pd.to_numeric, errors="coerce")
    if values.iloc[0].isna().all():
        values = values.iloc[1:]
    if values.isna().to_numpy().any():
        bad = int(np.flatnonzero(values.isna().any(axis=1).to_numpy())[0])
        raise DatasetError(f"Boston 数据第 {bad + 1} 行格式错误")
    data = values.to_numpy(dtype=np.float64)
    train, test = split_indices(len(data), seed, train_fraction)
    scaler = StandardScaler().fit(data[train, :-1])
    logger.info("Boston: %d 训练 / %d 测试", len(train), len(test))
    return SplitData(scaler.transform(data[train, :-1]), data[train, -1:],
                     scaler.transform(data[test, :-1]), data[test, -1:], scaler, train, test)


def _read_bytes(path):
    path = resolve_path(path)
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as handle:
            return handle.read()
    except FileNotFoundError:
        raise DatasetError(f"找不到 IDX 文件: {path}")
    except OSError as e:
        raise DatasetError(f"无法读取 IDX 文件 {path}: {e}")


def read_idx(path, expected_magic):
    """读取大端 IDX 文件, 返回 uint8 数组 (图像为 (N, rows, cols), 标签为 (N,))"""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DatasetError(f"IDX 文件 {path} 过短")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DatasetError(f"IDX 文件 {path} 的 magic 为 {magic:#010x}, 应为 {expected_magic:#010x}")
    dims = magic & 0xFF
    header = 4 + 4 * dims
    if len(raw) < header:
        raise DatasetError(f"IDX 文件 {path} 头部被截断")
    shape = (count,) + struct.unpack(">" + "I" * (dims - 1), raw[8:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise DatasetError(f"IDX 文件 {path} 被截断: 需要 {size} 字节, 只有 {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def one_hot(labels, classes=MNIST_CLASSES):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DatasetError(f"标签超出 0..{classes - 1}")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def load_mnist(images_path, labels_path, seed=0, train_fraction=0.8):
    """
    读取 MNIST IDX 文件 (可为 .gz), 像素缩放到 [0,1], 图像展平为 784 维, 标签 one-hot

    返回:
        SplitData (训练 / 验证)
    """
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise DatasetError(f"图像数 {len(images)} 与标签数 {len(labels)} 不一致")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    C = one_hot(labels)
    train, val = split_indices(len(X), seed, train_fraction)
    logger.info("MNIST: %d 训练 / %d 验证", len(train), len(val))
    return SplitData(X[train], C[train], X[val], C[val], None, train, val)


def load_mnist_test(images_path, labels_path):
    """MNIST 测试集, 不做划分"""
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise DatasetError(f"图像数 {len(images)} 与标签数 {len(labels)} 不一致")
    return images.reshape(len(images), -1).astype(np.float64) / 255.0, one_hot(labels)
