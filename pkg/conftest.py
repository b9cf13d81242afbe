"""
测试公共设置
慢测试 (完整实验) 默认跳过, 设置 LAYERWISE_RUN_SLOW=1 时运行
"""

import os

import numpy as np
import pytest

from numeric_core import make_rng
from resnet import GrowableResNet


def pytest_collection_modifyitems(config, items):
    if os.environ.get("LAYERWISE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="慢测试, 设置 LAYERWISE_RUN_SLOW=1 运行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return make_rng(1234)


# make_rng(2024).random(16) 的逐位结果 (float.hex), 任何平台上都必须一致
PHILOX_GOLDEN_2024 = (
    "0x1.151b8ed2dc358p-2", "0x1.3ceb684415a27p-1", "0x1.3d25ecf32bb8p-5", "0x1.61a859d199431p-1",
    "0x1.4b66bc68e4d41p-1", "0x1.ac05200c01fbp-2", "0x1.0d729362eb523p-1", "0x1.8f9d5393a268dp-1",
    "0x1.295a108a8d58p-5", "0x1.d596b0b691074p-3", "0x1.93ebb9e3f9df6p-1", "0x1.43ea43c4f9297p-1",
    "0x1.388f53945cf4cp-1", "0x1.783def79db5cep-1", "0x1.d8928f4dfa591p-1", "0x1.32e5690e49b52p-1",
)


@pytest.fixture
def philox_golden():
    return np.array([float.fromhex(h) for h in PHILOX_GOLDEN_2024])


@pytest.fixture
def small_net(rng):
    """S=3, o=6, O=2, 两个残差隐藏层, 参数全部非零"""
    net = GrowableResNet.initialize(rng, 3, 6, 2, hidden_layers=2, activation="tanh")
    return net


@pytest.fixture
def toy_regression(rng):
    """y = sin(x1) + x2^2 / 2 的小回归问题"""
    X = rng.uniform(-1.0, 1.0, size=(64, 2))
    C = (np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2).reshape(-1, 1)
    return X, C


def data_file(name):
    """LAYERWISE_DATA_DIR 下的数据文件路径, 不存在时返回 None"""
    root = os.environ.get("LAYERWISE_DATA_DIR", "data")
    path = os.path.join(root, name)
    return path if os.path.exists(path) else None
