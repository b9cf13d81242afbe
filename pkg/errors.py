#!/usr/bin/env python
"""
逐层训练框架的异常类型
所有模块抛出的错误都继承自 LayerwiseError, 命令行根据类型决定退出码
"""


class LayerwiseError(Exception):
    """框架内所有错误的基类"""


class ShapeError(LayerwiseError, ValueError):
    """矩阵维度或向量长度不匹配"""


class NonFiniteInputError(LayerwiseError, ValueError):
    """训练输入中包含 NaN 或 Inf"""


class ActivationError(LayerwiseError):
    """激活函数不满足 LTP 条件 (h(0)=0 且 h'(0)!=0)"""


class StaleTapeError(LayerwiseError):
    """前向记录已过期: 网络在 forward 之后被修改过"""


class TrainingDivergedError(LayerwiseError):
    """损失出现 NaN/Inf, 训练中止"""

    def __init__(self, message, stage=None, epoch=None, losses=None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.losses = dict(losses or {})

    def diagnostic(self):
        """生成便于打印的诊断信息"""
        parts = [str(self)]
        if self.stage is not None:
            parts.append(f"stage={self.stage}")
        if self.epoch is not None:
            parts.append(f"epoch={self.epoch}")
        for key, value in self.losses.items():
            parts.append(f"{key}={value!r}")
        return ", ".join(parts)


class ConfigError(LayerwiseError):
    """实验配置缺失或非法"""


class DatasetError(LayerwiseError):
    """数据文件格式错误 (魔数错误, 文件截断, 列数不对等)"""


class MeshError(LayerwiseError):
    """网格退化或有限元求解失败"""


class CheckpointError(LayerwiseError):
    """检查点文件无法读取或版本不兼容"""
