#!/usr/bin/env python
"""
生成 .env 模板
main.py 启动时用 load_dotenv 读取其中的 LAYERWISE_* 设置
"""

import logging
import os

logger = logging.getLogger(__name__)

TEMPLATE = """# 逐层训练实验配置
# 数据文件 (boston.csv, MNIST IDX 文件) 所在目录, 配置中的相对路径相对于它解析
LAYERWISE_DATA_DIR=./data
# 日志级别: DEBUG / INFO / WARNING
LAYERWISE_LOG_LEVEL=WARNING
# 设为 1 时运行完整实验的长测试
LAYERWISE_RUN_SLOW=0
"""


def create_dotenv_file(directory=None):
    """创建 .env 模板 (如果不存在), 返回文件路径"""
    directory = directory or os.path.dirname(os.path.abspath(__file__))
    env_path = os.path.join(directory, ".env")
    if os.path.exists(env_path):
        logger.info(".env 文件已存在: %s", env_path)
        return env_path
    with open(env_path, "w", encoding="utf-8") as f:
        f.write(TEMPLATE)
    logger.info("已创建 .env 模板文件: %s", env_path)
    return env_path


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    print(create_dotenv_file())
