#!/usr/bin/env python
"""
命令行入口

    python main.py run configs/problem_I.ini --seed 1 --out results/I
    python main.py probe-stability results/IVb/model.npz data/inverse
    python main.py gen-inverse-data data/inverse --n-train 50
    python main.py fem-reference b results/fem_b
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from errors import ConfigError, LayerwiseError, TrainingDivergedError
from experiment_config import MODES, ExperimentConfig
from experiments import report, run_experiment, save_models
from inverse_task import (curve_dataset, generate_inverse_data, load_inverse_data,
                          probe_dataset, save_inverse_data, scaler_from_extras)
from physics_tasks import fem_reference
from resnet import load_checkpoint

logger = logging.getLogger("layerwise")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def cmd_run(args):
    config = ExperimentConfig.from_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if overrides:
        config = dataclasses.replace(config, **overrides)
    result = run_experiment(config)
    out = args.out or os.path.join("results", f"{config.problem}_{config.mode}_{config.seed}")
    report(result, out)
    save_models(result, out)
    config.to_file(os.path.join(out, "config.ini"))
    print(f"{result.metric_name} = {result.metric:.6g}")
    print(f"参数 (同时训练 / 总数): {result.params_trained_simultaneously} / {result.total_params}")
    print(f"结果已写入: {out}")
    return EXIT_OK


def cmd_probe_stability(args):
    net, extras = load_checkpoint(args.checkpoint)
    data = load_inverse_data(args.dataset)
    inputs = data.test.observations[:args.points] if args.points else data.test.observations
    if "scaler_mean" in extras:
        inputs = scaler_from_extras(extras).transform(inputs)
    if args.radii:
        curves = curve_dataset(net, inputs, args.radii, args.count, args.seed)
        for radius, column in zip(args.radii, curves.T):
            print(f"eps = {radius:g}: 平均 delta_k = {float(np.mean(column)):.6g}")
        if args.out:
            frame = pd.DataFrame(curves, columns=[f"eps={r:g}" for r in args.radii])
            frame.insert(0, "index", np.arange(len(curves)))
            frame.to_csv(args.out, index=False, float_format="%.17g")
            print(f"已写入: {args.out}")
        return EXIT_OK
    deltas = probe_dataset(net, inputs, args.count, args.eps, args.seed)
    frame = pd.DataFrame({"index": np.arange(len(deltas)), "delta": deltas})
    if args.out:
        frame.to_csv(args.out, index=False, float_format="%.17g")
        print(f"已写入: {args.out}")
    print(f"eps = {args.eps:g}: 平均 delta_k = {float(np.mean(deltas)):.6g}, "
          f"最大 {float(np.max(deltas)):.6g}")
    return EXIT_OK


def cmd_gen_inverse_data(args):
    data = generate_inverse_data(args.seed, args.n_train)
    save_inverse_data(data, args.out)
    print(f"反问题数据已写入: {args.out} ({len(data.train)} 训练 / {len(data.val)} 验证 / "
          f"{len(data.test)} 测试)")
    return EXIT_OK


def cmd_fem_reference(args):
    problem = fem_reference(args.case, args.n)
    os.makedirs(args.out, exist_ok=True)
    problem.mesh.export(args.out)
    path = os.path.join(args.out, "solution.csv")
    problem.reference_frame().to_csv(path, index=False, float_format="%.17g")
    print(f"参考解已写入: {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(description="逐层生长残差网络实验工具")
    parser.add_argument("--verbose", "-v", action="count", default=0,
                        help="输出更详细的日志 (-v 为 INFO, -vv 为 DEBUG)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="按配置文件运行一个实验")
    run.add_argument("config", help="INI 配置文件")
    run.add_argument("--seed", type=int, help="覆盖配置中的种子")
    run.add_argument("--mode", choices=MODES, help="覆盖配置中的模式")
    run.add_argument("--out", help="结果目录 (默认 results/<问题>_<模式>_<种子>)")
    run.set_defaults(func=cmd_run)

    probe = sub.add_parser("probe-stability", help="对反问题模型做 eps-delta 稳定性探针")
    probe.add_argument("checkpoint", help="模型检查点 (.npz)")
    probe.add_argument("dataset", help="gen-inverse-data 生成的数据目录")
    probe.add_argument("--eps", type=float, default=0.1, help="扰动半径 (默认 0.1)")
    probe.add_argument("--count", type=int, default=5000, help="每个点的采样数 (默认 5000)")
    probe.add_argument("--points", type=int, default=20, help="探针点数, 0 表示全部测试集")
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--radii", type=float, nargs="+",
                       help="一组扰动半径, 给出时输出每个半径上的平均 delta_k (关于半径不减)")
    probe.add_argument("--out", help="写出每个点 delta_k 的 CSV")
    probe.set_defaults(func=cmd_probe_stability)

    gen = sub.add_parser("gen-inverse-data", help="生成反问题数据集")
    gen.add_argument("out", help="输出目录")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-train", type=int, default=50, help="训练样本数 (默认 50)")
    gen.set_defaults(func=cmd_gen_inverse_data)

    ref = sub.add_parser("fem-reference", help="求解并导出有限元参考解")
    ref.add_argument("case", choices=["a", "b", "darcy", "prann-true", "prann-assumed"])
    ref.add_argument("out", help="输出目录")
    ref.add_argument("--n", type=int, default=31, help="每个方向的节点数 (默认 31)")
    ref.set_defaults(func=cmd_fem_reference)
    return parser


def configure_logging(verbose):
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = os.environ.get("LAYERWISE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("配置错误: %s", e)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logger.error("训练发散: %s", e.diagnostic())
        return EXIT_DIVERGED
    except LayerwiseError as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
