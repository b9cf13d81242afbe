"""
命令行测试
"""

import os

import numpy as np
import pandas as pd
import pytest
from dotenv import dotenv_values

from dotenv_file import create_dotenv_file
from inverse_task import load_inverse_data
from main import EXIT_CONFIG, EXIT_ERROR, EXIT_OK, build_parser, main
from resnet import GrowableResNet, save_checkpoint


def test_fem_reference_command(tmp_path, capsys):
    out = str(tmp_path / "fem")
    assert main(["fem-reference", "b", out, "--n", "7"]) == EXIT_OK
    solution = pd.read_csv(os.path.join(out, "solution.csv"))
    assert list(solution.columns) == ["x", "y", "value"] and len(solution) == 49
    assert os.path.exists(os.path.join(out, "nodes.csv"))
    assert "solution.csv" in capsys.readouterr().out


def test_gen_inverse_data_and_probe(tmp_path):
    data_dir = str(tmp_path / "inverse")
    assert main(["gen-inverse-data", data_dir, "--seed", "2", "--n-train", "4"]) == EXIT_OK
    data = load_inverse_data(data_dir)
    assert len(data.train) == 4 and len(data.test) == 500

    net = GrowableResNet.initialize(np.random.default_rng(0), 10, 6, 12)
    checkpoint = save_checkpoint(net, str(tmp_path / "model.npz"))
    out = str(tmp_path / "deltas.csv")
    code = main(["probe-stability", checkpoint, data_dir, "--points", "3", "--count", "50",
                 "--out", out])
    assert code == EXIT_OK
    deltas = pd.read_csv(out)
    assert len(deltas) == 3 and np.all(deltas["delta"] >= 0)

    curve_out = str(tmp_path / "curve.csv")
    code = main(["probe-stability", checkpoint, data_dir, "--points", "3", "--count", "50",
                 "--radii", "0.2", "0.05", "0.1", "--out", curve_out])
    assert code == EXIT_OK
    curves = pd.read_csv(curve_out)
    assert list(curves.columns) == ["index", "eps=0.2", "eps=0.05", "eps=0.1"]
    assert np.all(curves["eps=0.05"] <= curves["eps=0.1"])
    assert np.all(curves["eps=0.1"] <= curves["eps=0.2"])


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[problem]\nproblem = I\ncolour = red\n", encoding="utf-8")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_missing_checkpoint_exit_code(tmp_path):
    assert main(["probe-stability", str(tmp_path / "none.npz"), str(tmp_path)]) == EXIT_ERROR


def test_parser_rejects_unknown_mode():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "config.ini", "--mode", "fast"])
    args = build_parser().parse_args(["-vv", "run", "config.ini", "--seed", "4"])
    assert args.verbose == 2 and args.seed == 4


def test_dotenv_template(tmp_path):
    path = create_dotenv_file(str(tmp_path))
    values = dotenv_values(path)
    assert values["LAYERWISE_LOG_LEVEL"] == "WARNING"
    assert values["LAYERWISE_RUN_SLOW"] == "0"
    # 已存在时不覆盖
    with open(path, "a", encoding="utf-8") as f:
        f.write("EXTRA=1\n")
    assert create_dotenv_file(str(tmp_path)) == path
    assert dotenv_values(path)["EXTRA"] == "1"
