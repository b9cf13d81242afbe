"""
数据集读取测试 (使用临时生成的 Boston CSV 和 IDX 文件)
"""

import gzip
import struct

import numpy as np
import pytest

from datasets import (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, load_boston, load_mnist,
                      load_mnist_test, one_hot, read_idx, resolve_path, split_indices)
from errors import DatasetError


def write_boston(path, rows=506, header=False, columns=14, sep=","):
    data = np.random.default_rng(0).normal(size=(rows, columns))
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(sep.join(f"c{k}" for k in range(columns)) + "\n")
        for row in data:
            f.write(sep.join(repr(float(v)) for v in row) + "\n")
    return data


def write_idx(path, magic, array, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">II", magic, array.shape[0])
    header += b"".join(struct.pack(">I", d) for d in array.shape[1:])
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def test_split_indices():
    train, test = split_indices(506, 0, 0.7)
    assert (len(train), len(test)) == (354, 152)
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(506))
    again, _ = split_indices(506, 0, 0.7)
    np.testing.assert_array_equal(train, again)
    with pytest.raises(ValueError):
        split_indices(10, 0, 1.0)


def test_load_boston(tmp_path):
    path = tmp_path / "housing.csv"
    raw = write_boston(path)
    split = load_boston(str(path), seed=0)
    assert split.X_train.shape == (354, 13) and split.X_val.shape == (152, 13)
    assert split.C_train.shape == (354, 1)
    np.testing.assert_allclose(split.X_train.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(split.X_train.std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(split.C_train[:, 0], raw[split.train_index, -1])
    assert len(split) == 506


def test_load_boston_whitespace_and_header(tmp_path):
    path = tmp_path / "housing.data"
    write_boston(path, rows=20, header=True, sep="  ")
    split = load_boston(str(path))
    assert len(split) == 20


def test_load_boston_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_boston(str(tmp_path / "missing.csv"))
    wrong = tmp_path / "wrong.csv"
    write_boston(wrong, rows=10, columns=12)
    with pytest.raises(DatasetError):
        load_boston(str(wrong))
    bad = tmp_path / "bad.csv"
    write_boston(bad, rows=10)
    text = bad.read_text(encoding="utf-8").splitlines()
    cells = text[4].split(",")
    cells[2] = "abc"
    text[4] = ",".join(cells)
    bad.write_text("\n".join(text) + "\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="第 5 行"):
        load_boston(str(bad))


def test_resolve_path_uses_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERWISE_DATA_DIR", str(tmp_path))
    assert resolve_path("housing.csv") == str(tmp_path / "housing.csv")
    monkeypatch.delenv("LAYERWISE_DATA_DIR")
    assert resolve_path("housing.csv") == "housing.csv"


def test_read_idx(tmp_path):
    images = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    write_idx(tmp_path / "img.idx", IDX_IMAGE_MAGIC, images)
    np.testing.assert_array_equal(read_idx(str(tmp_path / "img.idx"), IDX_IMAGE_MAGIC), images)
    write_idx(tmp_path / "lab.idx.gz", IDX_LABEL_MAGIC, [3, 7], compress=True)
    np.testing.assert_array_equal(read_idx(str(tmp_path / "lab.idx.gz"), IDX_LABEL_MAGIC), [3, 7])


def test_read_idx_errors(tmp_path):
    write_idx(tmp_path / "lab.idx", IDX_LABEL_MAGIC, [1, 2, 3])
    with pytest.raises(DatasetError, match="magic"):
        read_idx(str(tmp_path / "lab.idx"), IDX_IMAGE_MAGIC)
    raw = (tmp_path / "lab.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-1])
    with pytest.raises(DatasetError, match="截断"):
        read_idx(str(tmp_path / "short.idx"), IDX_LABEL_MAGIC)
    (tmp_path / "tiny.idx").write_bytes(b"\x00\x00")
    with pytest.raises(DatasetError):
        read_idx(str(tmp_path / "tiny.idx"), IDX_LABEL_MAGIC)
    with pytest.raises(DatasetError):
        read_idx(str(tmp_path / "missing.idx"), IDX_LABEL_MAGIC)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([0, 2], classes=3), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(DatasetError):
        one_hot([10])


def test_load_mnist(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(20, 4, 4))
    labels = rng.integers(0, 10, size=20)
    write_idx(tmp_path / "img.idx", IDX_IMAGE_MAGIC, images)
    write_idx(tmp_path / "lab.idx", IDX_LABEL_MAGIC, labels)
    split = load_mnist(str(tmp_path / "img.idx"), str(tmp_path / "lab.idx"), seed=0)
    assert split.X_train.shape == (16, 16) and split.X_val.shape == (4, 16)
    assert split.X_train.min() >= 0.0 and split.X_train.max() <= 1.0
    np.testing.assert_array_equal(np.argmax(split.C_train, axis=1), labels[split.train_index])
    X, C = load_mnist_test(str(tmp_path / "img.idx"), str(tmp_path / "lab.idx"))
    np.testing.assert_allclose(X[0], images[0].ravel() / 255.0)
    assert C.shape == (20, 10)

    write_idx(tmp_path / "lab5.idx", IDX_LABEL_MAGIC, labels[:5])
    with pytest.raises(DatasetError):
        load_mnist(str(tmp_path / "img.idx"), str(tmp_path / "lab5.idx"))
