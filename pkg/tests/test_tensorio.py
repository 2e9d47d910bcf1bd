import struct
from pathlib import Path

import numpy as np
import pytest

from kwscascade import tensorio
from kwscascade.exceptions import FormatError


def test_matrix_layout(tmp_path: Path) -> None:
    path = tmp_path / "x.kwsp"
    tensorio.write_matrix(path, tensorio.POSTERIOR_MAGIC, np.array([[0.25, 0.75], [1.0, 0.0]]))
    raw = path.read_bytes()
    assert raw[:16] == struct.pack("<4sIII", b"KWSP", 1, 2, 2)
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [0.25, 0.75, 1.0, 0.0]


def test_matrix_wrong_magic(tmp_path: Path) -> None:
    path = tmp_path / "x.kwse"
    tensorio.write_matrix(path, tensorio.EMBEDDING_MAGIC, np.zeros((1, 2)))
    with pytest.raises(FormatError, match="magic"):
        tensorio.read_matrix(path, tensorio.POSTERIOR_MAGIC)


def test_matrix_truncated_and_trailing(tmp_path: Path) -> None:
    path = tmp_path / "x.kwsp"
    tensorio.write_matrix(path, tensorio.POSTERIOR_MAGIC, np.ones((2, 3)) / 3)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="Truncated"):
        tensorio.read_matrix(path, tensorio.POSTERIOR_MAGIC)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="Trailing"):
        tensorio.read_matrix(path, tensorio.POSTERIOR_MAGIC)


def test_bad_version(tmp_path: Path) -> None:
    path = tmp_path / "x.kwsp"
    path.write_bytes(struct.pack("<4sIII", b"KWSP", 7, 0, 3))
    with pytest.raises(FormatError, match="version"):
        tensorio.read_matrix(path, tensorio.POSTERIOR_MAGIC)


def test_csv_matrix(tmp_path: Path) -> None:
    path = tmp_path / "x.csv"
    values = np.array([[0.1, 0.9], [1 / 3, 2 / 3]])
    tensorio.write_matrix_csv(path, values)
    assert path.read_text().splitlines()[0] == "2,2"
    np.testing.assert_array_equal(tensorio.read_matrix_csv(path), values)
    assert tensorio.is_csv(path) and not tensorio.is_csv(tmp_path / "x.kwsp")


@pytest.mark.parametrize(
    "text,message",
    [
        ("2;2\n1,0\n0,1\n", "line 1"),
        ("2,2\n1,0\n", "declares 2 rows"),
        ("1,2\n1,0,0\n", "line 2"),
        ("1,2\n1,x\n", "non-numeric"),
    ],
)
def test_csv_matrix_errors(tmp_path: Path, text: str, message: str) -> None:
    path = tmp_path / "x.csv"
    path.write_text(text)
    with pytest.raises(FormatError, match=message):
        tensorio.read_matrix_csv(path)


def test_named_tensors(tmp_path: Path) -> None:
    path = tmp_path / "w.kwsw"
    tensors = {"embed": np.arange(6.0).reshape(3, 2), "head.b": np.array([0.5]), "lora.x.scale": np.array(2.0)}
    tensorio.write_named(path, tensors)
    back = tensorio.read_named(path)
    assert list(back) == list(tensors)
    for name, value in tensors.items():
        assert back[name].shape == value.shape
        np.testing.assert_array_equal(back[name], value)


def test_named_duplicate_entry(tmp_path: Path) -> None:
    path = tmp_path / "w.kwsw"
    tensorio.write_named(path, {"a": np.zeros(2)})
    raw = path.read_bytes()
    header, entry = raw[:12], raw[12:]
    path.write_bytes(struct.pack("<4sII", b"KWSW", 1, 2) + entry + entry)
    assert header[:4] == b"KWSW"
    with pytest.raises(FormatError, match="Duplicate"):
        tensorio.read_named(path)
