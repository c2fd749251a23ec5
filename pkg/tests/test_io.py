import struct

import numpy as np
import pytest

from ivplda.errors import DataError
from ivplda.io import (ivmx_bytes, parse_ivmx, read_archive, read_ivmx, read_record, read_tsv, read_wav,
                       write_archive, write_ivmx, write_record, write_tsv, write_wav)


def test_ivmx_layout_is_bit_exact():
    m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    buf = ivmx_bytes(m)
    assert buf[:4] == b"IVMX"
    assert buf[4] == 1 and buf[5] == 1
    assert struct.unpack("<II", buf[6:14]) == (2, 3)
    assert len(buf) == 14 + 4 * 6
    assert buf[14:] == np.arange(1, 7, dtype="<f4").tobytes()


def test_ivmx_roundtrip(tmp_path, rng):
    m = rng.standard_normal((5, 7)).astype(np.float32)
    write_ivmx(tmp_path / "a.ivmx", m)
    np.testing.assert_array_equal(read_ivmx(tmp_path / "a.ivmx"), m)


def test_ivmx_rejects_bad_input(tmp_path):
    good = ivmx_bytes(np.ones((2, 2)))
    with pytest.raises(DataError, match="magic"):
        parse_ivmx(b"XXXX" + good[4:])
    with pytest.raises(DataError, match="truncated"):
        parse_ivmx(good[:-1])
    (tmp_path / "t.ivmx").write_bytes(good + b"\0")
    with pytest.raises(DataError, match="trailing"):
        read_ivmx(tmp_path / "t.ivmx")
    with pytest.raises(DataError, match="version"):
        parse_ivmx(good[:4] + b"\x02" + good[5:])


def test_record_roundtrip(tmp_path):
    write_record(tmp_path / "r.bin", b"TEST", [3, 4], [np.ones((1, 3)), np.zeros((2, 2))])
    ints, blocks = read_record(tmp_path / "r.bin", b"TEST")
    assert ints == [3, 4]
    assert [b.shape for b in blocks] == [(1, 3), (2, 2)]
    with pytest.raises(DataError):
        read_record(tmp_path / "r.bin", b"NOPE")


def test_archive_roundtrip(tmp_path, rng):
    items = [("a", rng.standard_normal((3, 4))), ("b", rng.standard_normal((1, 4)))]
    write_archive(tmp_path / "x.ivmx", items)
    back = read_archive(tmp_path / "x.ivmx")
    assert [u for u, _ in back] == ["a", "b"]
    for (_, m1), (_, m2) in zip(items, back):
        np.testing.assert_allclose(m1, m2, rtol=1e-6)
    with pytest.raises(DataError):
        write_archive(tmp_path / "y.ivmx", [("a", np.ones((2, 2))), ("b", np.ones((2, 3)))])


def test_tsv_and_atomicity(tmp_path):
    write_tsv(tmp_path / "t.tsv", [("a", 1), ("b", "")])
    assert read_tsv(tmp_path / "t.tsv", ncols=3) == [["a", "1", ""], ["b", "", ""]]
    assert [p.name for p in tmp_path.iterdir()] == ["t.tsv"]
    with pytest.raises(DataError):
        read_tsv(tmp_path / "t.tsv", ncols=1)


def test_wav_roundtrip(tmp_path):
    x = 0.5 * np.sin(np.arange(800) / 10.0)
    write_wav(tmp_path / "a.wav", x, 8000)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 8000
    np.testing.assert_allclose(y, x, atol=1e-4)
    (tmp_path / "bad.wav").write_bytes(b"not a wav file")
    with pytest.raises(DataError):
        read_wav(tmp_path / "bad.wav")
