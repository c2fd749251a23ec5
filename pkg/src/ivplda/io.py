"""On-disk formats shared by every pipeline stage.

IVMX matrix layout (all little-endian)::

    b"IVMX" | version u8 = 1 | dtype u8 = 1 (float32) | rows u32 | cols u32 | payload

The payload is ``rows * cols`` float32 values in row-major order.  Frame
archives (features, posteriors) are one IVMX matrix holding every utterance's
rows back to back plus an ``.idx.tsv`` index of (utt_id, first row, rows).  Model files
("records") are a 4-byte magic, a version byte, a u32 count of integer header
fields, those fields as u32, a u32 block count and then that many IVMX
matrices back to back.
"""

import csv
import hashlib
import os
import struct
import tempfile
import wave
from contextlib import contextmanager

import numpy as np

from .errors import DataError

IVMX_MAGIC = b"IVMX"
IVMX_VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sBBII")


@contextmanager
def atomic_open(path, mode="wb"):
    """Write to a temporary sibling and rename over ``path`` on success."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ivmx_bytes(matrix):
    a = np.asarray(matrix, dtype="<f4")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DataError(f"IVMX holds 2-D matrices, got shape {a.shape}")
    rows, cols = a.shape
    return _HEADER.pack(IVMX_MAGIC, IVMX_VERSION, DTYPE_FLOAT32, rows, cols) + np.ascontiguousarray(a).tobytes()


def parse_ivmx(buf, offset=0):
    """Decode one IVMX matrix from ``buf`` at ``offset``; returns (matrix, new_offset)."""
    if len(buf) - offset < _HEADER.size:
        raise DataError("truncated IVMX header")
    magic, version, dtype, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != IVMX_MAGIC:
        raise DataError(f"bad IVMX magic {magic!r}")
    if version != IVMX_VERSION or dtype != DTYPE_FLOAT32:
        raise DataError(f"unsupported IVMX version/dtype {version}/{dtype}")
    start = offset + _HEADER.size
    end = start + 4 * rows * cols
    if end > len(buf):
        raise DataError("truncated IVMX payload")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start).reshape(rows, cols)
    return data.astype(np.float64), end


def write_ivmx(path, matrix):
    with atomic_open(path) as fh:
        fh.write(ivmx_bytes(matrix))


def read_ivmx(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    matrix, end = parse_ivmx(buf)
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after IVMX payload")
    return matrix


def write_record(path, magic, ints, blocks):
    if len(magic) != 4:
        raise ValueError("record magic must be 4 bytes")
    parts = [magic, struct.pack("<BI", 1, len(ints)), struct.pack(f"<{len(ints)}I", *ints)]
    parts.append(struct.pack("<I", len(blocks)))
    parts.extend(ivmx_bytes(b) for b in blocks)
    with atomic_open(path) as fh:
        fh.write(b"".join(parts))


def read_record(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != magic:
        raise DataError(f"{path}: expected {magic!r} record, found {buf[:4]!r}")
    version, n_ints = struct.unpack_from("<BI", buf, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported record version {version}")
    off = 9
    ints = struct.unpack_from(f"<{n_ints}I", buf, off)
    off += 4 * n_ints
    (n_blocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = []
    for _ in range(n_blocks):
        block, off = parse_ivmx(buf, off)
        blocks.append(block)
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes in record")
    return list(ints), blocks


def write_archive(path, items):
    """Store ``(utt_id, matrix)`` pairs as one IVMX file plus ``path + '.idx.tsv'``."""
    items = list(items)
    if not items:
        raise DataError("cannot write an empty archive")
    dims = {np.shape(m)[1] for _, m in items}
    if len(dims) != 1:
        raise DataError(f"archive matrices have different widths: {sorted(dims)}")
    index, start = [], 0
    for utt, m in items:
        index.append((utt, start, len(m)))
        start += len(m)
    write_ivmx(path, np.vstack([np.asarray(m) for _, m in items]))
    write_tsv(str(path) + ".idx.tsv", index)


def read_archive(path):
    """Inverse of :func:`write_archive`: list of (utt_id, float64 matrix)."""
    data = read_ivmx(path)
    out = []
    for utt, start, rows in read_tsv(str(path) + ".idx.tsv", ncols=3):
        start, rows = int(start), int(rows)
        if start + rows > data.shape[0]:
            raise DataError(f"{path}: index entry {utt!r} runs past the data")
        out.append((utt, data[start:start + rows]))
    return out


# ---------------------------------------------------------------------------
# TSV helpers
# ---------------------------------------------------------------------------

def read_tsv(path, ncols=None):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if ncols is not None:
                if len(row) > ncols:
                    raise DataError(f"{path}:{lineno}: expected at most {ncols} columns")
                row = row + [""] * (ncols - len(row))
            rows.append(row)
    return rows


def write_tsv(path, rows):
    with atomic_open(path, "w") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def read_wav(path):
    """Read a 16-bit PCM mono WAV; returns (samples in [-1, 1), sample_rate)."""
    try:
        with wave.open(os.fspath(path), "rb") as w:
            if w.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with atomic_open(path) as fh:
        with wave.open(fh, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(pcm.tobytes())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
