"""On-disk formats: TSR tensors, PPM images, NDJSON manifests.

TSR layout: magic ``TSR1``, u8 dtype tag (0 = float64), u8 rank, then
rank little-endian u32 dims followed by the row-major little-endian payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import IoError

MAGIC = b"TSR1"
DTYPE_F64 = 0


def tsr_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<BB", DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.astype("<f8").tobytes()


def tsr_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise IoError("not a TSR blob (bad magic)")
    dtype_tag, rank = struct.unpack_from("<BB", blob, 4)
    if dtype_tag != DTYPE_F64:
        raise IoError(f"unsupported TSR dtype tag {dtype_tag}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    offset = 6 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise IoError(f"TSR payload length {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def write_tsr(path: os.PathLike | str, arr: np.ndarray) -> None:
    atomic_write_bytes(path, tsr_bytes(arr))


def read_tsr(path: os.PathLike | str) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return tsr_from_bytes(blob)


def write_ppm(path: os.PathLike | str, image: np.ndarray) -> None:
    """8-bit binary PPM from a (3,H,W) image with values in [0,1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise IoError(f"PPM export expects (3,H,W), got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    payload = quantized.transpose(1, 2, 0).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def read_ppm(path: os.PathLike | str) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise IoError("unsupported PPM layout")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def atomic_write_bytes(path: os.PathLike | str, blob: bytes) -> None:
    """Write via temp file + rename so readers never see partial content."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def atomic_write_text(path: os.PathLike | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: os.PathLike | str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: os.PathLike | str):
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read JSON {path}: {e}") from e


def write_ndjson(path: os.PathLike | str, records: Iterable[dict]) -> None:
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, lines)


def read_ndjson(path: os.PathLike | str) -> Iterator[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"cannot read NDJSON {path}: {e}") from e


def write_csv(path: os.PathLike | str, header: list[str], rows: Iterable[list]) -> None:
    def fmt(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
