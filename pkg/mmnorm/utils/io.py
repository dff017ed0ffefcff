"""
Atomic file output and content hashing
"""
import hashlib
import os
import tempfile
from pathlib import Path
from typing import Union

import pandas as pd

PathLike = Union[str, Path]

# 17 significant digits reproduce every float64 exactly
FLOAT_FORMAT = "%.17g"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temporary sibling, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, text)


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
