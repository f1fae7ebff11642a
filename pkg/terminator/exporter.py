import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: PathLike, payload: Dict[str, Any]) -> str:
    out = _prepare(path)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return str(out)


def write_csv(path: PathLike, fields: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
    out = _prepare(path)
    with out.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({field: row.get(field, "") for field in fields})
    return str(out)


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def channel_sum_map(x: np.ndarray) -> np.ndarray:
    """Sum a [1, C, H, W] or [1, C, L] map over channels into a 2D image.

    1D maps of perfect-square length are folded row-major into a square,
    anything else becomes a single row.
    """
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"expected [1, C, L] or [1, C, H, W], got shape {x.shape}")
    summed = x[0].sum(axis=0)
    if summed.ndim == 1:
        side = int(round(np.sqrt(summed.size)))
        return summed.reshape(side, side) if side * side == summed.size else summed[None, :]
    return summed


def to_gray(image: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant image maps to 0 everywhere."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> str:
    """Binary (P5) PGM of a 2D array after min-max scaling."""
    gray = to_gray(image)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2D image, got shape {gray.shape}")
    out = _prepare(path)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    out.write_bytes(header + gray.tobytes())
    return str(out)


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
