"""Artifact writers: PGM grids, float blobs, reports and training logs."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REPORT_FIELDS = ("run_id", "mode", "w_s", "template", "prompt", "alignment", "fidelity")
LOG_FIELDS = ("step", "t", "l_sub", "l_sude_raw", "tau_t", "gate", "l_reg", "total")


def to_gray8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 (clipped)."""
    v = (np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.round(v).astype(np.uint8)


def tile(images: Sequence[np.ndarray], cols: int | None = None, pad: int = 1,
         fill: float = -1.0) -> np.ndarray:
    imgs = [np.asarray(im, dtype=np.float64).reshape(16, 16) if np.size(im) == 256
            else np.asarray(im, dtype=np.float64) for im in images]
    if not imgs:
        raise ValueError("nothing to tile")
    h, w = imgs[0].shape
    cols = cols or len(imgs)
    rows = -(-len(imgs) // cols)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = im
    return grid


def write_pgm(path: str | Path, image: np.ndarray, comment: str = "") -> Path:
    """Binary P5 graymap, 8-bit; ``comment`` lands in a header comment line."""
    g = to_gray8(image)
    if g.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    head = b"P5\n"
    if comment:
        head += b"# " + comment.replace("\n", " ").encode() + b"\n"
    head += f"{g.shape[1]} {g.shape[0]}\n255\n".encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(head + g.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    w, h, _ = fields
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def write_f32(path: str | Path, images) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(images, dtype="<f4").tofile(path)
    return path


def read_f32(path: str | Path, shape=(-1, 16, 16)) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float64).reshape(shape)


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def write_csv(path: str | Path, rows: Iterable[dict], fields: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path
