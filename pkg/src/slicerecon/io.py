"""File formats: PGM rasters, stack directories, field and volume files.

Slices are binary PGM (P5) files, 8-bit for masks and 16-bit (big-endian,
as the PGM format requires) for images. A stack directory carries a
``stack.json`` sidecar listing the files in order. Displacement fields and
volumes are raw little-endian payloads with a JSON header sidecar.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .types import DisplacementField, Image2D, Mask2D, SliceStack, Volume3D

STACK_SIDECAR = "stack.json"

_PGM_HEADER = re.compile(rb"^P5\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def read_pgm(path) -> Tuple[np.ndarray, int]:
    """Return the raw integer raster and its maxval."""
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise OSError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise OSError(f"{path}: unsupported maxval {maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    payload = raw[m.end():]
    expected = width * height * np.dtype(dtype).itemsize
    if len(payload) < expected:
        raise OSError(f"{path}: truncated pixel data")
    data = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return data.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path, data: np.ndarray, maxval: int) -> None:
    data = np.asarray(data)
    h, w = data.shape
    dtype = ">u1" if maxval < 256 else ">u2"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(dtype).tobytes())


def save_raster(path, raster, bits: int = 16) -> None:
    if isinstance(raster, Mask2D):
        write_pgm(path, raster.data.astype(np.uint8) * 255, 255)
        return
    maxval = 65535 if bits == 16 else 255
    q = np.rint(raster.data.astype(np.float64) * maxval)
    write_pgm(path, q, maxval)


def load_image(path, spacing=(1.0, 1.0)) -> Image2D:
    data, maxval = read_pgm(path)
    return Image2D(data.astype(np.float32) / np.float32(maxval), spacing)


def load_mask(path, spacing=(1.0, 1.0)) -> Mask2D:
    data, _ = read_pgm(path)
    return Mask2D(data > 0, spacing)


def save_stack(directory, stack: SliceStack, prefix: str = "slice", extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, sl in enumerate(stack):
        name = f"{prefix}_{i:03d}.pgm"
        save_raster(directory / name, sl)
        files.append(name)
    meta = {
        "kind": "mask" if stack.is_mask else "image",
        "files": files,
        "slice_thickness": stack.slice_thickness,
        "spacing": list(stack.spacing),
        "scale": stack.scale,
    }
    if extra:
        meta.update(extra)
    write_json(directory / STACK_SIDECAR, meta)
    return directory


def load_stack(directory) -> SliceStack:
    directory = Path(directory)
    meta = read_json(directory / STACK_SIDECAR)
    spacing = tuple(meta.get("spacing", (1.0, 1.0)))
    loader = load_mask if meta.get("kind", "mask") == "mask" else load_image
    slices = [loader(directory / f, spacing) for f in meta["files"]]
    return SliceStack(tuple(slices), float(meta["slice_thickness"]), meta.get("scale"))


def save_field(path_stem, phi: DisplacementField) -> None:
    """Write ``<stem>.raw`` (planes u then v, float32 LE) and ``<stem>.json``."""
    stem = Path(path_stem)
    payload = np.stack([phi.u, phi.v]).astype("<f4")
    stem.with_suffix(".raw").write_bytes(payload.tobytes())
    write_json(stem.with_suffix(".json"),
               {"width": phi.width, "height": phi.height, "planes": ["u", "v"], "dtype": "float32-le"})


def load_field(path_stem) -> DisplacementField:
    stem = Path(path_stem)
    header = read_json(stem.with_suffix(".json"))
    w, h = header["width"], header["height"]
    arr = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4").reshape(2, h, w)
    return DisplacementField(arr[0], arr[1])


def save_volume(path_stem, vol: Volume3D) -> None:
    """Flat uint8 payload in (z, y, x) order plus a JSON header."""
    stem = Path(path_stem)
    stem.with_suffix(".raw").write_bytes(vol.data.astype(np.uint8).tobytes())
    nx, ny, nz = vol.dims
    write_json(stem.with_suffix(".json"),
               {"dims": [nx, ny, nz], "order": "zyx", "spacing": list(vol.spacing), "dtype": "uint8"})


def load_volume(path_stem) -> Volume3D:
    stem = Path(path_stem)
    header = read_json(stem.with_suffix(".json"))
    nx, ny, nz = header["dims"]
    arr = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype=np.uint8).reshape(nz, ny, nx)
    return Volume3D(arr, tuple(header["spacing"]))


def _default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)!r}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=True)


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(obj) + "\n")
    os.replace(tmp, path)


def read_json(path):
    return json.loads(Path(path).read_text())
