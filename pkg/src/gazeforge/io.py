"""File formats: GZT1 tensors, tensor containers, PGM/PPM images, CSV reports."""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"GZT1"
CONTAINER_FORMAT = "gazeforge-container/1"


class FormatError(ValueError):
    pass


def write_gzt(path, array) -> None:
    """Write ``array`` as GZT1: magic, rank byte, u64 LE extents, f64 LE row-major payload."""
    arr = np.array(array, dtype="<f8", order="C")  # ascontiguousarray would promote rank 0 to rank 1
    if arr.ndim > 255:
        raise FormatError("GZT1 supports rank <= 255")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_gzt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    rank = raw[4]
    shape = struct.unpack(f"<{rank}Q", raw[5:5 + 8 * rank])
    offset = 5 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def save_container(directory, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None,
                   flags: Optional[Mapping[str, bool]] = None) -> None:
    """One GZT1 file per named tensor plus ``manifest.json`` listing names, shapes and flags."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in tensors.items():
        fname = name.replace("/", "__") + ".gzt"
        arr = np.asarray(value, dtype=np.float64)
        write_gzt(directory / fname, arr)
        entry = {"name": name, "file": fname, "shape": list(arr.shape)}
        if flags is not None:
            entry["trainable"] = bool(flags[name])
        entries.append(entry)
    manifest = {"format": CONTAINER_FORMAT, "tensor_format": "GZT1", "tensors": entries, "meta": meta or {}}
    dump_json(directory / "manifest.json", manifest)


def load_container(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CONTAINER_FORMAT:
        raise FormatError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    tensors = {}
    for entry in manifest["tensors"]:
        arr = read_gzt(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"{entry['file']}: shape {arr.shape} disagrees with manifest {entry['shape']}")
        tensors[entry["name"]] = arr
    return tensors, manifest


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ netpbm

def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6), 8 or 16 bit. Returns raw integer samples.

    PGM gives (H, W); PPM gives (H, W, 3).
    """
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * channels
    samples = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.int64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return samples.reshape(shape)


def write_netpbm(path, samples: np.ndarray, maxval: int = 255, comment: Optional[str] = None) -> None:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        magic, (h, w) = b"P5", samples.shape
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic, (h, w) = b"P6", samples.shape[:2]
    else:
        raise FormatError(f"cannot write netpbm for array of shape {samples.shape}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + b"\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode("ascii") + b"\n"
    header += f"{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.clip(samples, 0, maxval).astype(dtype).tobytes())


def save_image(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as 8-bit PPM (values clipped)."""
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.int64).transpose(1, 2, 0)
    write_netpbm(path, rgb, 255)


def load_image(path) -> np.ndarray:
    raw = read_netpbm(path)
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a colour PPM")
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    write_netpbm(path, np.where(np.asarray(mask) > 0.5, 255, 0), 255)


def load_mask(path) -> np.ndarray:
    """8-bit PGM masks map to [0, 1]; ``.gzt`` files are read as soft masks."""
    if str(path).endswith(".gzt"):
        arr = read_gzt(path)
        return arr.reshape(arr.shape[-2:])
    raw = read_netpbm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a greyscale PGM")
    return raw.astype(np.float64) / 255.0


def save_density_pgm(path, density: np.ndarray) -> None:
    """16-bit PGM preview scaled by the maximum. Lossy; GZT1 is the exact format."""
    d = np.asarray(density, dtype=np.float64)
    peak = d.max()
    scaled = np.round(d / peak * 65535.0) if peak > 0 else np.zeros_like(d)
    write_netpbm(path, scaled.astype(np.int64), 65535,
                 comment=f"gazeforge density preview: values scaled by max={peak!r}; lossy, use GZT1 for exact values")


# --------------------------------------------------------------------- csv

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def read_csv_dicts(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def env_threads(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("GAZEFORGE_THREADS", default)))
    except ValueError:
        return default
