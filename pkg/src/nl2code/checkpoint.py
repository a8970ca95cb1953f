"""Checkpoints as a text manifest plus one little-endian float64 blob.

A checkpoint is a directory::

    manifest.txt   format, step, config, one line per array, blob size/digest
    arrays.bin     every array back to back, C order, '<f8'

Manifest array lines read ``array <name> <shape> <offset> <count>`` with the
shape written as ``3x4`` (``scalar`` for 0-d). Parameters come first, then the
Adam moments as ``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .optim import AdamState

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "arrays.bin"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(path, step: int, config: dict, params: dict[str, np.ndarray],
                    adam: AdamState) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = [(k, np.asarray(v)) for k, v in params.items()]
    arrays += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
    arrays += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    lines = [f"format_version {FORMAT_VERSION}", f"step {step}",
             f"adam {adam.step} {adam.beta1!r} {adam.beta2!r} {adam.eps!r}",
             "config " + json.dumps(config, sort_keys=True)]
    chunks = []
    offset = 0
    for name, a in arrays:
        if " " in name:
            raise CheckpointError(f"array name {name!r} contains a space")
        lines.append(f"array {name} {_shape_str(a.shape)} {offset} {a.size}")
        chunks.append(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())
        offset += a.size
    blob = b"".join(chunks)
    lines.append(f"blob {len(blob)} {hashlib.sha256(blob).hexdigest()}")
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath, bpath = path / MANIFEST, path / BLOB
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory")
    step = version = None
    config = None
    adam = AdamState()
    entries = []
    blob_len = digest = None
    for no, line in enumerate(mpath.read_text(encoding="utf-8").splitlines(), 1):
        key, _, rest = line.partition(" ")
        try:
            if key == "format_version":
                version = int(rest)
            elif key == "step":
                step = int(rest)
            elif key == "adam":
                s, b1, b2, eps = rest.split()
                adam = AdamState(step=int(s), beta1=float(b1), beta2=float(b2), eps=float(eps))
            elif key == "config":
                config = json.loads(rest)
            elif key == "array":
                name, shape, off, count = rest.split()
                entries.append((name, _parse_shape(shape), int(off), int(count)))
            elif key == "blob":
                n, digest = rest.split()
                blob_len = int(n)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise CheckpointError(f"{mpath}:{no}: {e}") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{mpath}: unsupported format_version {version}")
    if step is None or config is None or blob_len is None:
        raise CheckpointError(f"{mpath}: manifest is incomplete")
    blob = bpath.read_bytes()
    if len(blob) != blob_len:
        raise CheckpointError(f"{bpath}: {len(blob)} bytes, manifest says {blob_len}")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError(f"{bpath}: digest does not match the manifest")
    flat = np.frombuffer(blob, dtype=_DTYPE)
    params = {}
    expect = 0
    for name, shape, off, count in entries:
        if off != expect or int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{mpath}: array {name} has inconsistent offset or size")
        a = flat[off:off + count].astype(np.float64).reshape(shape)
        expect = off + count
        if name.startswith("adam.m."):
            adam.m[name[7:]] = a
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = a
        else:
            params[name] = a
    if expect * _DTYPE.itemsize != len(blob):
        raise CheckpointError(f"{mpath}: arrays do not cover the blob")
    return Checkpoint(step, config, params, adam)


def restore_params(target: dict, saved: dict[str, np.ndarray]) -> None:
    """Copy ``saved`` arrays into ``target`` tensors, checking names and shapes."""
    missing = set(target) - set(saved)
    extra = set(saved) - set(target)
    if missing or extra:
        raise CheckpointError(
            f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k, t in target.items():
        if t.data.shape != saved[k].shape:
            raise CheckpointError(
                f"parameter {k}: checkpoint shape {saved[k].shape}, model shape {t.data.shape}")
    for k, t in target.items():
        t.data = saved[k].copy()
