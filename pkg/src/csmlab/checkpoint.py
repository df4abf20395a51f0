"""Checkpoint files: a JSON header plus named little-endian f32 blobs.

Layout::

    b"CSMCKPT1"                magic
    uint64 little-endian       header length L
    L bytes                    UTF-8 JSON header (sorted keys)
    blobs                      concatenated, offsets relative to payload start

The header records ``version``, ``kind``, ``step``, ``model`` (the model
config), ``lineage`` (seeds, config hash, rng states) and a blob table with
name, shape, offset, byte length and CRC32. Optimizer moments are stored as
blobs named ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, CorruptBlobError, StrictLoadError
from .numerics.autodiff import Tensor
from .numerics.optim import AdamState

CKPT_VERSION = 1
MAGIC = b"CSMCKPT1"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    state: AdamState | None
    step: int
    kind: str
    model: dict
    lineage: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def tensors(self, names: Iterable[str] | None = None, dtype=np.float32) -> dict[str, Tensor]:
        keys = list(self.params) if names is None else list(names)
        return {k: Tensor(self.params[k].astype(dtype), requires_grad=True, name=k) for k in keys}


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray],
                    state: AdamState | None, step: int, kind: str, model: dict,
                    lineage: dict | None = None, extra: dict | None = None) -> None:
    blobs: list[tuple[str, np.ndarray]] = []
    for name, p in params.items():
        blobs.append((name, np.asarray(p.data if isinstance(p, Tensor) else p)))
    if state is not None:
        for name in params:
            blobs.append((f"adam.m/{name}", state.m[name]))
            blobs.append((f"adam.v/{name}", state.v[name]))

    table, chunks, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": CKPT_VERSION,
        "kind": kind,
        "step": int(step),
        "model": model,
        "lineage": lineage or {},
        "extra": extra or {},
        "adam_t": None if state is None else int(state.t),
        "blobs": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if blob[:8] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CorruptBlobError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise CorruptBlobError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptBlobError(f"{path}: unreadable header") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {header.get('version')}, "
                                     f"expected {CKPT_VERSION}")
    payload = memoryview(blob)[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        start, n = entry["offset"], entry["nbytes"]
        raw = bytes(payload[start:start + n])
        if len(raw) != n or zlib.crc32(raw) != entry["crc32"]:
            raise CorruptBlobError(f"{path}: blob {entry['name']} is corrupt")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)

    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    state = None
    if header.get("adam_t") is not None:
        state = AdamState(m={k: arrays[f"adam.m/{k}"] for k in params},
                          v={k: arrays[f"adam.v/{k}"] for k in params},
                          t=int(header["adam_t"]))
    return Checkpoint(params, state, int(header["step"]), header["kind"], header["model"],
                      header.get("lineage", {}), header.get("extra", {}))


def strict_names(ckpt: Checkpoint, expected: Iterable[str], what: str = "model") -> None:
    """Raise unless the checkpoint holds exactly ``expected`` parameter names."""
    expected = set(expected)
    have = set(ckpt.params)
    unknown, missing = sorted(have - expected), sorted(expected - have)
    if unknown or missing:
        raise StrictLoadError(
            f"checkpoint of kind {ckpt.kind!r} does not match {what}: "
            f"unknown={unknown[:5]}{'...' if len(unknown) > 5 else ''} "
            f"missing={missing[:5]}{'...' if len(missing) > 5 else ''}")
