"""Multi-series volumes, 3D patch tokenization, and the on-disk formats.

Volume file layout (version 1)::

    b"CSMVOL1\\n"                 8-byte magic
    uint32 little-endian          byte length L of the JSON header
    L bytes                       UTF-8 JSON header
    s * D*H*W * 4 bytes           little-endian f32 payload, series-major,
                                  each series in C order (z, y, x)

Header keys: ``version``, ``extents`` [D, H, W], ``series_count``,
``series_names``, ``presence``, ``dtype`` ("<f4"), ``subject_id``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (ConfigurationError, ExtentMismatchError, MalformedHeaderError,
                     TruncatedPayloadError, UsageError)

FORMAT_VERSION = 1
MAGIC = b"CSMVOL1\n"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class MultiSeriesVolume:
    """``data`` has shape (series, D, H, W); absent series are all zeros."""

    data: np.ndarray
    presence: tuple[bool, ...]
    subject_id: str = ""
    series_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise UsageError(f"volume data must be (series, D, H, W), got {data.shape}")
        object.__setattr__(self, "data", data)
        presence = tuple(bool(p) for p in self.presence)
        if len(presence) != data.shape[0]:
            raise UsageError(f"{len(presence)} presence flags for {data.shape[0]} series")
        object.__setattr__(self, "presence", presence)
        if not self.series_names:
            object.__setattr__(self, "series_names",
                               tuple(f"series{j}" for j in range(data.shape[0])))
        elif len(self.series_names) != data.shape[0]:
            raise UsageError("series_names length must equal series count")

    @property
    def series_count(self) -> int:
        return self.data.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    @property
    def absent(self) -> tuple[int, ...]:
        return tuple(j for j, p in enumerate(self.presence) if not p)


@dataclass(frozen=True)
class TokenGrid:
    """``tokens`` has shape (series, N, p**3); row j is grid cell decode(j)."""

    tokens: np.ndarray
    grid_dims: tuple[int, int, int]
    patch_edge: int
    presence: tuple[bool, ...] = ()
    subject_id: str = ""

    @property
    def series_count(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class LabeledExample:
    volume: MultiSeriesVolume
    label: int | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if (self.label is None) == (self.mask is None):
            raise UsageError("exactly one of label / mask must be set")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != self.volume.extents:
                raise UsageError("mask extents differ from the volume")
            if not np.isin(m, (0, 1)).all():
                raise UsageError("mask labels must be binary")
            object.__setattr__(self, "mask", m.astype(np.uint8))
        elif self.label not in (0, 1):
            raise UsageError(f"class label must be 0 or 1, got {self.label}")

    @property
    def label_kind(self) -> str:
        return "class" if self.label is not None else "mask"


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


def grid_coord(index: int, grid_dims: Sequence[int]) -> tuple[int, int, int]:
    """Lexicographic (z, y, x) decode of a token row index."""
    gz, gy, gx = grid_dims
    if not 0 <= index < gz * gy * gx:
        raise UsageError(f"token index {index} outside grid {tuple(grid_dims)}")
    return index // (gy * gx), (index // gx) % gy, index % gx


def token_index(coord: Sequence[int], grid_dims: Sequence[int]) -> int:
    z, y, x = coord
    _, gy, gx = grid_dims
    return (z * gy + y) * gx + x


def patchify(volume: MultiSeriesVolume | np.ndarray, p: int) -> TokenGrid:
    if isinstance(volume, MultiSeriesVolume):
        data, presence, sid = volume.data, volume.presence, volume.subject_id
    else:
        data = np.asarray(volume)
        presence, sid = (True,) * data.shape[0], ""
    s, D, H, W = data.shape
    if p < 1 or D % p or H % p or W % p:
        raise ConfigurationError(f"extents {(D, H, W)} not divisible by patch edge {p}",
                                 field="model.patch_edge")
    gz, gy, gx = D // p, H // p, W // p
    t = data.reshape(s, gz, p, gy, p, gx, p).transpose(0, 1, 3, 5, 2, 4, 6)
    tokens = np.ascontiguousarray(t).reshape(s, gz * gy * gx, p ** 3)
    return TokenGrid(tokens, (gz, gy, gx), p, tuple(presence), sid)


def unpatchify_array(tokens: np.ndarray, grid_dims: Sequence[int], p: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    gz, gy, gx = grid_dims
    if tokens.ndim != 3 or tokens.shape[1] != gz * gy * gx or tokens.shape[2] != p ** 3:
        raise UsageError(f"token shape {tokens.shape} inconsistent with grid {tuple(grid_dims)}"
                         f" and patch edge {p}")
    s = tokens.shape[0]
    v = tokens.reshape(s, gz, gy, gx, p, p, p).transpose(0, 1, 4, 2, 5, 3, 6)
    return np.ascontiguousarray(v).reshape(s, gz * p, gy * p, gx * p)


def unpatchify(grid: TokenGrid) -> MultiSeriesVolume:
    data = unpatchify_array(grid.tokens, grid.grid_dims, grid.patch_edge)
    presence = grid.presence or (True,) * data.shape[0]
    return MultiSeriesVolume(data, presence, grid.subject_id)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def normalize_series(volume: MultiSeriesVolume, eps: float = 1e-8) -> MultiSeriesVolume:
    """Zero-mean, unit-variance per present series; absent series stay zero."""
    out = volume.data.astype(np.float32, copy=True)
    for j, present in enumerate(volume.presence):
        if not present:
            out[j] = 0.0
            continue
        x = out[j].astype(np.float64)
        sd = x.std()
        out[j] = ((x - x.mean()) / (sd if sd > eps else 1.0)).astype(np.float32)
    return replace(volume, data=out)


def drop_series(volume: MultiSeriesVolume, series: Sequence[int]) -> MultiSeriesVolume:
    """Mark ``series`` absent (and zero them)."""
    presence = list(volume.presence)
    data = volume.data.copy()
    for j in series:
        presence[j] = False
        data[j] = 0.0
    return replace(volume, data=data, presence=tuple(presence))


def flip_and_crop(volume: MultiSeriesVolume, rng: np.random.Generator,
                  crop: Sequence[int] | None = None, flip: bool = True,
                  mask: np.ndarray | None = None):
    """Random axis flips and a random-corner crop, identical for every series."""
    data = volume.data
    if flip:
        axes = tuple(a + 1 for a in range(3) if rng.random() < 0.5)
        if axes:
            data = np.flip(data, axis=axes)
            if mask is not None:
                mask = np.flip(mask, axis=tuple(a - 1 for a in axes))
    if crop is not None and tuple(crop) != volume.extents:
        starts = [int(rng.integers(0, e - c + 1)) for e, c in zip(volume.extents, crop)]
        sl = tuple(slice(s0, s0 + c) for s0, c in zip(starts, crop))
        data = data[(slice(None),) + sl]
        if mask is not None:
            mask = mask[sl]
    out = replace(volume, data=np.ascontiguousarray(data))
    return out if mask is None else (out, np.ascontiguousarray(mask))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def save_volume(volume: MultiSeriesVolume, path: str | Path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "extents": list(volume.extents),
        "series_count": volume.series_count,
        "series_names": list(volume.series_names),
        "presence": list(volume.presence),
        "dtype": "<f4",
        "subject_id": volume.subject_id,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    required = ("version", "extents", "series_count", "series_names", "presence", "dtype")
    missing = [k for k in required if k not in header]
    if missing:
        raise MalformedHeaderError(f"header missing keys {missing}")
    if header["version"] != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported volume format version {header['version']}")
    ext = header["extents"]
    s = header["series_count"]
    if (not isinstance(ext, list) or len(ext) != 3
            or not all(isinstance(e, int) and e > 0 for e in ext)):
        raise MalformedHeaderError(f"bad extents {ext!r}")
    if not isinstance(s, int) or s < 1:
        raise MalformedHeaderError(f"bad series_count {s!r}")
    if len(header["presence"]) != s or len(header["series_names"]) != s:
        raise MalformedHeaderError("presence/series_names length differs from series_count")
    if header["dtype"] != "<f4":
        raise MalformedHeaderError(f"unsupported voxel dtype {header['dtype']}")
    return header


def load_volume(path: str | Path, normalize: bool = False) -> MultiSeriesVolume:
    """Read a volume file; ``normalize`` applies :func:`normalize_series`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    if len(blob) < len(MAGIC) + 4:
        raise MalformedHeaderError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise MalformedHeaderError(f"{path}: header shorter than declared")
    header = _parse_header(blob[start:start + hlen])
    payload = blob[start + hlen:]
    D, H, W = header["extents"]
    s = header["series_count"]
    per_series = D * H * W * 4
    if len(payload) < s * per_series:
        raise TruncatedPayloadError(
            f"{path}: header declares {s} series of {(D, H, W)} but payload holds "
            f"{len(payload) / per_series:.3g} series")
    if len(payload) > s * per_series:
        raise ExtentMismatchError(
            f"{path}: payload has {len(payload)} bytes, expected {s * per_series}")
    data = np.frombuffer(payload, dtype="<f4").reshape(s, D, H, W).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise MalformedHeaderError(f"{path}: payload contains non-finite intensities")
    vol = MultiSeriesVolume(data, tuple(header["presence"]), header.get("subject_id", ""),
                            tuple(header["series_names"]))
    return normalize_series(vol) if normalize else vol


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def split_ids(ids: Sequence[str], rng: np.random.Generator,
              fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> dict[str, str]:
    """Patient-wise random train/val/test assignment (8:1:1 by default)."""
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


@dataclass
class Dataset:
    examples: list[LabeledExample]
    splits: dict[str, str] = field(default_factory=dict)
    label_kind: str = "class"

    def split(self, name: str) -> list[LabeledExample]:
        return [e for e in self.examples if self.splits.get(e.volume.subject_id) == name]

    def volumes(self, name: str | None = None) -> list[MultiSeriesVolume]:
        ex = self.examples if name is None else self.split(name)
        return [e.volume for e in ex]


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subjects = []
    for ex in dataset.examples:
        sid = ex.volume.subject_id
        entry = {"id": sid, "file": f"{sid}.vol", "split": dataset.splits.get(sid, "train")}
        save_volume(ex.volume, root / entry["file"])
        if ex.label is not None:
            entry["label"] = int(ex.label)
        else:
            entry["mask_file"] = f"{sid}.mask.vol"
            m = MultiSeriesVolume(ex.mask[None].astype(np.float32), (True,), sid, ("mask",))
            save_volume(m, root / entry["mask_file"])
        subjects.append(entry)
    manifest = {"version": FORMAT_VERSION, "label_kind": dataset.label_kind,
                "subjects": subjects}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest: str | Path, normalize: bool = True) -> Dataset:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    try:
        meta = json.loads(manifest.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"manifest not found: {manifest}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"manifest {manifest} is not valid JSON: {exc}") from None
    kind = meta.get("label_kind")
    if kind not in ("class", "mask"):
        raise ConfigurationError(f"manifest label_kind must be 'class' or 'mask', got {kind!r}")
    root = manifest.parent
    examples, splits = [], {}
    extents = None
    for entry in meta.get("subjects", []):
        vol = load_volume(root / entry["file"], normalize=normalize)
        if extents is None:
            extents = vol.extents
        elif vol.extents != extents:
            raise ConfigurationError(f"subject {entry['id']} has extents {vol.extents}, "
                                     f"dataset uses {extents}")
        if kind == "class":
            ex = LabeledExample(vol, label=int(entry["label"]))
        else:
            m = load_volume(root / entry["mask_file"]).data[0]
            ex = LabeledExample(vol, mask=(m > 0.5).astype(np.uint8))
        examples.append(ex)
        splits[vol.subject_id] = entry.get("split", "train")
    if not examples:
        raise ConfigurationError(f"dataset {manifest} lists no subjects")
    return Dataset(examples, splits, kind)
