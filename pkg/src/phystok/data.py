"""Synthetic trajectories, field schemas, windowing and the trajectory archive.

Trajectories are numpy arrays laid out ``(channel, time, height, width)``.
"""

from __future__ import annotations

import collections
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .metrics import wavenumber_magnitude

log = logging.getLogger(__name__)

RANK_CHANNELS = {"scalar": 1, "vector": 2, "tensor": 4}


@dataclass(frozen=True)
class FieldSpec:
    name: str
    rank: str = "scalar"

    def __post_init__(self):
        if self.rank not in RANK_CHANNELS:
            raise ValueError(f"unknown field rank {self.rank!r} for {self.name!r}")

    @property
    def channels(self) -> int:
        return RANK_CHANNELS[self.rank]


@dataclass(frozen=True)
class FieldSchema:
    """Named physical fields and their channel layout (2D: vector = 2, tensor = 4)."""

    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"field names must be unique, got {names}")
        if not self.fields:
            raise ValueError("schema has no fields")

    @classmethod
    def of(cls, *entries) -> "FieldSchema":
        specs = []
        for e in entries:
            if isinstance(e, FieldSpec):
                specs.append(e)
            elif isinstance(e, str):
                specs.append(FieldSpec(e))
            else:
                specs.append(FieldSpec(*e))
        return cls(tuple(specs))

    @classmethod
    def scalars(cls, n: int) -> "FieldSchema":
        return cls(tuple(FieldSpec(f"f{i}") for i in range(n)))

    @property
    def n_channels(self) -> int:
        return sum(f.channels for f in self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def slices(self) -> list[slice]:
        out, start = [], 0
        for f in self.fields:
            out.append(slice(start, start + f.channels))
            start += f.channels
        return out

    def channel_names(self) -> list[str]:
        out = []
        for f in self.fields:
            if f.channels == 1:
                out.append(f.name)
            else:
                out.extend(f"{f.name}[{i}]" for i in range(f.channels))
        return out

    def to_json(self) -> list:
        return [[f.name, f.rank] for f in self.fields]

    @classmethod
    def from_json(cls, obj) -> "FieldSchema":
        return cls(tuple(FieldSpec(name, rank) for name, rank in obj))


@dataclass
class DatasetMeta:
    name: str
    grid: tuple[int, int]
    n_frames: int
    tags: dict = field(default_factory=dict)


ADVECTION_SCHEMA = FieldSchema.of(("tracer", "scalar"), ("velocity", "vector"))


# ---------------------------------------------------------------------------
# generators


def _check_grid(shape):
    h, w = shape
    for n in (h, w):
        if n < 1 or n & (n - 1):
            raise ValueError(f"grid sides must be powers of two, got {shape}")


def gaussian_random_field(shape, beta: float, rng: np.random.Generator) -> np.ndarray:
    """One real Gaussian random field with isotropic spectrum ``~ k**-beta``.

    White noise is coloured in Fourier space; the DC amplitude is zeroed
    when ``k**-beta`` is infinite there.
    """
    k = wavenumber_magnitude(shape)
    with np.errstate(divide="ignore"):
        amp = k ** (-beta / 2.0)
    amp[~np.isfinite(amp)] = 0.0
    noise = np.fft.fft2(rng.standard_normal(shape))
    f = np.fft.ifft2(noise * amp).real
    std = f.std()
    return f / std if std > 0 else f


def gen_gaussian_field_trajectory(shape, beta: float, frames: int, seed: int) -> np.ndarray:
    """``frames`` independent fields, shape ``(1, frames, H, W)``."""
    _check_grid(shape)
    rng = np.random.default_rng(seed)
    return np.stack([gaussian_random_field(shape, beta, rng) for _ in range(frames)])[None]


def gen_advection_trajectory(
    shape, velocity: tuple[int, int], frames: int, seed: int, *, beta: float = 4.0
) -> np.ndarray:
    """Periodic advection of a smooth tracer by a constant integer velocity.

    Frame ``t`` is frame 0 rolled by ``t * vx`` along width and ``t * vy``
    along height. Channels follow :data:`ADVECTION_SCHEMA`: tracer then
    the constant ``(vx, vy)`` velocity field.
    """
    _check_grid(shape)
    vx, vy = velocity
    if int(vx) != vx or int(vy) != vy:
        raise ValueError(f"velocity components must be integers, got {velocity}")
    rng = np.random.default_rng(seed)
    tracer0 = gaussian_random_field(shape, beta, rng)
    tracer = np.stack([np.roll(tracer0, (t * int(vy), t * int(vx)), axis=(0, 1)) for t in range(frames)])
    vel = np.empty((2, frames) + tuple(shape))
    vel[0], vel[1] = vx, vy
    return np.concatenate([tracer[None], vel]).astype(np.float32)


def advection_dataset(
    n_trajectories: int,
    shape=(32, 32),
    frames: int = 10,
    seed: int = 0,
    speeds: Iterable[int] = (-1, 0, 1),
) -> list[np.ndarray]:
    """Trajectories with velocities drawn uniformly from ``speeds x speeds``."""
    speeds = list(speeds)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_trajectories):
        v = (int(rng.choice(speeds)), int(rng.choice(speeds)))
        out.append(gen_advection_trajectory(shape, v, frames, seed=int(rng.integers(2**31))))
    return out


# ---------------------------------------------------------------------------
# windowing


def window_sequences(
    trajectory: np.ndarray,
    length: int = 10,
    stride: int | None = None,
    stats: collections.Counter | None = None,
) -> Iterator[np.ndarray]:
    """Consecutive ``length``-frame windows, disjoint by default.

    Short trajectories yield nothing; they are counted in
    ``stats["short_trajectories"]`` and reported with a warning.
    """
    stride = length if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be positive")
    n = trajectory.shape[1]
    if n < length:
        if stats is not None:
            stats["short_trajectories"] += 1
        warnings.warn(f"trajectory of {n} frames is shorter than window {length}", stacklevel=2)
        return
    for start in range(0, n - length + 1, stride):
        if stats is not None:
            stats["windows"] += 1
        yield trajectory[:, start : start + length]


# ---------------------------------------------------------------------------
# archive
#
# header : b"PTRJ" | u32 version | u32 schema-json length | schema json
# body   : per trajectory, float32 (frames, channels, H, W), C order
# footer : per chunk u64 offset, u32 frames | u32 chunk count | u64 index offset | b"PIDX"

MAGIC = b"PTRJ"
INDEX_MAGIC = b"PIDX"
ARCHIVE_VERSION = 1
_FOOTER = struct.Struct("<IQ4s")
_ENTRY = struct.Struct("<QI")


class ArchiveError(Exception):
    pass


class SchemaMismatchError(ArchiveError):
    pass


class CorruptHeaderError(ArchiveError):
    pass


class TruncatedChunkError(ArchiveError):
    pass


def write_archive(path, trajectories: Iterable[np.ndarray], schema: FieldSchema, meta: DatasetMeta | None = None):
    """Write trajectories ``(C, T, H, W)`` sharing one grid."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("nothing to write")
    grid = tuple(trajectories[0].shape[2:])
    for tr in trajectories:
        if tr.shape[0] != schema.n_channels:
            raise SchemaMismatchError(f"trajectory has {tr.shape[0]} channels, schema needs {schema.n_channels}")
        if tuple(tr.shape[2:]) != grid:
            raise ValueError(f"inconsistent grid {tr.shape[2:]} vs {grid}")
    header = {
        "schema": schema.to_json(),
        "grid": list(grid),
        "name": meta.name if meta else Path(path).stem,
        "tags": meta.tags if meta else {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    index = []
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", ARCHIVE_VERSION, len(blob)) + blob)
        for tr in trajectories:
            index.append((f.tell(), tr.shape[1]))
            chunk = np.ascontiguousarray(np.transpose(tr, (1, 0, 2, 3)), dtype="<f4")
            f.write(chunk.tobytes())
        index_offset = f.tell()
        for off, frames in index:
            f.write(_ENTRY.pack(off, frames))
        f.write(_FOOTER.pack(len(index), index_offset, INDEX_MAGIC))


def read_archive_header(path) -> tuple[FieldSchema, dict]:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> tuple[FieldSchema, dict]:
    head = f.read(12)
    if len(head) < 12 or head[:4] != MAGIC:
        raise CorruptHeaderError(f"bad magic {head[:4]!r}")
    version, n = struct.unpack("<II", head[4:])
    if version != ARCHIVE_VERSION:
        raise CorruptHeaderError(f"unsupported archive version {version}")
    blob = f.read(n)
    try:
        header = json.loads(blob)
        schema = FieldSchema.from_json(header["schema"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable schema record: {exc}") from exc
    return schema, header


def _check_schema(found: FieldSchema, expected: FieldSchema):
    if found == expected:
        return
    by_name = {f.name: f for f in found.fields}
    for f in expected.fields:
        other = by_name.get(f.name)
        if other is None:
            raise SchemaMismatchError(f"field {f.name!r} missing from archive")
        if other.channels != f.channels:
            raise SchemaMismatchError(
                f"field {f.name!r}: archive has {other.channels} channels, expected {f.channels}"
            )
    raise SchemaMismatchError(f"field layout differs: archive {found.names}, expected {expected.names}")


def dataset_adapter_read(path, schema: FieldSchema | None = None) -> Iterator[np.ndarray]:
    """Yield trajectories ``(C, T, H, W)`` in archive index order.

    With ``schema`` given, the archive's field layout must match it.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        found, header = _read_header(f)
        if schema is not None:
            _check_schema(found, schema)
        if size < f.tell() + _FOOTER.size:
            raise TruncatedChunkError("archive ends before its index")
        f.seek(size - _FOOTER.size)
        count, index_offset, magic = _FOOTER.unpack(f.read(_FOOTER.size))
        if magic != INDEX_MAGIC or index_offset + count * _ENTRY.size + _FOOTER.size != size:
            raise TruncatedChunkError("chunk index missing or damaged")
        f.seek(index_offset)
        entries = [_ENTRY.unpack(f.read(_ENTRY.size)) for _ in range(count)]
        h, w = header["grid"]
        c = found.n_channels
        for offset, frames in entries:
            nbytes = frames * c * h * w * 4
            if offset + nbytes > index_offset:
                raise TruncatedChunkError(f"chunk at {offset} overruns the data section")
            f.seek(offset)
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise TruncatedChunkError(f"chunk at {offset}: read {len(buf)} of {nbytes} bytes")
            arr = np.frombuffer(buf, dtype="<f4").reshape(frames, c, h, w)
            yield np.transpose(arr, (1, 0, 2, 3)).astype(np.float32)


def external_converter_stub(src, dst, schema: FieldSchema):
    """Mapping sketch for an external HDF5 simulation archive.

    An external file would be read per trajectory as ``(T, H, W)`` scalar
    datasets and ``(T, H, W, 2)`` vector datasets, stacked along channels
    in ``schema`` order and passed to :func:`write_archive`. Not shipped:
    the external layout is not part of this package.
    """
    raise NotImplementedError("external archive ingestion is not bundled; see docstring for the mapping")
