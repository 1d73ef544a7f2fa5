"""File formats: grid maps, tensor bundles, run configs and provenance sidecars.

Grid map layout (little-endian)::

    "SMGM" | version u16 | kind u8 | channels u16 | M u32 | N u32 |
    payload (f32, or u32 for labels; channel-major, latitude-major) | crc32(payload) u32

Tensor bundles (network weights) use the same idea with float64 payloads so a
trained model reloads bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import struct
import sys
import tempfile
import zlib
from enum import IntEnum
from pathlib import Path

import jsonschema
import numpy as np

from .fields import DeformationField, FeatureMap, LabelMap, VelocityField
from .grid import make_grid

MAGIC = b"SMGM"
TENSOR_MAGIC = b"SMTB"
VERSION = 1
_HEADER = struct.Struct("<4sHBHII")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


class MapKind(IntEnum):
    FEATURE = 0
    LABEL = 1
    VELOCITY = 2
    DEFORMATION = 3
    VARIANCE = 4


_FIXED_CHANNELS = {MapKind.LABEL: 1, MapKind.VELOCITY: 2, MapKind.DEFORMATION: 2}


def _kind_of(obj) -> MapKind:
    if isinstance(obj, LabelMap):
        return MapKind.LABEL
    if isinstance(obj, DeformationField):
        return MapKind.DEFORMATION
    if isinstance(obj, VelocityField):
        return MapKind.VELOCITY
    if isinstance(obj, FeatureMap):
        return MapKind.FEATURE
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def encode_map(obj, kind: MapKind | str | None = None) -> bytes:
    """Serialize a map object; ``kind="variance"`` tags a FeatureMap as a variance map."""
    natural = _kind_of(obj)
    if kind is None:
        kind = natural
    elif isinstance(kind, str):
        kind = MapKind[kind.upper()]
    if kind == MapKind.VARIANCE and natural != MapKind.FEATURE:
        raise TypeError("only feature maps can be stored as variance maps")
    if kind != MapKind.VARIANCE and kind != natural:
        raise TypeError(f"{type(obj).__name__} cannot be stored as kind {kind.name.lower()}")
    M, N = obj.grid.shape
    if kind == MapKind.LABEL:
        lab = obj.labels
        if lab.max(initial=0) > np.iinfo(np.uint32).max:
            raise ValueError("label ids do not fit in 32 bits")
        payload = lab.astype("<u4").tobytes()
        channels = 1
    else:
        data = obj.data
        channels = data.shape[0]
        payload = data.astype("<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, int(kind), channels, M, N) + payload + _CRC.pack(zlib.crc32(payload))


def decode_map(buf: bytes, source: str = "<bytes>"):
    """Inverse of :func:`encode_map`.  Returns ``(kind, object)``."""
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, kind, channels, M, N = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    try:
        kind = MapKind(kind)
    except ValueError:
        raise FormatError(f"{source}: unknown map kind {kind}") from None
    want = _FIXED_CHANNELS.get(kind)
    if channels < 1 or (want is not None and channels != want):
        raise FormatError(f"{source}: kind {kind.name.lower()} cannot have {channels} channels")
    n = channels * M * N * 4
    body = len(buf) - _HEADER.size - _CRC.size
    if body != n:
        raise FormatError(f"{source}: payload is {body} bytes, header implies {n} "
                          f"({channels}x{M}x{N})")
    payload = buf[_HEADER.size:_HEADER.size + n]
    (crc,) = _CRC.unpack_from(buf, _HEADER.size + n)
    if crc != zlib.crc32(payload):
        raise FormatError(f"{source}: CRC mismatch")
    try:
        grid = make_grid(M, N)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None
    if kind == MapKind.LABEL:
        lab = np.frombuffer(payload, dtype="<u4").reshape(M, N).astype(np.int64)
        return kind, LabelMap(grid, lab)
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, M, N).astype(np.float64)
    try:
        if kind == MapKind.VELOCITY:
            return kind, VelocityField(grid, data)
        if kind == MapKind.DEFORMATION:
            return kind, DeformationField(grid, data)
        return kind, FeatureMap(grid, data)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_map(obj, path, kind: MapKind | str | None = None) -> Path:
    return atomic_write_bytes(path, encode_map(obj, kind))


def read_map(path, expect: MapKind | str | None = None):
    """Load a map file; ``expect`` restricts the accepted kind."""
    with open(path, "rb") as fh:
        buf = fh.read()
    kind, obj = decode_map(buf, str(path))
    if expect is not None:
        expect = MapKind[expect.upper()] if isinstance(expect, str) else MapKind(expect)
        if kind != expect:
            raise FormatError(f"{path}: expected a {expect.name.lower()} map, found {kind.name.lower()}")
    return obj


def read_map_kind(path) -> MapKind:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise FormatError(f"{path}: not a grid map file")
    try:
        return MapKind(_HEADER.unpack(head)[2])
    except ValueError:
        raise FormatError(f"{path}: unknown map kind") from None


def read_text_matrix(path, kind: str = "feature"):
    """Converter stub for external data: a whitespace-separated M x N matrix
    (one latitude row per line) becomes a one-channel feature or label map."""
    arr = np.loadtxt(path, ndmin=2)
    grid = make_grid(*arr.shape)
    if kind == "label":
        if not np.all(arr == np.round(arr)):
            raise FormatError(f"{path}: label matrix has non-integer entries")
        return LabelMap(grid, arr.astype(np.int64))
    if kind != "feature":
        raise ValueError("kind must be 'feature' or 'label'")
    return FeatureMap(grid, arr[None])


# ----------------------------------------------------------------- tensor bundles


def encode_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = []
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta_b)) + meta_b)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    body = b"".join(parts)
    return TENSOR_MAGIC + struct.pack("<H", VERSION) + body + _CRC.pack(zlib.crc32(body))


def decode_tensors(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 10 or buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: not a tensor bundle")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    body = buf[6:-4]
    (crc,) = _CRC.unpack_from(buf, len(buf) - 4)
    if crc != zlib.crc32(body):
        raise FormatError(f"{source}: CRC mismatch")
    try:
        pos = 0
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[4:4 + n].decode())
        pos = 4 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise FormatError(f"{source}: truncated tensor {name!r}")
            out[name] = np.frombuffer(body[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt tensor bundle ({exc})") from None
    if pos != len(body):
        raise FormatError(f"{source}: trailing bytes in tensor bundle")
    return out, meta


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    return atomic_write_bytes(path, encode_tensors(tensors, meta))


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), str(path))


# ------------------------------------------------------------------ JSON and configs


def write_json(path, obj) -> Path:
    return atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "iters": {"type": "integer", "minimum": 1},
        "lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "mode": {"enum": ["instance", "amortized", "voxelmorph2d-ablation"]},
        "sample_stochastic": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "multires_levels": {"type": "integer", "minimum": 1},
        "rigid": {"type": "boolean"},
        "coarse_step": {"type": "number", "exclusiveMinimum": 0},
        "logvar_init": {"type": "number"},
        "tol": {"type": "number", "minimum": 0},
        "patience": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4, "maxItems": 4},
        "moving": {"type": "string"},
        "atlas_mean": {"type": "string"},
        "atlas_var": {"type": "string"},
        "subjects": {"type": "array", "items": {"type": "string"}},
        "out": {"type": "string"},
    },
}

_RUN_ONLY = ("epochs", "channels", "moving", "atlas_mean", "atlas_var", "subjects", "out")


class ConfigError(ValueError):
    """Run config violates the schema."""


def parse_run_config(obj: dict):
    """Validate a run-config mapping; returns ``(RegistrationConfig, run options)``."""
    from .registration.config import RegistrationConfig

    try:
        jsonschema.validate(obj, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    reg = {k: v for k, v in obj.items() if k not in _RUN_ONLY}
    run = {k: v for k, v in obj.items() if k in _RUN_ONLY}
    try:
        return RegistrationConfig.from_dict(reg), run
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(obj)


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def provenance(argv: list[str], config: dict | None, seed: int | None) -> dict:
    import scipy

    from . import __version__

    return {
        "command": list(argv),
        "config_sha256": config_hash(config or {}),
        "seed": seed,
        "versions": {
            "spheremorph": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "platform": sys.platform,
    }


def write_provenance(path, info: dict) -> Path:
    """Sidecar ``<path>.prov.json`` next to an output file."""
    path = Path(path)
    data = dict(info)
    with open(path, "rb") as fh:
        data["sha256"] = hashlib.sha256(fh.read()).hexdigest()
    return write_json(path.with_name(path.name + ".prov.json"), data)
