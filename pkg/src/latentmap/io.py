"""Binary file formats, map persistence, config parsing and exports.

All binary formats are little-endian and start with a 4-byte magic and a
``u16`` version:

* frame files (``LBKF``): observation batches,
* map files (``LBKM``): a serialized :class:`~latentmap.latent_map.LatentMap`,
* dictionary files (``LBKD``): phrases with precomputed embeddings,
* PCA files (``LBKP``): see :mod:`latentmap.compression`.
"""

from __future__ import annotations

import colorsys
import csv
import io as _io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .inference import QueryDictionary
from .kernel import KernelConfig
from .latent_map import DEFAULT_LAM0, DEFAULT_PSI0, LatentMap, ObservationFrame
from .voxel_grid import GridConfig


class FormatError(ValueError):
    """A file is malformed, truncated or of an unsupported version."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _f32_value(x) -> float:
    """Shortest decimal that round-trips through float32 (0.1f32 -> 0.1)."""
    return float(np.format_float_positional(np.float32(x), unique=True, trim="-"))


# -- frame files --

FRAME_MAGIC = b"LBKF"
FRAME_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sHIHB")
FLAG_RANGE = 0x1
FLAG_LABEL = 0x2


def _frame_dtype(dim: int, has_range: bool, has_label: bool) -> np.dtype:
    spec = [("position", "<f4", (3,)), ("feature", "<f4", (dim,))]
    if has_range:
        spec.append(("range", "<f4"))
    if has_label:
        spec.append(("label", "<u4"))
    return np.dtype(spec)


def frame_to_bytes(frame: ObservationFrame) -> bytes:
    n = len(frame)
    dim = frame.feature_dim
    has_range = frame.ranges is not None
    has_label = frame.labels is not None
    if not (np.all(np.isfinite(frame.positions)) and np.all(np.isfinite(frame.features))):
        raise FormatError("frame contains non-finite values")
    if has_range and not np.all(np.isfinite(frame.ranges)):
        raise FormatError("frame contains non-finite ranges")
    dtype = _frame_dtype(dim, has_range, has_label)
    rec = np.zeros(n, dtype=dtype)
    rec["position"] = frame.positions
    rec["feature"] = frame.features
    if has_range:
        rec["range"] = frame.ranges
    if has_label:
        if n and frame.labels.min() < 0:
            raise FormatError("labels must be non-negative")
        rec["label"] = frame.labels
    flags = (FLAG_RANGE if has_range else 0) | (FLAG_LABEL if has_label else 0)
    return _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, n, dim, flags) + rec.tobytes()


def frame_from_bytes(data: bytes) -> ObservationFrame:
    if len(data) < _FRAME_HEADER.size:
        raise FormatError("truncated frame header")
    magic, version, n, dim, flags = _FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}")
    if version != FRAME_VERSION:
        raise FormatError(f"unsupported frame version {version}")
    has_range = bool(flags & FLAG_RANGE)
    has_label = bool(flags & FLAG_LABEL)
    dtype = _frame_dtype(dim, has_range, has_label)
    expected = _FRAME_HEADER.size + n * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"frame payload is {len(data)} bytes, header implies {expected}")
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=_FRAME_HEADER.size)
    positions = rec["position"].astype(np.float64)
    features = rec["feature"].astype(np.float64).reshape(n, dim)
    if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(features))):
        raise FormatError("frame contains non-finite values")
    ranges = rec["range"].astype(np.float64) if has_range else None
    if ranges is not None and not np.all(np.isfinite(ranges)):
        raise FormatError("frame contains non-finite ranges")
    labels = rec["label"].astype(np.int64) if has_label else None
    return ObservationFrame(positions, features, ranges, labels)


def save_frame(path, frame: ObservationFrame) -> None:
    atomic_write_bytes(path, frame_to_bytes(frame))


def load_frame(path) -> ObservationFrame:
    return frame_from_bytes(Path(path).read_bytes())


# -- map files --

MAP_MAGIC = b"LBKM"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHffBHffQ")


def _map_dtype(dim: int) -> np.dtype:
    return np.dtype([("key", "<i8"), ("lam", "<f4"), ("mu", "<f4", (dim,)), ("psi", "<f4", (dim,))])


def map_to_bytes(m: LatentMap) -> bytes:
    """Serialize with records sorted by packed voxel key."""
    order = np.argsort(m.keys, kind="stable")
    rec = np.zeros(len(m), dtype=_map_dtype(m.latent_dim))
    rec["key"] = m.keys[order]
    rec["lam"] = m.lam[order]
    rec["mu"] = m.mu[order]
    rec["psi"] = m.psi_diag[order]
    for name in ("lam", "mu", "psi"):
        if not np.all(np.isfinite(rec[name])):
            raise FormatError(f"map field {name} is not finite in float32")
    header = _MAP_HEADER.pack(
        MAP_MAGIC,
        MAP_VERSION,
        m.grid.resolution,
        m.kernel.length,
        m.grid.filter_size,
        m.latent_dim,
        m.lam0,
        m.psi0,
        len(m),
    )
    return header + rec.tobytes()


def map_from_bytes(data: bytes) -> LatentMap:
    if len(data) < _MAP_HEADER.size:
        raise FormatError("truncated map header")
    magic, version, res, length, fsize, dim, lam0, psi0, count = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise FormatError(f"bad map magic {magic!r}")
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map version {version}")
    dtype = _map_dtype(dim)
    expected = _MAP_HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"map payload is {len(data)} bytes, header implies {expected}")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=_MAP_HEADER.size)
    try:
        grid = GridConfig(_f32_value(res), int(fsize))
        kernel = KernelConfig(_f32_value(length))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return LatentMap.from_arrays(
        grid,
        kernel,
        rec["key"].astype(np.int64),
        rec["lam"].astype(np.float64),
        rec["mu"].reshape(count, dim),
        rec["psi"].reshape(count, dim),
        lam0=_f32_value(lam0),
        psi0=_f32_value(psi0),
    )


def save_map(path, m: LatentMap) -> None:
    atomic_write_bytes(path, map_to_bytes(m))


def load_map(path) -> LatentMap:
    return map_from_bytes(Path(path).read_bytes())


# -- dictionary files --

DICT_MAGIC = b"LBKD"
DICT_VERSION = 1
_DICT_HEADER = struct.Struct("<4sHII")
_LEN = struct.Struct("<I")


def dictionary_to_bytes(d: QueryDictionary) -> bytes:
    parts = [_DICT_HEADER.pack(DICT_MAGIC, DICT_VERSION, len(d), d.dim)]
    for phrase, emb in zip(d.phrases, d.embeddings):
        raw = phrase.encode("utf-8")
        parts.append(_LEN.pack(len(raw)))
        parts.append(raw)
        parts.append(np.asarray(emb, dtype="<f4").tobytes())
    return b"".join(parts)


def dictionary_from_bytes(data: bytes) -> QueryDictionary:
    if len(data) < _DICT_HEADER.size:
        raise FormatError("truncated dictionary header")
    magic, version, count, dim = _DICT_HEADER.unpack_from(data)
    if magic != DICT_MAGIC:
        raise FormatError(f"bad dictionary magic {magic!r}")
    if version != DICT_VERSION:
        raise FormatError(f"unsupported dictionary version {version}")
    pos = _DICT_HEADER.size
    phrases, embeddings = [], []
    for _ in range(count):
        if pos + _LEN.size > len(data):
            raise FormatError("truncated dictionary entry")
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        end = pos + n + 4 * dim
        if end > len(data):
            raise FormatError("truncated dictionary entry")
        phrases.append(data[pos : pos + n].decode("utf-8"))
        embeddings.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos + n).astype(np.float64))
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes after dictionary entries")
    try:
        return QueryDictionary(phrases, np.array(embeddings).reshape(count, dim))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_dictionary(path, d: QueryDictionary) -> None:
    atomic_write_bytes(path, dictionary_to_bytes(d))


def load_dictionary(path) -> QueryDictionary:
    return dictionary_from_bytes(Path(path).read_bytes())


# -- config --


@dataclass
class MapConfig:
    """Settings for building a map.

    The config file is plain text, one ``key = value`` per line; ``#`` starts a
    comment. Keys are the field names below and unknown keys are rejected.
    """

    resolution: float = 0.1
    kernel_length: float = 0.5
    filter_size: int = 3
    latent_dim: int = 64
    lam0: float = DEFAULT_LAM0
    psi0: float = DEFAULT_PSI0
    min_depth: float = 0.1
    max_depth: float = 6.0

    def grid(self) -> GridConfig:
        return GridConfig(self.resolution, self.filter_size)

    def kernel(self) -> KernelConfig:
        return KernelConfig(self.kernel_length)

    def new_map(self) -> LatentMap:
        return LatentMap(self.grid(), self.kernel(), self.latent_dim, self.lam0, self.psi0)


def parse_key_values(text: str, allowed: dict[str, type]) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        typ = allowed[key]
        try:
            if typ is int:
                out[key] = int(value)
            elif typ is float:
                out[key] = float(value)
            elif typ is list:
                out[key] = [float(v) for v in value.replace(",", " ").split()]
            elif typ is tuple:
                out[key] = tuple(int(v) for v in value.replace(",", " ").split())
            else:
                out[key] = value
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {value!r} for {key}") from None
    return out


def load_config(path, cls=MapConfig):
    types = {f.name: _field_type(f) for f in fields(cls)}
    values = parse_key_values(Path(path).read_text(), types)
    cfg = cls(**values)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def _field_type(f) -> type:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    t = t.lower()
    if t.startswith("int"):
        return int
    if t.startswith("float"):
        return float
    if t.startswith("list"):
        return list
    if t.startswith("tuple"):
        return tuple
    return str


def depth_filter(frame: ObservationFrame, min_depth: float, max_depth: float) -> ObservationFrame:
    """Drop points whose range lies outside [min_depth, max_depth]; no-op without ranges."""
    if frame.ranges is None:
        return frame
    keep = (frame.ranges >= min_depth) & (frame.ranges <= max_depth)
    return frame if keep.all() else frame.subset(keep)


# -- exports --


def category_color(category: int) -> tuple[int, int, int]:
    """Deterministic, well-spread RGB for a category id (golden-ratio hue walk)."""
    hue = (category * 0.618033988749895) % 1.0
    sat = 0.65 + 0.35 * ((category // 7) % 2)
    r, g, b = colorsys.hsv_to_rgb(hue, sat, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def heat_color(score: float) -> tuple[int, int, int]:
    """Blue (-1) through white (0) to red (+1)."""
    t = float(np.clip(score, -1.0, 1.0))
    if t >= 0:
        return 255, int(round(255 * (1 - t))), int(round(255 * (1 - t)))
    return int(round(255 * (1 + t))), int(round(255 * (1 + t))), 255


def ply_text(points: np.ndarray, colors: np.ndarray, scalars: Optional[dict[str, np.ndarray]] = None) -> str:
    """ASCII PLY vertex list with x, y, z, red, green, blue and optional float columns."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    scalars = scalars or {}
    cols = [points, colors] + [np.asarray(v, dtype=np.float64).reshape(-1, 1) for v in scalars.values()]
    for c in cols:
        if c.dtype.kind == "f" and not np.all(np.isfinite(c)):
            raise ValueError("refusing to export non-finite values")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    header += [f"property float {name}" for name in scalars]
    header.append("end_header")
    buf = _io.StringIO()
    buf.write("\n".join(header) + "\n")
    extra = list(scalars.values())
    for i in range(points.shape[0]):
        x, y, z = points[i]
        r, g, b = colors[i]
        row = [f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", str(r), str(g), str(b)]
        row += [f"{float(v[i]):.6f}" for v in extra]
        buf.write(" ".join(row) + "\n")
    return buf.getvalue()


def read_ply_vertices(path) -> tuple[list[str], np.ndarray]:
    """Minimal ASCII PLY reader: returns (property names, (N, P) float array)."""
    lines = Path(path).read_text().splitlines()
    names, n, start = [], 0, 0
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            names.append(parts[-1])
        elif line.strip() == "end_header":
            start = i + 1
            break
    rows = [list(map(float, ln.split())) for ln in lines[start : start + n]]
    return names, np.array(rows, dtype=np.float64).reshape(n, len(names))


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            raise ValueError("refusing to export non-finite values")
        return repr(float(v))
    return str(v)
