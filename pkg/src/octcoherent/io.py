"""OCTV1 / SURF1 containers: a JSON header next to a raw little-endian payload.

A volume saved as ``case_000.octv.json`` carries its payload in the file named
by the header's ``payload`` key (``case_000.octv.raw`` by default).
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .core import DisplacementVector, OctVolume, SurfaceSet

VOLUME_FORMAT = "OCTV1"
SURFACE_FORMAT = "SURF1"
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_VOLUME_AXES = ("a", "b", "r")


class FormatError(ValueError):
    pass


def _payload_path(header_path: Path, header: dict) -> Path:
    name = header.get("payload")
    if name is None:
        name = header_path.name.removesuffix(".json") + ".raw"
    return header_path.parent / name


def _header_path(path) -> Path:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    return path


def _read_payload(header_path: Path, header: dict, shape) -> np.ndarray:
    dtype = _DTYPES.get(header.get("dtype", "f32"))
    if dtype is None:
        raise FormatError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    payload = _payload_path(header_path, header)
    try:
        data = np.fromfile(payload, dtype=dtype)
    except OSError as exc:
        raise FormatError(f"{payload}: cannot read payload ({exc})") from exc
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(f"{payload}: {data.size} values, header shape {list(shape)} needs {expected}")
    return data.reshape(shape)


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_pair(header_path: Path, header: dict, array: np.ndarray):
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = header_path.name.removesuffix(".json") + ".raw"
    header = dict(header, payload=payload)
    _atomic_write_bytes(header_path.parent / payload, np.ascontiguousarray(array, dtype="<f4").tobytes())
    _atomic_write_bytes(header_path, (json.dumps(header, indent=2) + "\n").encode())
    return header_path


def save_volume(vol: OctVolume, path) -> Path:
    header = {
        "format": VOLUME_FORMAT,
        "shape": list(vol.shape),
        "dtype": "f32",
        "spacing_um": list(vol.spacing),
        "order": "a,b,r",
        "id": vol.id,
    }
    return _write_pair(_header_path(path), header, vol.intensities)


def load_volume(path) -> OctVolume:
    header_path = _header_path(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{header_path}: cannot read header ({exc})") from exc
    if header.get("format", VOLUME_FORMAT) != VOLUME_FORMAT:
        raise FormatError(f"{header_path}: not an {VOLUME_FORMAT} header")
    order = tuple(x.strip() for x in header.get("order", "a,b,r").split(","))
    if sorted(order) != sorted(_VOLUME_AXES):
        raise FormatError(f"{header_path}: order must be a permutation of a,b,r, got {header.get('order')!r}")
    shape = tuple(int(n) for n in header["shape"])
    data = _read_payload(header_path, header, shape)
    data = np.transpose(data, [order.index(ax) for ax in _VOLUME_AXES])
    return OctVolume(data, tuple(header.get("spacing_um", (3.24, 6.7, 67.0))), header.get("id", ""))


def save_surfaces(s: SurfaceSet, path, id: str = "") -> Path:
    header = {
        "format": SURFACE_FORMAT,
        "K": s.k,
        "names": list(s.names),
        "shape": list(s.shape),
        "dtype": "f32",
        "id": id,
    }
    return _write_pair(_header_path(path), header, s.positions)


def load_surfaces(path) -> SurfaceSet:
    header_path = _header_path(path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{header_path}: cannot read header ({exc})") from exc
    if header.get("format", SURFACE_FORMAT) != SURFACE_FORMAT:
        raise FormatError(f"{header_path}: not a {SURFACE_FORMAT} header")
    shape = tuple(int(n) for n in header["shape"])
    if shape[0] != int(header.get("K", shape[0])):
        raise FormatError(f"{header_path}: K={header['K']} disagrees with shape {list(shape)}")
    data = _read_payload(header_path, header, shape)
    return SurfaceSet(data.astype(np.float64), tuple(header.get("names", ())))


def save_displacements(table: dict[str, DisplacementVector], path) -> Path:
    """Per-case displacement table, the input format for ``pre_align`` runs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"format": "DISP1", "displacements": {k: [float(x) for x in v.d] for k, v in table.items()}}
    _atomic_write_bytes(path, (json.dumps(body, indent=2) + "\n").encode())
    return path


def load_displacements(path) -> dict[str, DisplacementVector]:
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read displacement table ({exc})") from exc
    table = body.get("displacements")
    if not isinstance(table, dict):
        raise FormatError(f"{path}: missing 'displacements' mapping")
    return {k: DisplacementVector(v) for k, v in table.items()}


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode())
    return path
