"""Dataset manifests: which cases exist, where their files are, which split they belong to.

Manifest layout (``manifest.json``)::

    {
      "format": "OCTDATA1",
      "splits": {"train": [case, ...], "test": [case, ...]},
      ...free-form provenance keys (phantom spec, converter settings)...
    }

with each case ``{"id", "volume", "surfaces", "tag", "seed", "injected_displacement",
"sha256"}``. Paths are relative to the manifest's directory; only ``id``, ``volume``
and ``surfaces`` are required. Surfaces are stored in the frame of the volume as
acquired (misaligned), which is what a manual annotator would trace.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .core import DisplacementVector, OctVolume, SurfaceSet
from .io import FormatError, load_surfaces, load_volume

MANIFEST_FORMAT = "OCTDATA1"


@dataclass(frozen=True)
class Case:
    id: str
    volume: OctVolume
    truth: SurfaceSet
    tag: str = ""
    injected: DisplacementVector | None = None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT or "splits" not in manifest:
        raise FormatError(f"{path}: not an {MANIFEST_FORMAT} manifest")
    return manifest


def load_split(data_dir, split: str) -> list[Case]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    if split not in manifest["splits"]:
        raise FormatError(f"{data_dir / 'manifest.json'}: no split named {split!r}")
    cases = []
    for entry in manifest["splits"][split]:
        injected = entry.get("injected_displacement")
        cases.append(
            Case(
                id=entry["id"],
                volume=load_volume(data_dir / entry["volume"]),
                truth=load_surfaces(data_dir / entry["surfaces"]),
                tag=entry.get("tag", ""),
                injected=None if injected is None else DisplacementVector(injected),
            )
        )
    return cases
