"""Convert the public Duke SD-OCT AMD/control dataset (.mat files) to OCTV1/SURF1.

Each source file holds

* ``images``: rows x A-scans x B-scans (512 x 1000 x 100), uint8 or double
* ``layerMaps``: B-scans x A-scans x 3 surface rows (1-based, NaN where unannotated)

and its name starts with ``AMD`` or ``Control``, which becomes the case tag.
Intensities are scaled to [0, 1]. Cases are split into train/test by a
seeded shuffle, stratified by tag.

    python3 scripts/convert_duke_dataset.py --src /data/duke_mat --out data/duke --test-fraction 0.2

The result is read by ``octcoherent preprocess`` (flattening) and the other
subcommands like any phantom dataset.
"""
import argparse
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from octcoherent import io
from octcoherent.core import DEFAULT_SPACING_UM, OctVolume, SurfaceSet
from octcoherent.dataset import MANIFEST_FORMAT, file_sha256


def convert_file(path: Path):
    mat = loadmat(path)
    images = np.asarray(mat["images"], dtype=np.float32)  # (R, N_A, N_B)
    layers = np.asarray(mat["layerMaps"], dtype=np.float64)  # (N_B, N_A, K)
    if images.ndim != 3 or layers.ndim != 3:
        raise ValueError(f"{path}: unexpected array ranks {images.shape}, {layers.shape}")
    if images.max() > 1:
        images = images / 255.0
    intensities = np.transpose(images, (1, 2, 0))  # (N_A, N_B, R)
    positions = np.transpose(layers, (2, 0, 1))  # (K, N_B, N_A)
    if positions.shape[1:] != intensities.shape[1::-1]:
        raise ValueError(f"{path}: surfaces {positions.shape} do not match volume {intensities.shape}")
    tag = "AMD" if path.name.upper().startswith("AMD") else "normal"
    return OctVolume(intensities, DEFAULT_SPACING_UM, path.stem), SurfaceSet(positions), tag


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--src", required=True, help="directory of .mat files")
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    src, out = Path(args.src), Path(args.out)
    files = sorted(src.glob("*.mat"))
    if not files:
        raise SystemExit(f"no .mat files in {src}")
    by_tag: dict[str, list[Path]] = {}
    for f in files:
        by_tag.setdefault("AMD" if f.name.upper().startswith("AMD") else "normal", []).append(f)
    rng = np.random.default_rng(args.seed)
    assignment = {}
    for tag, group in by_tag.items():
        order = rng.permutation(len(group))
        n_test = int(round(args.test_fraction * len(group)))
        for rank, i in enumerate(order):
            assignment[group[i]] = "test" if rank < n_test else "train"

    splits = {"train": [], "test": []}
    for f in files:
        vol, surfaces, tag = convert_file(f)
        split = assignment[f]
        cid = f.stem
        vpath = io.save_volume(vol, out / split / f"{cid}.octv")
        spath = io.save_surfaces(surfaces, out / split / f"{cid}.surf", id=cid)
        splits[split].append({
            "id": cid,
            "volume": str(vpath.relative_to(out)),
            "surfaces": str(spath.relative_to(out)),
            "tag": tag,
            "sha256": {"volume": file_sha256(vpath.with_suffix(".raw")),
                       "surfaces": file_sha256(spath.with_suffix(".raw"))},
        })
        print(f"{split:5s} {cid} {tag} {vol.shape}")
    io.write_json(out / "manifest.json", {
        "format": MANIFEST_FORMAT,
        "source": str(src),
        "converter": {"test_fraction": args.test_fraction, "seed": args.seed},
        "splits": splits,
    })


if __name__ == "__main__":
    main()
