"""Bit-allocation maps and per-family rate reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .container import HaczBlob, coding_rate_params, inspect_blob
from .errors import HaczError
from .masking import MaskSet
from .ratemodel import FAMILIES, per_anchor_bits, scene_symbols
from .scene import normalize_locations


@dataclass(frozen=True)
class VoxelRecord:
    """Aggregated bit estimate of the anchors falling in one voxel."""

    ix: int
    iy: int
    iz: int
    anchor_count: int
    total_bits: float
    mean_bits_per_anchor: float


def anchor_bits_estimate(scene, grid, model, masks):
    """Per-anchor estimated bits under the coding-precision rate model.

    Uses hard quantization symbols and excludes masked offsets and pruned
    anchors, mirroring what the coder would spend (entropy estimate, not a
    measured payload).
    """
    model32 = model.to_coding_precision()
    loc16 = scene.locations.astype(np.float16)
    rate = coding_rate_params(loc16, grid, model32, grid.bounds)
    symbols = scene_symbols(scene, rate)
    return per_anchor_bits(scene, rate, symbols, masks.hard)


def bit_allocation_map(scene, grid, model, masks, resolution):
    """VoxelRecord list over a resolution^3 lattice of the scene bounds.

    Voxels without anchors are omitted; pruned anchors contribute zero bits
    and are not counted.
    """
    if resolution < 1:
        raise HaczError("voxel resolution must be >= 1")
    if scene.n == 0:
        return []
    bits = anchor_bits_estimate(scene, grid, model, masks)
    keep = masks.kept_anchors
    t = normalize_locations(scene.locations, grid.bounds)
    cells = np.minimum((t * resolution).astype(np.int64), resolution - 1)

    flat = cells[:, 0] * resolution * resolution + cells[:, 1] * resolution + cells[:, 2]
    records = []
    for cell in np.unique(flat[keep]):
        members = keep & (flat == cell)
        count = int(members.sum())
        total = float(bits[members].sum())
        ix, rem = divmod(int(cell), resolution * resolution)
        iy, iz = divmod(rem, resolution)
        records.append(
            VoxelRecord(ix=ix, iy=iy, iz=iz, anchor_count=count,
                        total_bits=total, mean_bits_per_anchor=total / count)
        )
    return records


def write_voxel_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["ix", "iy", "iz", "anchor_count", "total_bits", "mean_bits_per_anchor"]
        )
        for r in records:
            writer.writerow([r.ix, r.iy, r.iz, r.anchor_count,
                             f"{r.total_bits:.6f}", f"{r.mean_bits_per_anchor:.6f}"])


def voxel_records_json(records):
    return json.dumps([asdict(r) for r in records], indent=2)


def family_report(blob):
    """Per-family size table of a compressed blob.

    Denominators count only surviving anchors and surviving offsets, so
    masked values never dilute the per-parameter figures.
    """
    if isinstance(blob, (bytes, bytearray)):
        blob = HaczBlob.from_bytes(bytes(blob))
    info = inspect_blob(blob)
    rows = []
    for fam in FAMILIES:
        rows.append({
            "family": fam,
            "total_bytes": info["family_bytes"][fam],
            "coded_values": info["coded_values"][fam],
            "bits_per_param": info["bits_per_param"][fam],
        })
    return {"rows": rows, "n_kept": info["n_kept"],
            "kept_offsets": info["kept_offsets"]}


def format_family_report(report):
    lines = ["family   bytes        values     bits/param"]
    for row in report["rows"]:
        lines.append(
            f"{row['family']:<8} {row['total_bytes']:<12} "
            f"{row['coded_values']:<10} {row['bits_per_param']:.4f}"
        )
    lines.append(
        f"surviving anchors: {report['n_kept']}, "
        f"surviving offsets: {report['kept_offsets']}"
    )
    return "\n".join(lines)


def write_history_csv(history, path):
    fields = ["iteration", "phase", "distortion", "entropy_bits", "hash_bits",
              "mask_loss", "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in fields})
