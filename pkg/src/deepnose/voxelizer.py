"""Rasterize molecules into [orientation][element][x][y][z] occupancy counts.

A rotated coordinate ``c`` lands in voxel ``round(c / step) + L // 2`` per axis
(rounding half away from zero), so the raster spans ``[-L/2, L/2)`` voxels
around the centroid. Atoms falling outside are dropped and counted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import EmptyMolecule, GridMismatch, MalformedRecord
from .molecule_io import N_CHANNELS, Element, Molecule
from .rotation_grid import RotationGrid


@dataclass
class VoxelTensor:
    data: np.ndarray  # [n_orient, 6, L, L, L]
    dropped: np.ndarray  # [n_orient, 6] atoms outside the box
    skipped_other: int  # atoms of unmodeled elements
    cid: int = 0

    @property
    def dropped_atoms(self) -> np.ndarray:
        return self.dropped.sum(axis=1)


def center_molecule(mol: Molecule) -> Molecule:
    if not mol.atoms:
        raise EmptyMolecule(f"molecule {mol.cid} has no atoms")
    coords = mol.coords
    return Molecule.from_arrays(mol.cid, mol.elements, coords - coords.mean(axis=0), mol.name)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rotate_points(coords: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Apply rotations [..., 3, 3] to points [A, 3] -> [..., A, 3].

    Written as an explicit three-term sum so every caller (grid or
    pre-rotated molecule) follows the same floating-point path.
    """
    r = np.asarray(rotations)[..., None, :, :]
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    return np.stack([r[..., i, 0] * x + r[..., i, 1] * y + r[..., i, 2] * z for i in range(3)], axis=-1)


def rotate_molecule(mol: Molecule, rotation: np.ndarray) -> Molecule:
    return Molecule.from_arrays(mol.cid, mol.elements, rotate_points(mol.coords, rotation), mol.name)


def _raster_size(box: float, step: float) -> int:
    n = box / step
    if step <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise GridMismatch(f"box {box} is not an integral multiple of step {step}")
    return int(round(n))


def voxelize(mol: Molecule, grid: RotationGrid, box: float = 18.0, step: float = 1.0,
             dtype=np.float32) -> VoxelTensor:
    """Occupancy counts of ``mol`` (already centered) under every grid rotation."""
    L = _raster_size(box, step)
    n_orient = len(grid)
    data = np.zeros((n_orient, N_CHANNELS, L, L, L), dtype=dtype)
    dropped = np.zeros((n_orient, N_CHANNELS), dtype=np.int64)
    if not mol.atoms:
        return VoxelTensor(data, dropped, 0, mol.cid)
    elements = mol.elements
    keep = elements != Element.Other
    skipped = int((~keep).sum())
    elements = elements[keep]
    coords = mol.coords[keep]
    if len(coords) == 0:
        return VoxelTensor(data, dropped, skipped, mol.cid)

    rotated = rotate_points(coords, grid.rotations)  # [O, A, 3]
    idx = round_half_away(rotated / step).astype(np.int64) + L // 2
    inside = ((idx >= 0) & (idx < L)).all(axis=-1)  # [O, A]
    o_idx, a_idx = np.nonzero(inside)
    e_idx = elements[a_idx]
    i, j, k = idx[o_idx, a_idx].T
    np.add.at(data, (o_idx, e_idx, i, j, k), 1)
    out_o, out_a = np.nonzero(~inside)
    np.add.at(dropped, (out_o, elements[out_a]), 1)
    return VoxelTensor(data, dropped, skipped, mol.cid)


def iter_voxel_slabs(mol: Molecule, grid: RotationGrid, slab: int = 64, **kwargs) -> Iterator[VoxelTensor]:
    """Voxelize orientation slabs one at a time to bound peak memory."""
    for start in range(0, len(grid), slab):
        yield voxelize(mol, grid.subset(slice(start, start + slab)), **kwargs)


def drop_report(molecules, grid: RotationGrid, box: float = 18.0, step: float = 1.0) -> dict:
    """Fraction of retained-element atom placements that fell outside the box."""
    total = dropped = 0
    molecules_with_drops = 0
    for mol in molecules:
        vt = voxelize(center_molecule(mol), grid, box, step)
        n = int((mol.elements != Element.Other).sum()) * len(grid)
        d = int(vt.dropped.sum())
        total += n
        dropped += d
        molecules_with_drops += d > 0
    return {"placements": total, "dropped": dropped,
            "drop_rate": dropped / total if total else 0.0,
            "molecules_with_drops": molecules_with_drops}


_VOX_MAGIC = b"DNVOX v1"


def save_voxels(vt: VoxelTensor, path):
    n_orient, _, L = vt.data.shape[:3]
    header = _VOX_MAGIC + struct.pack("<QII", vt.cid, n_orient, L)
    Path(path).write_bytes(header + vt.data.astype("<f4").tobytes())


def load_voxels(path) -> VoxelTensor:
    raw = Path(path).read_bytes()
    if not raw.startswith(_VOX_MAGIC):
        raise MalformedRecord("missing DNVOX v1 header")
    off = len(_VOX_MAGIC)
    cid, n_orient, L = struct.unpack_from("<QII", raw, off)
    payload = raw[off + 16:]
    expected = n_orient * N_CHANNELS * L ** 3 * 4
    if len(payload) != expected:
        raise MalformedRecord(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_orient, N_CHANNELS, L, L, L).copy()
    return VoxelTensor(data, np.zeros((n_orient, N_CHANNELS), np.int64), 0, cid)
