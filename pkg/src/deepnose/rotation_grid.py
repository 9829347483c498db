"""Orientation grid: near-uniform sphere directions times axial spins.

Directions come from a Coulomb-energy (Thomson) relaxation on the unit sphere.
Each direction ``p`` yields ``n_axial`` rotations ``A(p, k) @ D(p)`` where
``D(p)`` is the minimal rotation taking +z to ``p`` and ``A(p, k)`` spins by
``2*pi*k/n_axial`` about ``p``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, MalformedRecord, NotUnit

Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass
class SpherePointSet:
    points: np.ndarray  # [n, 3]
    energy: float
    history: list[float] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.points)

    def min_separation(self) -> float:
        """Smallest pairwise angle in radians."""
        dots = np.clip(self.points @ self.points.T, -1.0, 1.0)
        np.fill_diagonal(dots, -1.0)
        return float(np.arccos(dots.max()))


def coulomb_energy(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    iu = np.triu_indices(len(points), 1)
    return float((1.0 / dist[iu]).sum())


def _coulomb_grad(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    dist2 = (diff ** 2).sum(-1)
    np.fill_diagonal(dist2, np.inf)
    return -(diff / dist2[..., None] ** 1.5).sum(axis=1)


def thomson_points(n: int, seed: int = 0, iters: int = 2000) -> SpherePointSet:
    """Relax ``n`` charges on the unit sphere by projected gradient descent.

    A step is accepted only if it lowers the energy; otherwise the step size is
    halved. The result is fully determined by ``(n, seed, iters)``.
    """
    if n < 2:
        raise ValueError("need at least 2 points")
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    energy = coulomb_energy(pts)
    history = [energy]
    step = 0.1 / n
    for _ in range(iters):
        g = _coulomb_grad(pts)
        g -= (g * pts).sum(1, keepdims=True) * pts  # tangent projection
        gnorm = np.abs(g).max()
        if gnorm < 1e-14:
            break
        while step > 1e-16:
            trial = pts - step * g
            trial /= np.linalg.norm(trial, axis=1, keepdims=True)
            e = coulomb_energy(trial)
            if e < energy:
                pts, energy = trial, e
                history.append(e)
                step *= 1.2
                break
            step *= 0.5
        else:
            break
    return SpherePointSet(points=pts, energy=energy, history=history)


def _check_unit(p, tol):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or abs(np.linalg.norm(p) - 1.0) > tol:
        raise NotUnit(f"expected a unit 3-vector, got {p!r}")
    return p


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_to_direction(p) -> np.ndarray:
    """Minimal-angle rotation R with R @ (0, 0, 1) = p."""
    p = _check_unit(p, 1e-6)
    p = p / np.linalg.norm(p)
    axis = np.cross(Z_AXIS, p)
    s = np.linalg.norm(axis)
    c = p[2]
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return _rodrigues(axis / s, np.arctan2(s, c))


def axial_rotation(p, k: int, n_axial: int) -> np.ndarray:
    p = _check_unit(p, 1e-6)
    if not 0 <= k < n_axial:
        raise IndexOutOfRange(f"axial index {k} not in [0, {n_axial})")
    if k == 0:
        return np.eye(3)
    return _rodrigues(p / np.linalg.norm(p), 2.0 * np.pi * k / n_axial)


@dataclass
class RotationGrid:
    rotations: np.ndarray  # [n_dirs * n_axial, 3, 3]
    n_dirs: int
    n_axial: int
    seed: int = 0

    def __len__(self):
        return len(self.rotations)

    def subset(self, index) -> "RotationGrid":
        """Sub-grid (orientation slab); shape fields become (len, 1)."""
        rots = self.rotations[index]
        return RotationGrid(rots, len(rots), 1, self.seed)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = [f"DNGRID v1 {self.n_dirs} {self.n_axial} {self.seed}"]
        for r in self.rotations:
            lines.append(" ".join(f"{v:.17g}" for v in r.ravel()))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RotationGrid":
        lines = text.splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 5 or head[:2] != ["DNGRID", "v1"]:
            raise MalformedRecord("missing 'DNGRID v1 n_dirs n_axial seed' header", line=1)
        n_dirs, n_axial, seed = (int(t) for t in head[2:])
        n = n_dirs * n_axial
        if len(lines) - 1 < n:
            raise MalformedRecord(f"expected {n} rotations, found {len(lines) - 1}", line=len(lines))
        rots = np.empty((n, 3, 3))
        for i in range(n):
            vals = lines[1 + i].split()
            if len(vals) != 9:
                raise MalformedRecord("expected 9 values", line=2 + i)
            rots[i] = np.array([float(v) for v in vals]).reshape(3, 3)
        return cls(rots, n_dirs, n_axial, seed)

    @classmethod
    def load(cls, path) -> "RotationGrid":
        return cls.from_text(Path(path).read_text())


def build_grid(points, n_axial: int, seed: int = 0) -> RotationGrid:
    if n_axial < 1:
        raise ValueError("n_axial must be >= 1")
    pts = points.points if isinstance(points, SpherePointSet) else np.asarray(points, float)
    rots = np.empty((len(pts) * n_axial, 3, 3))
    for j, p in enumerate(pts):
        base = rotation_to_direction(p)
        for k in range(n_axial):
            rots[j * n_axial + k] = axial_rotation(p, k, n_axial) @ base
    return RotationGrid(rots, len(pts), n_axial, seed)


def make_grid(n_dirs: int = 64, n_axial: int = 10, seed: int = 0, iters: int = 2000) -> RotationGrid:
    """Thomson directions + axial spins; ``n_dirs == 1`` gives the +z direction."""
    if n_dirs == 1:
        return build_grid(Z_AXIS[None], n_axial, seed)
    return build_grid(thomson_points(n_dirs, seed, iters), n_axial, seed)


def identity_grid() -> RotationGrid:
    return RotationGrid(np.eye(3)[None], 1, 1, 0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
