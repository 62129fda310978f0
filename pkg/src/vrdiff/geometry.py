"""Atom clouds, rigid transforms, pocket selection and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class AtomCloud:
    """Positions (n, 3) in angstroms plus one feature vector per atom.

    ``residue_index`` / ``residue_types`` are carried for receptor clouds
    (one C-alpha per residue) and stay None for ligands.
    """

    positions: np.ndarray
    features: np.ndarray
    residue_index: Optional[np.ndarray] = None
    residue_types: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        feat = np.asarray(self.features, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"positions must be (n, 3), got {pos.shape}")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ShapeError(f"features must be (n, d), got {feat.shape} for n={pos.shape[0]}")
        if not np.isfinite(pos).all() or not np.isfinite(feat).all():
            raise ShapeError("non-finite entries in cloud")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        if self.residue_index is not None:
            ri = np.asarray(self.residue_index, dtype=int)
            if ri.shape != (pos.shape[0],):
                raise ShapeError("residue_index length must match atom count")
            object.__setattr__(self, "residue_index", ri)
        if self.residue_types is not None and len(self.residue_types) != pos.shape[0]:
            raise ShapeError("residue_types length must match atom count")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def take(self, idx: Sequence[int]) -> "AtomCloud":
        idx = np.asarray(idx, dtype=int)
        return AtomCloud(
            positions=self.positions[idx],
            features=self.features[idx],
            residue_index=None if self.residue_index is None else self.residue_index[idx],
            residue_types=None
            if self.residue_types is None
            else tuple(self.residue_types[i] for i in idx),
        )

    def with_positions(self, positions: np.ndarray) -> "AtomCloud":
        return replace(self, positions=np.asarray(positions, dtype=float))

    def with_features(self, features: np.ndarray) -> "AtomCloud":
        return replace(self, features=np.asarray(features, dtype=float))


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + b with R orthogonal (rotation or roto-reflection)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError("rotation must be (3, 3), translation (3,)")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise ShapeError("rotation matrix is not orthogonal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )


def random_rigid_transform(rng: np.random.Generator, allow_reflection: bool = True) -> RigidTransform:
    """Haar-ish random orthogonal matrix via QR plus a random translation."""
    a = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if allow_reflection and rng.random() < 0.5:
        q[:, 0] = -q[:, 0]
    elif not allow_reflection and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return RigidTransform(rotation=q, translation=rng.normal(scale=5.0, size=3))


def apply_transform(cloud: AtomCloud, g: RigidTransform) -> AtomCloud:
    """Map positions x -> R x + b; features ride along unchanged."""
    return cloud.with_positions(g.apply(cloud.positions))


def farthest_point_sample(cloud: AtomCloud, k: int) -> list[int]:
    """Greedy max-min downsampling.

    Starts from the atom nearest the centroid; each subsequent pick maximizes
    the minimum distance to everything selected so far. Ties go to the
    lowest original index, so the result is deterministic.
    """
    n = len(cloud)
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} outside [1, {n}]")
    pos = cloud.positions
    centroid = pos.mean(axis=0)
    first = int(np.argmin(_dist(pos, centroid)))
    selected = [first]
    min_d = _dist(pos, pos[first])
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d))
        selected.append(nxt)
        min_d = np.minimum(min_d, _dist(pos, pos[nxt]))
    return selected


def _dist(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points - ref, axis=1)


def select_pocket(receptor: AtomCloud, site_center, count: int = 100) -> AtomCloud:
    """The ``count`` atoms nearest ``site_center`` in original relative order."""
    if len(receptor) == 0:
        raise ShapeError("receptor is empty")
    center = np.asarray(site_center, dtype=float)
    d = _dist(receptor.positions, center)
    count = min(count, len(receptor))
    # argsort is stable, so equidistant atoms keep index order
    chosen = np.sort(np.argsort(d, kind="stable")[:count])
    return receptor.take(chosen)


def center_complex(receptor: AtomCloud, ligand: AtomCloud):
    """Translate both clouds so the receptor centroid sits at the origin.

    Returns (receptor', ligand', offset) where adding ``offset`` back
    restores the original frame.
    """
    if len(receptor) == 0:
        raise ShapeError("receptor is empty")
    offset = receptor.positions.mean(axis=0)
    return (
        receptor.with_positions(receptor.positions - offset),
        ligand.with_positions(ligand.positions - offset),
        offset,
    )
