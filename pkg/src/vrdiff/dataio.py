"""Complex dataset format, filtering rules and the synthetic generator.

Datasets are line-delimited JSON, one receptor-ligand complex per line;
the field-by-field layout is documented in the README. Receptor atoms are
one C-alpha per residue; ligand atom types are element letters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import FormatError, ShapeError
from .geometry import AtomCloud

LIGAND_ELEMENTS = ("C", "N", "O", "F")
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
MAX_LIGAND_ATOMS = 30
DUPLICATE_TOL = 1e-3  # angstroms


def ligand_onehot(types: Iterable[str]) -> np.ndarray:
    """4-channel one-hot over C/N/O/F; unknown elements get an all-zero row
    (they only survive until filter_records)."""
    types = list(types)
    feat = np.zeros((len(types), len(LIGAND_ELEMENTS)))
    for i, t in enumerate(types):
        if t in LIGAND_ELEMENTS:
            feat[i, LIGAND_ELEMENTS.index(t)] = 1.0
    return feat


def residue_onehot(residue_types: Iterable[str]) -> np.ndarray:
    rt = list(residue_types)
    feat = np.zeros((len(rt), len(AMINO_ACIDS)))
    for i, r in enumerate(rt):
        idx = AMINO_ACIDS.find(r)
        if idx < 0:
            raise FormatError(f"unknown residue letter {r!r}")
        feat[i, idx] = 1.0
    return feat


@dataclass(frozen=True)
class ComplexRecord:
    id: str
    receptor: AtomCloud
    ligand: AtomCloud
    ligand_types: tuple[str, ...]

    def __post_init__(self):
        if len(self.ligand) < 1:
            raise ShapeError(f"record {self.id}: empty ligand")
        if len(self.receptor) < 1:
            raise ShapeError(f"record {self.id}: empty receptor")
        if len(self.ligand_types) != len(self.ligand):
            raise ShapeError(f"record {self.id}: ligand type count mismatch")


def make_record(id: str, receptor_pos, residue_index, residue_types: str, ligand_pos, ligand_types: str) -> ComplexRecord:
    receptor = AtomCloud(
        positions=np.asarray(receptor_pos, dtype=float),
        features=residue_onehot(residue_types),
        residue_index=np.asarray(residue_index, dtype=int),
        residue_types=tuple(residue_types),
    )
    ligand = AtomCloud(
        positions=np.asarray(ligand_pos, dtype=float),
        features=ligand_onehot(ligand_types),
    )
    return ComplexRecord(
        id=id, receptor=receptor, ligand=ligand, ligand_types=tuple(ligand_types)
    )


def _record_to_json(rec: ComplexRecord) -> dict:
    return {
        "id": rec.id,
        "receptor": {
            "positions": rec.receptor.positions.tolist(),
            "residue_index": rec.receptor.residue_index.tolist(),
            "residue_types": "".join(rec.receptor.residue_types),
        },
        "ligand": {
            "positions": rec.ligand.positions.tolist(),
            "types": "".join(rec.ligand_types),
        },
    }


def save_dataset(records: list[ComplexRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_record_to_json(rec)) + "\n")


def load_dataset(path) -> list[ComplexRecord]:
    """Parse and validate; malformed lines are reported with their number."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = make_record(
                    id=str(obj["id"]),
                    receptor_pos=obj["receptor"]["positions"],
                    residue_index=obj["receptor"]["residue_index"],
                    residue_types=obj["receptor"]["residue_types"],
                    ligand_pos=obj["ligand"]["positions"],
                    ligand_types=obj["ligand"]["types"],
                )
            except (KeyError, TypeError, ValueError, ShapeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def filter_records(records: list[ComplexRecord]):
    """Apply the training-set rules; returns (kept, [(id, reason), ...]).

    Kept records have <= 30 ligand atoms, all types in C/N/O/F, and no two
    ligand atoms closer than 1e-3 angstroms. Idempotent.
    """
    kept, rejected = [], []
    for rec in records:
        reason = _reject_reason(rec)
        if reason is None:
            kept.append(rec)
        else:
            rejected.append((rec.id, reason))
    return kept, rejected


def _reject_reason(rec: ComplexRecord):
    if len(rec.ligand) > MAX_LIGAND_ATOMS:
        return f"more than {MAX_LIGAND_ATOMS} ligand atoms"
    bad = sorted({t for t in rec.ligand_types if t not in LIGAND_ELEMENTS})
    if bad:
        return f"atom type not in CNOF: {','.join(bad)}"
    pos = rec.ligand.positions
    if len(pos) > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        d = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(d, np.inf)
        if d.min() < DUPLICATE_TOL:
            return "duplicate vertices"
    return None


@dataclass
class SynthConfig:
    n_records: int = 8
    pocket_size: int = 100
    pocket_radius: float = 9.0
    ligand_mean: float = 19.0
    ligand_std: float = 6.8
    ligand_min: int = 4
    ligand_max: int = 30
    ligand_spread: float = 2.0


def synth_generate(cfg: SynthConfig, seed: int) -> list[ComplexRecord]:
    """Deterministic synthetic complexes.

    Pockets are jittered spherical shells of C-alpha-like points; ligands
    are clustered point sets near the pocket center with ligand sizes
    drawn from a clamped normal (mean 19.0, sd 6.8, clamped to [4, 30]).
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(cfg.n_records):
        dirs = rng.normal(size=(cfg.pocket_size, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = cfg.pocket_radius * (1.0 + rng.uniform(-0.15, 0.15, size=cfg.pocket_size))
        pocket_pos = dirs * radii[:, None]
        residue_types = "".join(rng.choice(list(AMINO_ACIDS), size=cfg.pocket_size))

        n_lig = int(
            round(
                float(
                    np.clip(
                        rng.normal(cfg.ligand_mean, cfg.ligand_std),
                        cfg.ligand_min,
                        cfg.ligand_max,
                    )
                )
            )
        )
        center = rng.normal(size=3)
        if np.linalg.norm(center) > 3.0:
            center *= 3.0 / np.linalg.norm(center)
        lig_pos = np.empty((n_lig, 3))
        placed = 0
        while placed < n_lig:
            cand = center + rng.normal(scale=cfg.ligand_spread, size=3)
            if placed == 0 or np.linalg.norm(lig_pos[:placed] - cand, axis=1).min() > 0.05:
                lig_pos[placed] = cand
                placed += 1
        lig_types = "".join(rng.choice(list(LIGAND_ELEMENTS), size=n_lig))

        records.append(
            make_record(
                id=f"synth-{seed}-{i:05d}",
                receptor_pos=pocket_pos,
                residue_index=np.arange(cfg.pocket_size),
                residue_types=residue_types,
                ligand_pos=lig_pos,
                ligand_types=lig_types,
            )
        )
    return records
