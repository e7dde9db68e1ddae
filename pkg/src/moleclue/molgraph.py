"""Molecule graphs, conformers, dataset ingestion and the synthetic task."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BOND_TYPES = ("single", "double", "triple", "aromatic")
BOND_INDEX = {name: i for i, name in enumerate(BOND_TYPES)}

# element codes with their own embedding row; anything else shares the last row
ELEMENTS = (1, 5, 6, 7, 8, 9, 14, 15, 16, 17, 35, 53)
ELEMENT_INDEX = {z: i for i, z in enumerate(ELEMENTS)}
N_ELEMENT_ROWS = len(ELEMENTS) + 1


class DatasetError(ValueError):
    pass


def element_row(code: int) -> int:
    return ELEMENT_INDEX.get(int(code), len(ELEMENTS))


def _is_connected(n: int, bonds) -> bool:
    if n <= 1:
        return True
    adj = [[] for _ in range(n)]
    for i, j, _ in bonds:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


@dataclass(frozen=True)
class MoleculeGraph:
    id: str
    atom_types: tuple[int, ...]
    bonds: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "atom_types", tuple(int(a) for a in self.atom_types))
        object.__setattr__(self, "bonds", tuple((int(i), int(j), str(t)) for i, j, t in self.bonds))
        n = len(self.atom_types)
        if n == 0:
            raise DatasetError(f"{self.id}: molecule has no atoms")
        seen = set()
        for i, j, t in self.bonds:
            if not (0 <= i < n and 0 <= j < n):
                raise DatasetError(f"{self.id}: bond ({i}, {j}) references a missing atom")
            if i == j:
                raise DatasetError(f"{self.id}: self-bond on atom {i}")
            if t not in BOND_INDEX:
                raise DatasetError(f"{self.id}: unknown bond type {t!r}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DatasetError(f"{self.id}: duplicate bond {key}")
            seen.add(key)
        if not _is_connected(n, self.bonds):
            raise DatasetError(f"{self.id}: graph is disconnected")

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)


@dataclass(frozen=True)
class Conformer:
    graph_id: str
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DatasetError(f"{self.graph_id}: positions must be n x 3, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise DatasetError(f"{self.graph_id}: non-finite coordinate")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NormalizationConstants:
    centroid: np.ndarray
    scale: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")


@dataclass(frozen=True)
class LabeledExample:
    graph: MoleculeGraph
    conformer: Conformer
    label: float
    split: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.label):
            raise DatasetError(f"{self.graph.id}: non-finite label")
        if self.conformer.n_atoms != self.graph.n_atoms:
            raise DatasetError(
                f"{self.graph.id}: {self.conformer.n_atoms} positions for {self.graph.n_atoms} atoms")

    @property
    def id(self) -> str:
        return self.graph.id


# ---------------------------------------------------------------- file ingestion


def _record_to_example(rec: dict, k: int) -> LabeledExample:
    try:
        gid = str(rec["id"])
        graph = MoleculeGraph(gid, rec["atoms"], [tuple(b) for b in rec["bonds"]])
        conf = Conformer(gid, rec["positions"])
        return LabeledExample(graph, conf, float(rec["label"]), rec.get("split"))
    except KeyError as e:
        raise DatasetError(f"record {k}: missing field {e}") from None
    except (TypeError, ValueError) as e:
        raise DatasetError(f"record {k}: {e}") from None


def parse_dataset(path: str | Path) -> list[LabeledExample]:
    """Read a JSON list of molecule records; see docs/dataset_schema.json."""
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise DatasetError("dataset file must hold a top-level list")
    out, ids = [], set()
    for k, rec in enumerate(records):
        ex = _record_to_example(rec, k)
        if ex.id in ids:
            raise DatasetError(f"record {k}: duplicate id {ex.id!r}")
        ids.add(ex.id)
        out.append(ex)
    return out


def example_to_record(ex: LabeledExample) -> dict:
    rec = {
        "id": ex.id,
        "atoms": list(ex.graph.atom_types),
        "bonds": [[i, j, t] for i, j, t in ex.graph.bonds],
        "positions": ex.conformer.positions.tolist(),
        "label": ex.label,
    }
    if ex.split is not None:
        rec["split"] = ex.split
    return rec


def write_dataset(path: str | Path, examples: Sequence[LabeledExample]):
    with open(path, "w") as fh:
        json.dump([example_to_record(e) for e in examples], fh)


# ---------------------------------------------------------------- geometry


def normalize_positions(c: Conformer) -> tuple[Conformer, NormalizationConstants]:
    pos = c.positions
    centroid = pos.mean(axis=0)
    centered = pos - centroid
    degenerate = False
    if pos.shape[0] == 1:
        scale = 1.0
    else:
        scale = float(np.sqrt((centered ** 2).sum(axis=1).mean()))
        if scale < 1e-12:
            scale, degenerate = 1.0, True
    return (Conformer(c.graph_id, centered / scale),
            NormalizationConstants(centroid, scale, degenerate))


def denormalize_positions(c: Conformer, norm: NormalizationConstants) -> Conformer:
    return Conformer(c.graph_id, c.positions * norm.scale + norm.centroid)


def contaminate(c: Conformer, tau: float, seed: int) -> Conformer:
    """Add isotropic Gaussian noise of std ``tau`` (Angstrom) to every coordinate."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if tau == 0:
        return c
    rng = np.random.default_rng(seed)
    return Conformer(c.graph_id, c.positions + tau * rng.standard_normal(c.positions.shape))


def _positions(x) -> np.ndarray:
    return x.positions if isinstance(x, Conformer) else np.asarray(x, dtype=np.float64)


def distance_dx(a, b) -> float:
    """Mean over atoms of squared displacement; no rotational alignment."""
    pa, pb = _positions(a), _positions(b)
    if pa.shape != pb.shape:
        raise ValueError(f"distance_dx: atom count mismatch {pa.shape} vs {pb.shape}")
    return float(((pa - pb) ** 2).sum(axis=1).mean())


def rmsd(a, b) -> float:
    return math.sqrt(distance_dx(a, b))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------- synthetic task

ELEMENT_POOL = (6, 7, 8, 16)
BOND_LENGTH = {"single": 1.52, "double": 1.34, "triple": 1.20, "aromatic": 1.40}
# pairwise Gaussian label terms: (weight, centre in A, width in A)
LABEL_TERMS = ((1.0, 2.5, 0.5), (-0.6, 3.8, 0.7))


def synthetic_label(positions: np.ndarray) -> float:
    """Per-atom sum of pairwise distance Gaussians; depends only on distances."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)[iu]
    total = sum(w * np.exp(-(d - mu) ** 2 / (2 * s * s)).sum() for w, mu, s in LABEL_TERMS)
    return float(total / n)


def _grow_molecule(rng: np.random.Generator, n: int):
    codes = rng.choice(ELEMENT_POOL, size=min(n, int(rng.integers(2, 5))), replace=False)
    # every drawn element appears at least once
    atoms = [int(c) for c in codes] + [int(rng.choice(codes)) for _ in range(n - len(codes))]
    atoms = [atoms[i] for i in rng.permutation(n)]
    pos = [np.zeros(3)]
    bonds = []
    degree = [0] * n
    incoming = [None] * n  # unit vector of the bond that created each atom
    for k in range(1, n):
        for _ in range(50):
            if rng.random() < 0.7 or k == 1:
                parent = k - 1
            else:
                parent = int(rng.integers(0, k))
            if degree[parent] < 4:
                break
        btype = str(rng.choice(BOND_TYPES, p=(0.6, 0.15, 0.05, 0.2)))
        length = float(np.clip(BOND_LENGTH[btype] + rng.normal(0, 0.05), 1.0, 1.8))
        placed = None
        for _ in range(100):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            prev = incoming[parent]
            if prev is not None:
                # bond angle near 115 degrees with jitter
                cosang = math.cos(math.radians(180 - rng.normal(115, 8)))
                perp = d - d.dot(prev) * prev
                if np.linalg.norm(perp) < 1e-6:
                    continue
                perp /= np.linalg.norm(perp)
                d = cosang * prev + math.sqrt(1 - cosang ** 2) * perp
            cand = pos[parent] + length * d
            if min(np.linalg.norm(cand - p) for p in pos) >= 1.0 - 1e-9 and all(
                    np.linalg.norm(cand - p) > 1.9 for i, p in enumerate(pos) if i != parent):
                placed = cand
                break
        if placed is None:
            placed = cand
        pos.append(placed)
        incoming[k] = (placed - pos[parent]) / np.linalg.norm(placed - pos[parent])
        bonds.append((parent, k, btype))
        degree[parent] += 1
        degree[k] += 1
    return atoms, bonds, np.array(pos)


def make_synthetic_dataset(n_molecules: int, seed: int, label_noise: float = 0.0,
                           min_atoms: int = 4, max_atoms: int = 16,
                           prefix: str = "syn") -> list[LabeledExample]:
    if n_molecules < 1:
        raise ValueError("n_molecules must be >= 1")
    rng = np.random.default_rng(seed)
    width = len(str(n_molecules - 1))
    out = []
    for k in range(n_molecules):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        atoms, bonds, pos = _grow_molecule(rng, n)
        pos = pos @ random_rotation(rng).T + rng.normal(0, 2.0, size=3)
        label = synthetic_label(pos)
        if label_noise > 0:
            label += float(rng.normal(0, label_noise))
        gid = f"{prefix}-{k:0{width}d}"
        out.append(LabeledExample(MoleculeGraph(gid, atoms, bonds), Conformer(gid, pos), label))
    return out


def train_test_split(examples: Sequence[LabeledExample], test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Honor per-record split fields when every record has one, else shuffle."""
    if examples and all(e.split in ("train", "test") for e in examples):
        return ([e for e in examples if e.split == "train"],
                [e for e in examples if e.split == "test"])
    order = np.random.default_rng(seed).permutation(len(examples))
    n_test = max(1, int(round(test_fraction * len(examples)))) if len(examples) > 1 else 0
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return [examples[i] for i in train], [examples[i] for i in test]
