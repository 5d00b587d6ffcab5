"""Dataset pipeline: preprocessing, toy molecule generation and file formats.

The on-disk dataset is a directory holding a JSON index (record count,
vocabularies, normalisation scale, format version, per-record checksums) and
one little-endian binary record per molecule. SDF (V2000) import/export and a
plain XYZ writer cover interchange with other tools.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    MolecularGraph,
    TrainingTuple,
    Vocabularies,
    validate_graph,
    zero_center,
)

DATASET_FORMAT_VERSION = 1
RECORD_MAGIC = b"CFLW"

TOY_VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2}
TOY_BOND_LENGTH = {
    ("C", "C"): 1.54, ("C", "N"): 1.47, ("C", "O"): 1.43,
    ("N", "N"): 1.45, ("N", "O"): 1.40, ("O", "O"): 1.48,
    ("C", "H"): 1.09, ("N", "H"): 1.01, ("O", "H"): 0.96,
}
TETRAHEDRAL_ANGLE = math.radians(109.47)


def toy_vocab() -> Vocabularies:
    return Vocabularies(atom_types=("H", "C", "N", "O"))


def _bond_length(a: str, b: str) -> float:
    return TOY_BOND_LENGTH.get((a, b)) or TOY_BOND_LENGTH[(b, a)]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def select_representative(conformers: Sequence[np.ndarray]) -> int:
    """Index of the conformer closest to the ensemble mean (ties: lowest index)."""
    stack = np.stack(conformers)  # (m, n, 3)
    mean = stack.mean(axis=0)
    costs = ((stack - mean[None]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(costs))


def build_training_tuples(graph: MolecularGraph) -> list[TrainingTuple]:
    """One tuple per conformer, the representative paired with itself included."""
    x = graph.representative
    return [
        TrainingTuple(
            atom_idx=graph.atom_idx,
            charge_idx=graph.charge_idx,
            bonds=graph.bonds,
            x=x,
            y=conf,
        )
        for conf in graph.conformers
    ]


def compute_scale(graphs: Iterable[MolecularGraph]) -> float:
    """Pooled standard deviation of every coordinate component in the split."""
    flat = np.concatenate(
        [conf.ravel() for g in graphs for conf in g.conformers]
    )
    scale = float(flat.std())
    if not np.isfinite(scale) or scale <= 0.0:
        raise ValueError(f"degenerate coordinate scale {scale}")
    return scale


def preprocess(
    graphs: Sequence[MolecularGraph],
    vocab: Vocabularies,
) -> tuple[list[MolecularGraph], float]:
    """Center every conformer, normalise by the pooled std, pick representatives.

    Returns new graphs (inputs are not mutated) and the scale that was divided
    out; multiply model-space coordinates by it to get back to angstroms.
    """
    if len(graphs) == 0:
        raise ValueError("cannot preprocess an empty dataset")
    centered = []
    for i, g in enumerate(graphs):
        errs = validate_graph(g, vocab)
        if errs:
            raise ValueError(f"graph {i} is invalid: {errs[0]}")
        gc = g.copy()
        gc.conformers = [zero_center(c) for c in gc.conformers]
        centered.append(gc)
    scale = compute_scale(centered)
    for gc in centered:
        gc.conformers = [c / scale for c in gc.conformers]
        gc.representative_index = select_representative(gc.conformers)
    return centered, scale


# ---------------------------------------------------------------------------
# Toy molecule generator
# ---------------------------------------------------------------------------

# The first ten templates are water plus the C1-C5 alkanes and C3-C6
# cycloalkanes, giving ten distinct sizes. Keeping heavy atoms to carbon
# (oxygen only in water, where the size alone forces it) is deliberate:
# element bond-length differences are far smaller than the interpolant noise,
# so a sampler cannot see heteroatom identity in the geometry mid-trajectory
# and tends to keep whatever element an early categorical resample guessed.
# Mixed-element template sets therefore fail exact graph recovery on element
# flips long before bond topology becomes the bottleneck; an alkane ladder
# removes the guess entirely. Chains of two or more heavy atoms carry
# rotatable torsions; rings and single-heavy-atom molecules are rigid.
_TOY_TEMPLATES = [
    ("chain", "O"), ("chain", "C"), ("chain", "CC"), ("ring", "CCC"),
    ("chain", "CCC"), ("ring", "CCCC"), ("chain", "CCCC"),
    ("ring", "CCCCC"), ("chain", "CCCCC"), ("ring", "CCCCCC"),
]


def _orthonormal_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``u`` to a right-handed frame."""
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    v = np.cross(u, ref)
    v /= np.linalg.norm(v)
    w = np.cross(u, v)
    return v, w


def _tetrahedral_directions(existing: list[np.ndarray], count: int, azimuth: float) -> list[np.ndarray]:
    """Unit vectors filling the remaining tetrahedral slots around an atom."""
    if count == 0:
        return []
    if len(existing) == 1:
        u = existing[0]
        v, w = _orthonormal_frame(u)
        out = []
        for k in range(count):
            phi = azimuth + 2.0 * math.pi * k / 3.0
            d = math.cos(TETRAHEDRAL_ANGLE) * u + math.sin(TETRAHEDRAL_ANGLE) * (
                math.cos(phi) * v + math.sin(phi) * w
            )
            out.append(d / np.linalg.norm(d))
        return out
    if len(existing) == 2:
        bis = -(existing[0] + existing[1])
        bis /= np.linalg.norm(bis)
        perp = np.cross(existing[0], existing[1])
        nrm = np.linalg.norm(perp)
        if nrm < 1e-8:  # collinear neighbours; fall back to any perpendicular
            perp, _ = _orthonormal_frame(existing[0])
        else:
            perp = perp / nrm
        half = TETRAHEDRAL_ANGLE / 2.0
        cands = [
            math.cos(half) * bis + math.sin(half) * perp,
            math.cos(half) * bis - math.sin(half) * perp,
        ]
        return [c / np.linalg.norm(c) for c in cands[:count]]
    if len(existing) >= 3:
        d = -sum(existing)
        d = d / np.linalg.norm(d)
        return [d][:count]
    # isolated atom: fixed tetrahedral frame
    base = [
        np.array([1.0, 1.0, 1.0]), np.array([1.0, -1.0, -1.0]),
        np.array([-1.0, 1.0, -1.0]), np.array([-1.0, -1.0, 1.0]),
    ]
    return [b / np.linalg.norm(b) for b in base[:count]]


def _place_chain(elements: Sequence[str], torsions: Sequence[float]) -> np.ndarray:
    """Backbone coordinates with fixed lengths, tetrahedral angles, given torsions."""
    k = len(elements)
    coords = np.zeros((k, 3))
    if k >= 2:
        coords[1] = [_bond_length(elements[0], elements[1]), 0.0, 0.0]
    for i in range(2, k):
        length = _bond_length(elements[i - 1], elements[i])
        torsion = torsions[i - 3] if i >= 3 else 0.0
        # Natural extension frame from the three previous atoms (or a fixed
        # in-plane direction for the third atom).
        b1 = coords[i - 1] - coords[i - 2]
        b1 /= np.linalg.norm(b1)
        if i == 2:
            ref = np.array([0.0, 1.0, 0.0])
        else:
            b0 = coords[i - 2] - coords[i - 3]
            ref = b0 - np.dot(b0, b1) * b1
            nrm = np.linalg.norm(ref)
            ref = ref / nrm if nrm > 1e-8 else _orthonormal_frame(b1)[0]
        side = np.cross(b1, ref)
        # torsion 0 is the extended (anti) arrangement in this frame
        d = (
            math.cos(TETRAHEDRAL_ANGLE) * (-b1)
            + math.sin(TETRAHEDRAL_ANGLE) * (math.cos(torsion) * ref + math.sin(torsion) * side)
        )
        coords[i] = coords[i - 1] + length * d
    return coords


def _embed_toy(
    kind: str,
    elements: Sequence[str],
    rng: np.random.Generator,
    n_conformers: int,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Bond matrix over heavy atoms plus conformer coordinates with hydrogens.

    Returns (heavy_bonds, conformers); hydrogens are appended after the heavy
    atoms, grouped by parent, and their count is implied by the valence table.
    """
    k = len(elements)
    heavy_bonds = np.zeros((k, k), dtype=np.int64)
    if kind == "chain":
        for i in range(k - 1):
            heavy_bonds[i, i + 1] = heavy_bonds[i + 1, i] = 1
    else:  # ring
        for i in range(k):
            j = (i + 1) % k
            heavy_bonds[i, j] = heavy_bonds[j, i] = 1

    conformers = []
    for _ in range(n_conformers):
        if kind == "chain":
            torsions = [
                rng.choice([0.0, 2.0 * math.pi / 3.0, -2.0 * math.pi / 3.0])
                + rng.uniform(-0.25, 0.25)
                for _ in range(max(0, k - 3))
            ]
            heavy = _place_chain(elements, torsions)
        else:
            radius = _bond_length("C", "C") / (2.0 * math.sin(math.pi / k))
            theta = 2.0 * math.pi * np.arange(k) / k
            heavy = np.stack(
                [radius * np.cos(theta), radius * np.sin(theta), np.zeros(k)], axis=1
            )
            heavy = heavy + np.stack(
                [np.zeros(k), np.zeros(k), rng.normal(0.0, 0.03, size=k)], axis=1
            )
        # hydrogens, one group per heavy atom
        h_coords = []
        for i, el in enumerate(elements):
            n_h = TOY_VALENCE[el] - int(heavy_bonds[i].sum())
            if n_h <= 0:
                continue
            neigh_dirs = []
            for j in np.nonzero(heavy_bonds[i])[0]:
                d = heavy[j] - heavy[i]
                neigh_dirs.append(d / np.linalg.norm(d))
            azimuth = rng.uniform(0.0, 2.0 * math.pi)
            for d in _tetrahedral_directions(neigh_dirs, n_h, azimuth):
                h_coords.append(heavy[i] + _bond_length(el, "H") * d)
        coords = np.vstack([heavy] + ([np.stack(h_coords)] if h_coords else []))
        conformers.append(coords)
    return heavy_bonds, conformers


def generate_toy_dataset(
    n_molecules: int,
    seed: int,
    n_conformers: int = 5,
) -> tuple[list[MolecularGraph], Vocabularies]:
    """Procedural valence-correct chains and rings over {H, C, N, O}.

    Deterministic for a given seed. Conformers of one molecule share the graph
    and differ by torsion rotations (plus ring pucker noise), so molecules with
    a rotatable bond have genuinely diverse ensembles.
    """
    vocab = toy_vocab()
    rng = np.random.default_rng(seed)
    graphs: list[MolecularGraph] = []
    for idx in range(n_molecules):
        if idx < len(_TOY_TEMPLATES):
            kind, spec = _TOY_TEMPLATES[idx]
        elif rng.random() < 0.25:
            kind, spec = "ring", "C" * int(rng.integers(3, 7))
        else:
            length = int(rng.integers(2, 7))
            spec = "".join(rng.choice(["C", "C", "C", "N", "O"]) for _ in range(length))
            kind = "chain"
        elements = list(spec)
        heavy_bonds, conformers = _embed_toy(kind, elements, rng, n_conformers)

        k = len(elements)
        n_h = [TOY_VALENCE[el] - int(heavy_bonds[i].sum()) for i, el in enumerate(elements)]
        n = k + sum(max(h, 0) for h in n_h)
        bonds = np.zeros((n, n), dtype=np.int64)
        bonds[:k, :k] = heavy_bonds
        symbols = elements[:]
        cursor = k
        for i in range(k):
            for _ in range(max(n_h[i], 0)):
                bonds[i, cursor] = bonds[cursor, i] = 1
                symbols.append("H")
                cursor += 1
        atom_idx = np.array([vocab.atom_index(s) for s in symbols], dtype=np.int64)
        charge_idx = np.full(n, vocab.charge_index(0), dtype=np.int64)
        graph = MolecularGraph(
            atom_idx=atom_idx,
            charge_idx=charge_idx,
            bonds=bonds,
            conformers=conformers,
            representative_index=select_representative(conformers),
        )
        graphs.append(graph)
    return graphs, vocab


def rotatable_bonds(graph: MolecularGraph, vocab: Vocabularies) -> list[tuple[int, int]]:
    """Non-ring single bonds between heavy atoms that can carry a torsion.

    Both endpoints must have at least one further neighbour, so rotating the
    bond actually moves atoms (hydrogen rotors count).
    """
    h_idx = vocab.atom_index("H") if "H" in vocab.atom_types else -1
    n = graph.n
    adj = [set(np.nonzero(graph.bonds[i])[0].tolist()) for i in range(n)]

    def connected_without(i: int, j: int) -> bool:
        seen = {i}
        stack = [i]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if (u, v) in ((i, j), (j, i)):
                    continue
                if v not in seen:
                    if v == j:
                        return True
                    seen.add(v)
                    stack.append(v)
        return False

    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if graph.bonds[i, j] != 1:
                continue
            if graph.atom_idx[i] == h_idx or graph.atom_idx[j] == h_idx:
                continue
            if len(adj[i]) < 2 or len(adj[j]) < 2:
                continue
            if connected_without(i, j):  # part of a ring
                continue
            out.append((i, j))
    return out


def has_rotatable_torsion(graph: MolecularGraph, vocab: Vocabularies) -> bool:
    return len(rotatable_bonds(graph, vocab)) > 0


# ---------------------------------------------------------------------------
# Binary dataset directory
# ---------------------------------------------------------------------------

def _encode_record(graph: MolecularGraph) -> bytes:
    n, m = graph.n, graph.m
    head = struct.pack(
        "<4sIIII", RECORD_MAGIC, DATASET_FORMAT_VERSION, n, m, graph.representative_index
    )
    body = [
        head,
        graph.atom_idx.astype("<u1").tobytes(),
        graph.charge_idx.astype("<u1").tobytes(),
        graph.bonds.astype("<u1").tobytes(),
    ]
    for conf in graph.conformers:
        body.append(np.ascontiguousarray(conf, dtype="<f4").tobytes())
    return b"".join(body)


def _decode_record(blob: bytes) -> MolecularGraph:
    magic, version, n, m, rep = struct.unpack_from("<4sIIII", blob, 0)
    if magic != RECORD_MAGIC:
        raise ValueError("bad record magic; not a dataset record")
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported record version {version}")
    off = struct.calcsize("<4sIIII")
    atom = np.frombuffer(blob, dtype="<u1", count=n, offset=off).astype(np.int64)
    off += n
    charge = np.frombuffer(blob, dtype="<u1", count=n, offset=off).astype(np.int64)
    off += n
    bonds = np.frombuffer(blob, dtype="<u1", count=n * n, offset=off).astype(np.int64)
    bonds = bonds.reshape(n, n)
    off += n * n
    conformers = []
    for _ in range(m):
        coords = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off)
        conformers.append(coords.reshape(n, 3).astype(np.float64))
        off += n * 3 * 4
    if off != len(blob):
        raise ValueError(f"record has {len(blob) - off} trailing bytes")
    return MolecularGraph(
        atom_idx=atom, charge_idx=charge, bonds=bonds,
        conformers=conformers, representative_index=int(rep),
    )


def write_dataset(
    dir_path,
    graphs: Sequence[MolecularGraph],
    vocab: Vocabularies,
    scale: float = 1.0,
) -> None:
    """Write the dataset directory: index.json plus one binary record per molecule."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, g in enumerate(graphs):
        blob = _encode_record(g)
        name = f"mol_{i:05d}.bin"
        (root / name).write_bytes(blob)
        records.append({
            "file": name, "n": g.n, "m": g.m, "crc32": zlib.crc32(blob),
        })
    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "n_records": len(graphs),
        "scale": float(scale),
        "vocab": vocab.to_dict(),
        "records": records,
    }
    (root / "index.json").write_text(json.dumps(index, indent=1))


def read_dataset(dir_path) -> tuple[list[MolecularGraph], Vocabularies, float]:
    """Load a dataset directory, verifying version, record count and checksums."""
    root = Path(dir_path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no index.json under {root}")
    index = json.loads(index_path.read_text())
    if index.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {index.get('format_version')}")
    records = index["records"]
    if len(records) != index["n_records"]:
        raise ValueError(
            f"index claims {index['n_records']} records but lists {len(records)}"
        )
    vocab = Vocabularies.from_dict(index["vocab"])
    graphs = []
    for rec in records:
        blob = (root / rec["file"]).read_bytes()
        if zlib.crc32(blob) != rec["crc32"]:
            raise ValueError(f"checksum failure for {rec['file']}")
        graphs.append(_decode_record(blob))
    return graphs, vocab, float(index["scale"])


# ---------------------------------------------------------------------------
# SDF (V2000) and XYZ
# ---------------------------------------------------------------------------

_SDF_BOND_CODE = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}


def read_sdf(path, vocab: Vocabularies) -> list[MolecularGraph]:
    """Parse a V2000 SDF; consecutive records sharing a topology become one
    molecule with several conformers."""
    text = Path(path).read_text()
    chunks = [c for c in text.split("$$$$") if c.strip()]
    parsed: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    for chunk in chunks:
        lines = chunk.strip("\n").split("\n")
        counts = lines[3]
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
        symbols, coords = [], []
        for line in lines[4:4 + n_atoms]:
            coords.append([float(line[0:10]), float(line[10:20]), float(line[20:30])])
            symbols.append(line[31:34].strip())
        bonds = np.zeros((n_atoms, n_atoms), dtype=np.int64)
        for line in lines[4 + n_atoms:4 + n_atoms + n_bonds]:
            i, j, code = int(line[0:3]) - 1, int(line[3:6]) - 1, int(line[6:9])
            kind = _SDF_BOND_CODE.get(code)
            if kind is None:
                raise ValueError(f"unsupported SDF bond code {code}")
            bonds[i, j] = bonds[j, i] = vocab.bond_index(kind)
        charges = np.zeros(n_atoms, dtype=np.int64)
        for line in lines[4 + n_atoms + n_bonds:]:
            if line.startswith("M  CHG"):
                parts = line.split()
                pairs = parts[3:]
                for k in range(0, len(pairs), 2):
                    charges[int(pairs[k]) - 1] = int(pairs[k + 1])
            if line.startswith("M  END"):
                break
        atom_idx = np.array([vocab.atom_index(s) for s in symbols], dtype=np.int64)
        charge_idx = np.array([vocab.charge_index(int(c)) for c in charges], dtype=np.int64)
        parsed.append((atom_idx, charge_idx, bonds, np.array(coords)))

    graphs: list[MolecularGraph] = []
    for atom_idx, charge_idx, bonds, coords in parsed:
        if graphs:
            g = graphs[-1]
            if (
                g.n == atom_idx.shape[0]
                and np.array_equal(g.atom_idx, atom_idx)
                and np.array_equal(g.charge_idx, charge_idx)
                and np.array_equal(g.bonds, bonds)
            ):
                g.conformers.append(coords)
                continue
        graphs.append(
            MolecularGraph(
                atom_idx=atom_idx, charge_idx=charge_idx, bonds=bonds,
                conformers=[coords], representative_index=0,
            )
        )
    for g in graphs:
        g.representative_index = select_representative(g.conformers)
    return graphs


def write_sdf(path, graph: MolecularGraph, vocab: Vocabularies, name: str = "mol") -> None:
    """Write every conformer of a molecule as one V2000 record."""
    code_of = {v: k for k, v in _SDF_BOND_CODE.items()}
    out = []
    for ci, conf in enumerate(graph.conformers):
        lines = [f"{name}_conf{ci}", "  conflow", ""]
        pairs = [
            (i, j)
            for i in range(graph.n)
            for j in range(i + 1, graph.n)
            if graph.bonds[i, j] > 0
        ]
        lines.append(f"{graph.n:3d}{len(pairs):3d}  0  0  0  0  0  0  0  0999 V2000")
        for i in range(graph.n):
            sym = vocab.atom_types[graph.atom_idx[i]]
            x, y, z = conf[i]
            lines.append(
                f"{x:10.4f}{y:10.4f}{z:10.4f} {sym:<3s} 0  0  0  0  0  0  0  0  0  0  0  0"
            )
        for i, j in pairs:
            code = code_of[vocab.bond_types[graph.bonds[i, j]]]
            lines.append(f"{i + 1:3d}{j + 1:3d}{code:3d}  0")
        charged = [
            (i, vocab.charge_types[graph.charge_idx[i]])
            for i in range(graph.n)
            if vocab.charge_types[graph.charge_idx[i]] != 0
        ]
        for k in range(0, len(charged), 8):
            sub = charged[k:k + 8]
            lines.append(
                "M  CHG" + f"{len(sub):3d}"
                + "".join(f"{i + 1:4d}{c:4d}" for i, c in sub)
            )
        lines.append("M  END")
        lines.append("$$$$")
        out.append("\n".join(lines))
    Path(path).write_text("\n".join(out) + "\n")


def write_xyz(path, graph: MolecularGraph, vocab: Vocabularies, comment: str = "") -> None:
    """Write conformers as consecutive XYZ blocks."""
    blocks = []
    for ci, conf in enumerate(graph.conformers):
        lines = [str(graph.n), f"{comment} conformer {ci}".strip()]
        for i in range(graph.n):
            sym = vocab.atom_types[graph.atom_idx[i]]
            x, y, z = conf[i]
            lines.append(f"{sym} {x:.6f} {y:.6f} {z:.6f}")
        blocks.append("\n".join(lines))
    Path(path).write_text("\n".join(blocks) + "\n")


def dataset_stats(graphs: Sequence[MolecularGraph], vocab: Vocabularies) -> dict:
    """Summary used by the CLI ``dataset stats`` command."""
    sizes = [g.n for g in graphs]
    element_counts: dict[str, int] = {}
    for g in graphs:
        for a in g.atom_idx:
            sym = vocab.atom_types[int(a)]
            element_counts[sym] = element_counts.get(sym, 0) + 1
    return {
        "n_molecules": len(graphs),
        "n_conformers_total": sum(g.m for g in graphs),
        "atom_count_min": min(sizes) if sizes else 0,
        "atom_count_max": max(sizes) if sizes else 0,
        "atom_count_mean": float(np.mean(sizes)) if sizes else 0.0,
        "size_histogram": {str(s): sizes.count(s) for s in sorted(set(sizes))},
        "element_counts": element_counts,
    }
