"""Evaluation metrics for generated molecules and conformer ensembles.

Geometry metrics (RMSD, diversity, coverage) run on plain numpy arrays.
Graph metrics judge chemistry with an explicit valence table rather than an
external toolkit, so validity is reproducible and dependency-free. Energy and
strain are delegated to a pluggable oracle; when none is configured they are
reported as absent, never guessed.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import MolecularGraph, Vocabularies

BOND_ORDER = {"none": 0.0, "single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}

# (element, formal charge) -> allowed rounded bond-order sums
DEFAULT_VALENCE: dict[tuple[str, int], frozenset[int]] = {
    ("H", 0): frozenset({1}),
    ("C", 0): frozenset({4}),
    ("N", 0): frozenset({3}),
    ("N", 1): frozenset({4}),
    ("N", -1): frozenset({2}),
    ("O", 0): frozenset({2}),
    ("O", 1): frozenset({3}),
    ("O", -1): frozenset({1}),
    ("F", 0): frozenset({1}),
}

DEFAULT_COVERAGE_DELTAS = np.round(np.arange(0.0, 2.5 + 1e-9, 0.125), 6)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """RMSD between two (n, 3) point sets after optimal superposition.

    Both sets are centered, the optimal proper rotation is obtained from the
    SVD of the cross-covariance with the usual sign correction, and the RMSD
    is evaluated on the aligned pair.
    """
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"need matching (n, 3) arrays, got {a.shape} and {b.shape}")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    h = ac.T @ bc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    aligned = ac @ r.T
    return float(np.sqrt(((aligned - bc) ** 2).sum(axis=1).mean()))


def conformer_diversity(conformers: Sequence[np.ndarray]) -> float:
    """Mean nearest-neighbour RMSD within an ensemble (needs at least two members)."""
    m = len(conformers)
    if m < 2:
        raise ValueError(f"diversity needs at least 2 conformers, got {m}")
    mins = []
    for i in range(m):
        best = min(kabsch_rmsd(conformers[i], conformers[j]) for j in range(m) if j != i)
        mins.append(best)
    return float(np.mean(mins))


def coverage_metrics(
    reference: Sequence[np.ndarray],
    generated: Sequence[np.ndarray],
    deltas: Optional[np.ndarray] = None,
) -> dict:
    """Coverage and matching metrics between two conformer sets.

    Recall-side numbers ask how well the generated set covers the reference;
    precision-side numbers ask how close generated conformers stay to the
    reference set. Coverage curves are evaluated on the ``deltas`` grid (in
    the same distance units as the coordinates).
    """
    if len(reference) == 0 or len(generated) == 0:
        raise ValueError("both conformer sets must be non-empty")
    if deltas is None:
        deltas = DEFAULT_COVERAGE_DELTAS
    mat = np.array(
        [[kabsch_rmsd(r, g) for g in generated] for r in reference]
    )  # (R, G)
    ref_min = mat.min(axis=1)
    gen_min = mat.min(axis=0)
    return {
        "deltas": np.asarray(deltas, dtype=float),
        "cov_r": np.array([(ref_min <= d).mean() for d in deltas]),
        "cov_p": np.array([(gen_min <= d).mean() for d in deltas]),
        "amr_r": float(ref_min.mean()),
        "amr_p": float(gen_min.mean()),
        "rmsd_matrix": mat,
    }


# ---------------------------------------------------------------------------
# Graph quality
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def atom_stabilities(
    graph: MolecularGraph,
    vocab: Vocabularies,
    valence: Optional[dict] = None,
) -> np.ndarray:
    """Boolean per-atom flags: rounded bond-order sum allowed for (element, charge)."""
    table = DEFAULT_VALENCE if valence is None else valence
    orders = np.array([BOND_ORDER[b] for b in vocab.bond_types])
    sums = orders[graph.bonds].sum(axis=1)
    flags = np.zeros(graph.n, dtype=bool)
    for i in range(graph.n):
        key = (vocab.atom_types[int(graph.atom_idx[i])],
               vocab.charge_types[int(graph.charge_idx[i])])
        allowed = table.get(key)
        flags[i] = allowed is not None and _round_half_up(float(sums[i])) in allowed
    return flags


def is_connected(bonds: np.ndarray) -> bool:
    """Single connected component over non-'none' bonds (1-atom graphs count)."""
    n = bonds.shape[0]
    if n <= 1:
        return True
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in np.nonzero(bonds[u])[0]:
            if int(v) not in seen:
                seen.add(int(v))
                stack.append(int(v))
    return len(seen) == n


def is_valid(
    graph: MolecularGraph,
    vocab: Vocabularies,
    valence: Optional[dict] = None,
) -> bool:
    """All atoms stable and the bond graph forms one connected component."""
    return bool(atom_stabilities(graph, vocab, valence).all()) and is_connected(graph.bonds)


def graph_metrics(
    samples: Sequence[MolecularGraph],
    vocab: Vocabularies,
    train_keys: Optional[set] = None,
    valence: Optional[dict] = None,
) -> dict:
    """Aggregate sample quality: stability, validity, uniqueness, novelty.

    Uniqueness counts distinct canonical keys among the *valid* samples.
    Novelty is reported only when training-set keys are supplied.
    """
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    stable_atoms = 0
    total_atoms = 0
    stable_mols = 0
    valid_keys: list[str] = []
    for g in samples:
        flags = atom_stabilities(g, vocab, valence)
        stable_atoms += int(flags.sum())
        total_atoms += g.n
        mol_ok = bool(flags.all())
        stable_mols += int(mol_ok)
        if mol_ok and is_connected(g.bonds):
            valid_keys.append(canonical_key(g, vocab))
    unique = set(valid_keys)
    report = {
        "n_samples": len(samples),
        "atom_stability": stable_atoms / total_atoms,
        "mol_stability": stable_mols / len(samples),
        "validity": len(valid_keys) / len(samples),
        "uniqueness": (len(unique) / len(valid_keys)) if valid_keys else 0.0,
        "n_valid": len(valid_keys),
        "n_unique": len(unique),
    }
    if train_keys is not None:
        novel = {k for k in unique if k not in train_keys}
        report["novelty"] = (len(novel) / len(unique)) if unique else 0.0
        report["n_novel"] = len(novel)
    return report


# ---------------------------------------------------------------------------
# Canonical graph keys
# ---------------------------------------------------------------------------

def _refine_colors(init: list, adj: list[list[tuple[int, int]]]) -> list[int]:
    """Iterative neighbourhood refinement until the colour partition is stable."""
    n = len(init)
    palette = {c: i for i, c in enumerate(sorted(set(init)))}
    colors = [palette[c] for c in init]
    while True:
        sigs = [
            (colors[i], tuple(sorted((bond, colors[j]) for j, bond in adj[i])))
            for i in range(n)
        ]
        palette = {s: i for i, s in enumerate(sorted(set(sigs)))}
        new = [palette[s] for s in sigs]
        if new == colors:
            return colors
        colors = new


def canonical_key(graph: MolecularGraph, vocab: Vocabularies) -> str:
    """Permutation-invariant string key for a molecular graph.

    Starts from (element, charge) colours, refines by neighbourhood, and
    resolves remaining symmetry by trying each member of the first ambiguous
    colour class as an anchor (recursively) and keeping the lexicographically
    smallest serialisation.
    """
    n = graph.n
    adj = [
        [(int(j), int(graph.bonds[i, j])) for j in np.nonzero(graph.bonds[i])[0]]
        for i in range(n)
    ]
    init = [
        (int(graph.atom_idx[i]), int(graph.charge_idx[i]))
        for i in range(n)
    ]

    def serialize(order: list[int]) -> str:
        pos = {v: k for k, v in enumerate(order)}
        atoms = ",".join(
            f"{vocab.atom_types[int(graph.atom_idx[v])]}"
            f"{vocab.charge_types[int(graph.charge_idx[v])]:+d}"
            for v in order
        )
        bonds = []
        for v in order:
            for j, bond in adj[v]:
                a, b = pos[v], pos[j]
                if a < b:
                    bonds.append((a, b, bond))
        bonds.sort()
        bond_str = ",".join(f"{a}-{b}:{vocab.bond_types[t]}" for a, b, t in bonds)
        return f"atoms[{atoms}]bonds[{bond_str}]"

    def search(colors: list[int]) -> str:
        cells: dict[int, list[int]] = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        ambiguous = [c for c in sorted(cells) if len(cells[c]) > 1]
        if not ambiguous:
            order = sorted(range(n), key=lambda v: colors[v])
            return serialize(order)
        target = ambiguous[0]
        best = None
        for v in cells[target]:
            forced = list(colors)
            forced[v] = -1  # individualise: strictly smaller than any colour
            refined = _refine_colors(forced, adj)
            cand = search(refined)
            if best is None or cand < best:
                best = cand
        return best

    return search(_refine_colors(init, adj))


# ---------------------------------------------------------------------------
# Energy oracle and strain
# ---------------------------------------------------------------------------

class OracleUnavailable(RuntimeError):
    """Raised when no energy oracle is configured or the plugin died."""


class EnergyOracle:
    """Interface for external energy evaluation and minimisation."""

    def energy(self, graph: MolecularGraph, coords: np.ndarray, vocab: Vocabularies) -> float:
        raise NotImplementedError

    def minimize(
        self,
        graph: MolecularGraph,
        coords: np.ndarray,
        vocab: Vocabularies,
        steps: int = 200,
    ) -> tuple[np.ndarray, float]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class HarmonicBondOracle(EnergyOracle):
    """Toy oracle: harmonic springs on bonded pairs around a fixed rest length.

    Minimisation is plain gradient descent for a fixed number of steps, which
    relaxes bond lengths while leaving torsional differences largely intact.
    Useful as a stand-in where no chemistry engine is wired up, and as the
    reference implementation behind the subprocess protocol.
    """

    def __init__(self, rest_length: float = 1.45, stiffness: float = 10.0, lr: float = 0.01):
        self.rest_length = rest_length
        self.stiffness = stiffness
        self.lr = lr

    def _pairs(self, graph: MolecularGraph) -> np.ndarray:
        idx = np.argwhere(np.triu(graph.bonds, k=1) > 0)
        return idx

    def energy(self, graph, coords, vocab) -> float:
        pairs = self._pairs(graph)
        if len(pairs) == 0:
            return 0.0
        d = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
        return float(self.stiffness * ((d - self.rest_length) ** 2).sum())

    def minimize(self, graph, coords, vocab, steps: int = 200):
        pairs = self._pairs(graph)
        x = coords.astype(np.float64).copy()
        for _ in range(steps):
            if len(pairs) == 0:
                break
            diff = x[pairs[:, 0]] - x[pairs[:, 1]]
            d = np.linalg.norm(diff, axis=1, keepdims=True)
            grad_pair = 2.0 * self.stiffness * (d - self.rest_length) * diff / np.maximum(d, 1e-12)
            grad = np.zeros_like(x)
            np.add.at(grad, pairs[:, 0], grad_pair)
            np.add.at(grad, pairs[:, 1], -grad_pair)
            x -= self.lr * grad
        return x, self.energy(graph, x, vocab)


class SubprocessEnergyOracle(EnergyOracle):
    """Oracle speaking line-delimited JSON over a child process's stdio.

    Request: {"op": "energy"|"minimize", "symbols": [...], "charges": [...],
    "bonds": [[i, j, order], ...], "coords": [[x, y, z], ...], "steps": int}.
    Response: {"energy": float, "coords": [[x, y, z], ...]} or {"error": msg}.
    """

    def __init__(self, command):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        try:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise OracleUnavailable(f"cannot start oracle {self.command}: {exc}") from exc

    def _roundtrip(self, request: dict) -> dict:
        if self.proc.poll() is not None:
            raise OracleUnavailable(f"oracle process exited with {self.proc.returncode}")
        self.proc.stdin.write(json.dumps(request) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise OracleUnavailable("oracle closed its output stream")
        reply = json.loads(line)
        if "error" in reply:
            raise OracleUnavailable(f"oracle error: {reply['error']}")
        return reply

    @staticmethod
    def _request(graph: MolecularGraph, coords: np.ndarray, vocab: Vocabularies) -> dict:
        pairs = np.argwhere(np.triu(graph.bonds, k=1) > 0)
        return {
            "symbols": [vocab.atom_types[int(a)] for a in graph.atom_idx],
            "charges": [vocab.charge_types[int(c)] for c in graph.charge_idx],
            "bonds": [[int(i), int(j), int(graph.bonds[i, j])] for i, j in pairs],
            "coords": coords.tolist(),
        }

    def energy(self, graph, coords, vocab) -> float:
        req = {"op": "energy", **self._request(graph, coords, vocab)}
        return float(self._roundtrip(req)["energy"])

    def minimize(self, graph, coords, vocab, steps: int = 200):
        req = {"op": "minimize", "steps": int(steps), **self._request(graph, coords, vocab)}
        reply = self._roundtrip(req)
        return np.array(reply["coords"], dtype=np.float64), float(reply["energy"])

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.terminate()
            self.proc.wait(timeout=5)


def strain_energy(
    graph: MolecularGraph,
    coords: np.ndarray,
    vocab: Vocabularies,
    oracle: Optional[EnergyOracle],
    steps: int = 200,
) -> dict:
    """Energy above the oracle-minimised geometry for one conformer."""
    if oracle is None:
        raise OracleUnavailable("no energy oracle configured")
    e0 = oracle.energy(graph, coords, vocab)
    x_min, e_min = oracle.minimize(graph, coords, vocab, steps=steps)
    return {
        "energy": e0,
        "minimized_energy": e_min,
        "strain": e0 - e_min,
        "minimized_coords": x_min,
    }
