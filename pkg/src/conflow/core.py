"""Shared domain types: vocabularies, molecular graphs, flow states, model outputs.

Conventions used throughout the package:

* Bond matrices are dense ``(n, n)`` integer arrays over the bond vocabulary,
  symmetric with a zero ("none") diagonal.
* Conformer coordinates are ``(n, 3)`` float arrays in a zero center-of-mass
  frame once preprocessed.
* Atom ordering is shared by every conformer of a molecule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

DEFAULT_BOND_TYPES: tuple[str, ...] = ("none", "single", "double", "triple", "aromatic")
DEFAULT_CHARGE_TYPES: tuple[int, ...] = (-1, 0, 1)


@dataclass(frozen=True)
class Vocabularies:
    """Ordered atom / bond / charge alphabets fixed for a dataset and model."""

    atom_types: tuple[str, ...]
    bond_types: tuple[str, ...] = DEFAULT_BOND_TYPES
    charge_types: tuple[int, ...] = DEFAULT_CHARGE_TYPES

    def __post_init__(self):
        for name in ("atom_types", "bond_types", "charge_types"):
            values = getattr(self, name)
            if len(values) == 0:
                raise ValueError(f"{name} must be non-empty")
            if len(set(values)) != len(values):
                raise ValueError(f"{name} contains duplicate entries: {values}")
        if self.bond_types[0] != "none":
            raise ValueError("bond_types[0] must be 'none'")
        if 0 not in self.charge_types:
            raise ValueError("charge_types must contain 0")

    @property
    def n_atom_types(self) -> int:
        return len(self.atom_types)

    @property
    def n_bond_types(self) -> int:
        return len(self.bond_types)

    @property
    def n_charge_types(self) -> int:
        return len(self.charge_types)

    def atom_index(self, symbol: str) -> int:
        return self.atom_types.index(symbol)

    def charge_index(self, charge: int) -> int:
        return self.charge_types.index(charge)

    def bond_index(self, name: str) -> int:
        return self.bond_types.index(name)

    def to_dict(self) -> dict:
        return {
            "atom_types": list(self.atom_types),
            "bond_types": list(self.bond_types),
            "charge_types": list(self.charge_types),
        }

    @staticmethod
    def from_dict(d: dict) -> "Vocabularies":
        return Vocabularies(
            atom_types=tuple(d["atom_types"]),
            bond_types=tuple(d["bond_types"]),
            charge_types=tuple(int(c) for c in d["charge_types"]),
        )


def qm9_vocab() -> Vocabularies:
    return Vocabularies(atom_types=("H", "C", "N", "O", "F"))


def geom_vocab() -> Vocabularies:
    return Vocabularies(
        atom_types=("H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Br", "I")
    )


@dataclass
class MolecularGraph:
    """A molecule: typed atoms, charges, a dense bond matrix and m >= 1 conformers.

    ``conformers[representative_index]`` is the representative geometry used as
    the graph-side coordinate target during training.
    """

    atom_idx: np.ndarray          # (n,) int
    charge_idx: np.ndarray        # (n,) int
    bonds: np.ndarray             # (n, n) int, symmetric, zero diagonal
    conformers: list[np.ndarray]  # m arrays of shape (n, 3)
    representative_index: int = 0

    @property
    def n(self) -> int:
        return int(self.atom_idx.shape[0])

    @property
    def m(self) -> int:
        return len(self.conformers)

    @property
    def representative(self) -> np.ndarray:
        return self.conformers[self.representative_index]

    def copy(self) -> "MolecularGraph":
        return MolecularGraph(
            atom_idx=self.atom_idx.copy(),
            charge_idx=self.charge_idx.copy(),
            bonds=self.bonds.copy(),
            conformers=[c.copy() for c in self.conformers],
            representative_index=self.representative_index,
        )

    def same_topology(self, other: "MolecularGraph") -> bool:
        """True when atom order, types, charges and bonds match exactly."""
        return (
            self.n == other.n
            and np.array_equal(self.atom_idx, other.atom_idx)
            and np.array_equal(self.charge_idx, other.charge_idx)
            and np.array_equal(self.bonds, other.bonds)
        )


def validate_graph(graph: MolecularGraph, vocab: Optional[Vocabularies] = None) -> list[str]:
    """Check structural invariants, returning a list of human-readable violations.

    An empty list means the graph is well-formed. Vocabulary range checks are
    only performed when ``vocab`` is given.
    """
    errs: list[str] = []
    a, c, b = graph.atom_idx, graph.charge_idx, graph.bonds
    if a.ndim != 1:
        errs.append(f"atom_idx must be 1-D, got shape {a.shape}")
        return errs
    n = a.shape[0]
    if n == 0:
        errs.append("graph has no atoms")
    if c.shape != (n,):
        errs.append(f"charge_idx shape {c.shape} does not match atom count {n}")
    if b.shape != (n, n):
        errs.append(f"bonds shape {b.shape} does not match atom count {n}")
    else:
        if not np.array_equal(b, b.T):
            i, j = np.argwhere(b != b.T)[0]
            errs.append(f"bonds not symmetric at ({i}, {j})")
        if np.any(np.diag(b) != 0):
            i = int(np.argwhere(np.diag(b) != 0)[0][0])
            errs.append(f"bond diagonal must be 'none', got {b[i, i]} at atom {i}")
    if graph.m < 1:
        errs.append("graph must carry at least one conformer")
    for k, conf in enumerate(graph.conformers):
        if conf.shape != (n, 3):
            errs.append(f"conformer {k} has shape {conf.shape}, expected ({n}, 3)")
        elif not np.all(np.isfinite(conf)):
            errs.append(f"conformer {k} contains non-finite coordinates")
    if not (0 <= graph.representative_index < max(graph.m, 1)):
        errs.append(
            f"representative_index {graph.representative_index} out of range for m={graph.m}"
        )
    if vocab is not None:
        if n and (a.min() < 0 or a.max() >= vocab.n_atom_types):
            errs.append("atom_idx outside the atom vocabulary")
        if c.shape == (n,) and n and (c.min() < 0 or c.max() >= vocab.n_charge_types):
            errs.append("charge_idx outside the charge vocabulary")
        if b.shape == (n, n) and n and (b.min() < 0 or b.max() >= vocab.n_bond_types):
            errs.append("bonds outside the bond vocabulary")
    return errs


@dataclass
class TrainingTuple:
    """One supervised example: a graph plus (representative, conformer) coordinates."""

    atom_idx: np.ndarray    # (n,) int
    charge_idx: np.ndarray  # (n,) int
    bonds: np.ndarray       # (n, n) int
    x: np.ndarray           # (n, 3) representative coordinates
    y: np.ndarray           # (n, 3) one conformer drawn from the ensemble

    @property
    def n(self) -> int:
        return int(self.atom_idx.shape[0])


@dataclass
class NoisyState:
    """The joint flow state at time ``t`` for a single molecule."""

    x_t: np.ndarray  # (n, 3)
    y_t: np.ndarray  # (n, 3)
    a_t: np.ndarray  # (n,)   atom type indices
    b_t: np.ndarray  # (n, n) bond type indices, symmetric, zero diagonal
    c_t: np.ndarray  # (n,)   charge indices
    t: float

    @property
    def n(self) -> int:
        return int(self.a_t.shape[0])

    def copy(self) -> "NoisyState":
        return NoisyState(
            x_t=self.x_t.copy(),
            y_t=self.y_t.copy(),
            a_t=self.a_t.copy(),
            b_t=self.b_t.copy(),
            c_t=self.c_t.copy(),
            t=float(self.t),
        )


@dataclass
class ModelOutput:
    """Network predictions for a batch: endpoint coordinates plus categorical logits.

    All tensors carry a leading batch axis; ``mask`` marks real atoms. The two
    coordinate branches each get their own full set of logits, but only the
    x-branch logits drive decoding.
    """

    x_hat: torch.Tensor           # (B, N, 3)
    y_hat: torch.Tensor           # (B, N, 3)
    atom_logits_x: torch.Tensor   # (B, N, |A|)
    charge_logits_x: torch.Tensor  # (B, N, |C|)
    bond_logits_x: torch.Tensor   # (B, N, N, |B|)
    atom_logits_y: torch.Tensor   # (B, N, |A|)
    charge_logits_y: torch.Tensor  # (B, N, |C|)
    bond_logits_y: torch.Tensor   # (B, N, N, |B|)
    mask: torch.Tensor            # (B, N) bool

    def finite(self) -> bool:
        return all(
            bool(torch.isfinite(v).all())
            for v in (
                self.x_hat, self.y_hat,
                self.atom_logits_x, self.charge_logits_x, self.bond_logits_x,
                self.atom_logits_y, self.charge_logits_y, self.bond_logits_y,
            )
        )


def zero_center(coords: np.ndarray) -> np.ndarray:
    """Shift coordinates to a zero center of mass over the atom axis.

    Works on (n, 3) arrays and on batches (..., n, 3), centering each
    molecule separately.
    """
    return coords - coords.mean(axis=-2, keepdims=True)
