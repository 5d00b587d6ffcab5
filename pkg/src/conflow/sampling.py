"""Sampling: Euler integration of the learned flow from noise to molecules.

Two prior modes:

* ``fresh``     - every stochastic draw comes from the caller's generator.
* ``fixed_x``   - the representative coordinates, the categorical prior and
  every categorical jump during integration are drawn from a dedicated
  generator seeded with ``x_seed``. Only the conformer branch consumes the
  caller's generator, so reruns with the same ``x_seed`` decode the same
  graph no matter what conformer noise is used.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from . import flow
from .core import MolecularGraph, NoisyState, Vocabularies, zero_center
from .model import DualFlowNet, collate_states


def sample_prior(
    n: int,
    vocab: Vocabularies,
    rng: np.random.Generator,
    mode: str = "fresh",
    x_seed: Optional[int] = None,
) -> NoisyState:
    """Draw the t=0 state for one molecule of n atoms."""
    if mode not in ("fresh", "fixed_x"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if mode == "fixed_x":
        if x_seed is None:
            raise ValueError("fixed_x mode needs an x_seed")
        x_rng = np.random.default_rng(x_seed)
    else:
        x_rng = rng

    x_t = zero_center(x_rng.standard_normal((n, 3)))
    a_t = x_rng.integers(0, vocab.n_atom_types, size=n)
    c_t = x_rng.integers(0, vocab.n_charge_types, size=n)
    b_t = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, k=1)
    b_t[iu] = x_rng.integers(0, vocab.n_bond_types, size=len(iu[0]))
    b_t = b_t + b_t.T
    y_t = zero_center(rng.standard_normal((n, 3)))
    return NoisyState(x_t=x_t, y_t=y_t, a_t=a_t, b_t=b_t, c_t=c_t, t=0.0)


def draw_sizes(histogram: dict, k: int, rng: np.random.Generator) -> list[int]:
    """Sample k molecule sizes from an empirical size histogram."""
    if not histogram:
        raise ValueError("empty size histogram")
    sizes = np.array(sorted(int(n) for n in histogram), dtype=np.int64)
    counts = np.array([histogram[n] for n in sizes], dtype=np.float64)
    probs = counts / counts.sum()
    return [int(v) for v in rng.choice(sizes, size=k, p=probs)]


def _softmax_np(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits.detach(), dim=-1).cpu().numpy().astype(np.float64)


def _update_bonds(
    b_t: np.ndarray,
    probs: np.ndarray,
    t: float,
    dt: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Categorical jump on the upper triangle, mirrored back to a symmetric
    matrix with a zero diagonal."""
    n = b_t.shape[0]
    iu = np.triu_indices(n, k=1)
    new = np.zeros_like(b_t)
    if len(iu[0]):
        new[iu] = flow.cat_update(b_t[iu], probs[iu], t, dt, rng)
    return new + new.T


def _decode(
    out,
    mol: int,
    n: int,
    x_t: np.ndarray,
    y_t: np.ndarray,
    scale: float,
) -> MolecularGraph:
    """Final graph: argmax of the representative-branch logits at the last
    forward pass, coordinates mapped back to the dataset's length scale."""
    atom_idx = out.atom_logits_x[mol, :n].argmax(dim=-1).cpu().numpy().astype(np.int64)
    charge_idx = out.charge_logits_x[mol, :n].argmax(dim=-1).cpu().numpy().astype(np.int64)
    bond_logits = out.bond_logits_x[mol, :n, :n]
    bonds = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, k=1)
    if len(iu[0]):
        upper = bond_logits.argmax(dim=-1).cpu().numpy().astype(np.int64)[iu]
        bonds[iu] = upper
        bonds = bonds + bonds.T
    return MolecularGraph(
        atom_idx=atom_idx,
        charge_idx=charge_idx,
        bonds=bonds,
        conformers=[x_t * scale, y_t * scale],
        representative_index=0,
    )


def generate_many(
    model: DualFlowNet,
    vocab: Vocabularies,
    sizes: Sequence[int],
    n_steps: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    initial: Optional[Sequence[NoisyState]] = None,
) -> list[MolecularGraph]:
    """Fresh-mode sampling of one molecule per entry in ``sizes``.

    Each returned graph carries two conformers: index 0 is the representative
    branch, index 1 the conformer branch. ``initial`` overrides the priors
    (states must already sit at t=0), which makes end-to-end behaviour under
    transformed noise testable.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if initial is not None:
        states = [s.copy() for s in initial]
        if [s.n for s in states] != [int(n) for n in sizes]:
            raise ValueError("initial states do not match requested sizes")
    else:
        states = [sample_prior(int(n), vocab, rng) for n in sizes]

    model.eval()
    dt = 1.0 / n_steps
    with torch.no_grad():
        for k in range(n_steps):
            t = k * dt
            batch = collate_states(states, dtype=model.dtype)
            out = model(**batch)
            atom_p = _softmax_np(out.atom_logits_x)
            charge_p = _softmax_np(out.charge_logits_x)
            bond_p = _softmax_np(out.bond_logits_x)
            x_hat = out.x_hat.detach().cpu().numpy().astype(np.float64)
            y_hat = out.y_hat.detach().cpu().numpy().astype(np.float64)
            for i, st in enumerate(states):
                n = st.n
                st.x_t = flow.euler_coord_step(st.x_t, x_hat[i, :n], t, dt)
                st.y_t = flow.euler_coord_step(st.y_t, y_hat[i, :n], t, dt)
                st.a_t = flow.cat_update(st.a_t, atom_p[i, :n], t, dt, rng)
                st.c_t = flow.cat_update(st.c_t, charge_p[i, :n], t, dt, rng)
                st.b_t = _update_bonds(st.b_t, bond_p[i, :n, :n], t, dt, rng)
                st.t = min(t + dt, 1.0)
        # Decode from a readout pass on the settled t=1 state. The in-loop
        # passes see states still carrying integration noise; this one sees
        # the endpoint the trajectory actually landed on.
        out = model(**collate_states(states, dtype=model.dtype))

    return [
        _decode(out, i, st.n, st.x_t, st.y_t, scale) for i, st in enumerate(states)
    ]


def generate(
    model: DualFlowNet,
    vocab: Vocabularies,
    n_atoms: int,
    n_steps: int,
    rng: np.random.Generator,
    mode: str = "fresh",
    x_seed: Optional[int] = None,
    scale: float = 1.0,
    initial: Optional[NoisyState] = None,
) -> MolecularGraph:
    """Sample one molecule."""
    if mode == "fresh":
        init = [initial] if initial is not None else None
        return generate_many(model, vocab, [n_atoms], n_steps, rng, scale, init)[0]
    graph = generate_ensemble(
        model, vocab, n_atoms, 1, n_steps, x_seed, rng, scale
    )
    return graph


def generate_ensemble(
    model: DualFlowNet,
    vocab: Vocabularies,
    n_atoms: int,
    m: int,
    n_steps: int,
    x_seed: Optional[int],
    rng: np.random.Generator,
    scale: float = 1.0,
) -> MolecularGraph:
    """One molecule with an m-conformer ensemble in fixed_x mode.

    All m rows share the representative state and the categorical state; every
    jump is driven by the x_seed generator, so the decoded graph cannot differ
    between rows. Conformer 0 of the result is the representative, conformers
    1..m are the ensemble.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if m < 1:
        raise ValueError("m must be >= 1")
    if x_seed is None:
        raise ValueError("ensemble generation needs an x_seed")
    x_rng = np.random.default_rng(x_seed)
    n = n_atoms

    shared = sample_prior(n, vocab, x_rng, mode="fresh")
    states = []
    for _ in range(m):
        st = shared.copy()
        st.y_t = zero_center(rng.standard_normal((n, 3)))
        states.append(st)

    model.eval()
    dt = 1.0 / n_steps
    with torch.no_grad():
        for k in range(n_steps):
            t = k * dt
            batch = collate_states(states, dtype=model.dtype)
            out = model(**batch)
            x_hat = out.x_hat.detach().cpu().numpy().astype(np.float64)
            y_hat = out.y_hat.detach().cpu().numpy().astype(np.float64)
            # Rows carry identical representative-branch inputs, so any real
            # spread here means conformer information leaked across. CPU
            # kernels round batch tails differently, hence the tolerance.
            x_spread = float(np.abs(x_hat - x_hat[:1]).max())
            if x_spread > 1e-5:
                raise RuntimeError(
                    "representative branch diverged across ensemble rows "
                    f"(max deviation {x_spread:.3e})"
                )
            atom_p = _softmax_np(out.atom_logits_x[0])
            charge_p = _softmax_np(out.charge_logits_x[0])
            bond_p = _softmax_np(out.bond_logits_x[0])
            new_x = flow.euler_coord_step(states[0].x_t, x_hat[0], t, dt)
            new_a = flow.cat_update(states[0].a_t, atom_p, t, dt, x_rng)
            new_c = flow.cat_update(states[0].c_t, charge_p, t, dt, x_rng)
            new_b = _update_bonds(states[0].b_t, bond_p, t, dt, x_rng)
            for i, st in enumerate(states):
                st.x_t = new_x.copy()
                st.a_t = new_a.copy()
                st.c_t = new_c.copy()
                st.b_t = new_b.copy()
                st.y_t = flow.euler_coord_step(st.y_t, y_hat[i], t, dt)
                st.t = min(t + dt, 1.0)
        # Readout pass on the settled t=1 state, mirroring generate_many.
        out = model(**collate_states(states, dtype=model.dtype))

    graph = _decode(out, 0, n, states[0].x_t, states[0].y_t, scale)
    conformers = [states[0].x_t * scale] + [st.y_t * scale for st in states]
    return MolecularGraph(
        atom_idx=graph.atom_idx,
        charge_idx=graph.charge_idx,
        bonds=graph.bonds,
        conformers=conformers,
        representative_index=0,
    )
