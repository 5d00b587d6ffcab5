import numpy as np
import pytest

from conflow.core import MolecularGraph, Vocabularies, qm9_vocab
from conflow.metrics import (
    DEFAULT_COVERAGE_DELTAS,
    HarmonicBondOracle,
    OracleUnavailable,
    SubprocessEnergyOracle,
    atom_stabilities,
    canonical_key,
    conformer_diversity,
    coverage_metrics,
    graph_metrics,
    is_connected,
    is_valid,
    kabsch_rmsd,
    strain_energy,
)

VOCAB = qm9_vocab()


def graph_of(symbols, bonds_list, charges=None, conformers=None):
    n = len(symbols)
    bonds = np.zeros((n, n), dtype=np.int64)
    for i, j, order in bonds_list:
        bonds[i, j] = bonds[j, i] = order
    charges = charges or [0] * n
    if conformers is None:
        rng = np.random.default_rng(0)
        conformers = [rng.standard_normal((n, 3))]
    return MolecularGraph(
        atom_idx=np.array([VOCAB.atom_index(s) for s in symbols], dtype=np.int64),
        charge_idx=np.array([VOCAB.charge_index(c) for c in charges], dtype=np.int64),
        bonds=bonds,
        conformers=conformers,
        representative_index=0,
    )


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# -- rmsd ------------------------------------------------------------------

def test_kabsch_identical_is_zero():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 3))
    assert kabsch_rmsd(a, a.copy()) < 1e-12


def test_kabsch_removes_rotation_and_translation():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((8, 3))
    b = a @ random_rotation(rng).T + np.array([3.0, -1.0, 2.0])
    assert kabsch_rmsd(a, b) < 1e-10


def test_kabsch_handles_reflection_properly():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((8, 3))
    b = a.copy()
    b[:, 0] = -b[:, 0]  # mirror image
    # a proper-rotation alignment cannot reach zero for a chiral cloud
    assert kabsch_rmsd(a, b) > 1e-3


def test_kabsch_known_displacement():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0], [0.0, 0, 1.0]])
    b = a.copy()
    b[0, 0] += 0.3
    val = kabsch_rmsd(a, b)
    assert 0.0 < val <= 0.3 / 2.0 + 1e-6


# -- diversity / coverage ----------------------------------------------------

def test_diversity_two_identical_conformers_zero():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((5, 3))
    assert conformer_diversity([c, c.copy()]) < 1e-12


def test_diversity_hand_value():
    base = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    far = base + 0.0
    far = far.copy()
    far[0] += np.array([0.6, 0, 0])
    mid = base.copy()
    mid[0] += np.array([0.3, 0, 0])
    confs = [base, mid, far]
    # nearest-neighbour rmsd per conformer, then the mean
    d01 = kabsch_rmsd(base, mid)
    d12 = kabsch_rmsd(mid, far)
    expected = (d01 + min(d01, d12) + d12) / 3.0
    assert conformer_diversity(confs) == pytest.approx(expected, rel=1e-9)


def test_diversity_requires_two():
    with pytest.raises(ValueError):
        conformer_diversity([np.zeros((3, 3))])


def test_coverage_perfect_generation():
    rng = np.random.default_rng(5)
    ref = [rng.standard_normal((5, 3)) for _ in range(3)]
    gen = [c.copy() for c in ref]
    rep = coverage_metrics(ref, gen)
    assert rep["amr_r"] < 1e-10
    assert rep["amr_p"] < 1e-10
    # at any positive threshold everything is covered
    assert rep["cov_r"][1:].min() == 1.0
    assert rep["cov_p"][1:].min() == 1.0


def test_coverage_grid_is_pinned():
    assert DEFAULT_COVERAGE_DELTAS[0] == 0.0
    assert DEFAULT_COVERAGE_DELTAS[-1] == pytest.approx(2.5)
    assert len(DEFAULT_COVERAGE_DELTAS) == 21
    steps = np.diff(DEFAULT_COVERAGE_DELTAS)
    assert np.allclose(steps, 0.125)


def test_coverage_asymmetric_sets():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((4, 3))
    b = a + 0.001 * rng.standard_normal((4, 3))
    far = a + rng.standard_normal((4, 3)) * 3
    rep = coverage_metrics([a], [b, far], deltas=[0.1])
    # reference a is matched by b, so recall is full
    assert rep["cov_r"][0] == 1.0
    # precision: far sits alone and unmatched
    assert rep["cov_p"][0] == pytest.approx(0.5)
    assert rep["rmsd_matrix"].shape == (1, 2)


# -- stability / validity ----------------------------------------------------

def test_methane_is_stable_and_valid():
    g = graph_of(["C", "H", "H", "H", "H"],
                 [(0, i, 1) for i in range(1, 5)])
    assert atom_stabilities(g, VOCAB).all()
    assert is_valid(g, VOCAB)


def test_under_valent_carbon_flagged():
    g = graph_of(["C", "H"], [(0, 1, 1)])
    flags = atom_stabilities(g, VOCAB)
    assert not flags[0]
    assert flags[1]
    assert not is_valid(g, VOCAB)


def test_charged_nitrogen_valences():
    # ammonium-like: N(+1) with four single bonds
    g = graph_of(["N", "H", "H", "H", "H"],
                 [(0, i, 1) for i in range(1, 5)],
                 charges=[1, 0, 0, 0, 0])
    assert atom_stabilities(g, VOCAB).all()
    # neutral N with four bonds is not stable
    g2 = graph_of(["N", "H", "H", "H", "H"],
                  [(0, i, 1) for i in range(1, 5)])
    assert not atom_stabilities(g2, VOCAB)[0]


def test_aromatic_ring_half_orders_round():
    # benzene: six aromatic CH, aromatic order 1.5 summing to 3 + 1 H
    pairs = [(i, (i + 1) % 6, 4) for i in range(6)]
    ch = [(i, 6 + i, 1) for i in range(6)]
    g = graph_of(["C"] * 6 + ["H"] * 6, pairs + ch)
    assert atom_stabilities(g, VOCAB).all()
    assert is_valid(g, VOCAB)


def test_disconnected_graph_invalid():
    g = graph_of(["O", "H", "H", "O", "H", "H"],
                 [(0, 1, 1), (0, 2, 1), (3, 4, 1), (3, 5, 1)])
    assert atom_stabilities(g, VOCAB).all()
    assert not is_connected(g.bonds)
    assert not is_valid(g, VOCAB)


def test_single_atom_connected():
    assert is_connected(np.zeros((1, 1), dtype=np.int64))


# -- canonical keys ----------------------------------------------------------

def water():
    return graph_of(["O", "H", "H"], [(0, 1, 1), (0, 2, 1)])


def test_canonical_key_permutation_invariant_small():
    g = water()
    rng = np.random.default_rng(7)
    key = canonical_key(g, VOCAB)
    for _ in range(6):
        perm = rng.permutation(3)
        pg = MolecularGraph(
            atom_idx=g.atom_idx[perm],
            charge_idx=g.charge_idx[perm],
            bonds=g.bonds[np.ix_(perm, perm)],
            conformers=[g.conformers[0][perm]],
            representative_index=0,
        )
        assert canonical_key(pg, VOCAB) == key


def test_canonical_key_separates_isomers():
    # same multiset of atoms and bond orders, different wiring
    chain = graph_of(["C", "C", "O", "H"], [(0, 1, 1), (1, 2, 1), (2, 3, 1)])
    branch = graph_of(["C", "C", "O", "H"], [(0, 1, 1), (0, 2, 1), (0, 3, 1)])
    assert canonical_key(chain, VOCAB) != canonical_key(branch, VOCAB)


def test_canonical_key_sees_charges_and_orders():
    a = graph_of(["C", "O"], [(0, 1, 1)])
    b = graph_of(["C", "O"], [(0, 1, 2)])
    c = graph_of(["C", "O"], [(0, 1, 1)], charges=[0, -1])
    keys = {canonical_key(g, VOCAB) for g in (a, b, c)}
    assert len(keys) == 3


def test_canonical_key_symmetric_graph():
    # a 4-cycle of carbons is vertex-transitive; key must still be stable
    ring = graph_of(["C"] * 4, [(0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 0, 1)])
    rng = np.random.default_rng(8)
    key = canonical_key(ring, VOCAB)
    for _ in range(8):
        perm = rng.permutation(4)
        pg = MolecularGraph(
            atom_idx=ring.atom_idx[perm],
            charge_idx=ring.charge_idx[perm],
            bonds=ring.bonds[np.ix_(perm, perm)],
            conformers=[ring.conformers[0][perm]],
            representative_index=0,
        )
        assert canonical_key(pg, VOCAB) == key


# -- aggregate graph metrics -------------------------------------------------

def test_graph_metrics_counts():
    good = graph_of(["O", "H", "H"], [(0, 1, 1), (0, 2, 1)])
    bad = graph_of(["C", "H"], [(0, 1, 1)])
    rep = graph_metrics([good, good.copy(), bad], VOCAB)
    assert rep["n_samples"] == 3
    assert rep["n_valid"] == 2
    assert rep["validity"] == pytest.approx(2 / 3)
    # both valid samples share one canonical key
    assert rep["n_unique"] == 1
    assert rep["uniqueness"] == pytest.approx(0.5)
    assert rep["mol_stability"] == pytest.approx(2 / 3)


def test_graph_metrics_novelty_against_train_keys():
    w = water()
    other = graph_of(["N", "H", "H", "H"], [(0, 1, 1), (0, 2, 1), (0, 3, 1)])
    train_keys = {canonical_key(w, VOCAB)}
    rep = graph_metrics([w, other], VOCAB, train_keys=train_keys)
    assert rep["novelty"] == pytest.approx(0.5)


def test_graph_metrics_no_valid_samples():
    bad = graph_of(["C", "H"], [(0, 1, 1)])
    rep = graph_metrics([bad], VOCAB)
    assert rep["validity"] == 0.0
    assert rep["uniqueness"] == 0.0


# -- energy oracles ----------------------------------------------------------

def stretched_ethane_like():
    # two carbons pulled apart, bonded; oracle should contract them
    coords = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    return graph_of(["C", "C"], [(0, 1, 1)], conformers=[coords])


def test_harmonic_oracle_energy_decreases():
    g = stretched_ethane_like()
    oracle = HarmonicBondOracle()
    e0 = oracle.energy(g, g.conformers[0], VOCAB)
    coords_min, e_min = oracle.minimize(g, g.conformers[0], VOCAB, steps=500)
    assert e_min < e0
    d = np.linalg.norm(coords_min[0] - coords_min[1])
    assert abs(d - oracle.rest_length) < 0.05


def test_harmonic_oracle_preserves_torsion_spread():
    # butane-like chain in two torsional states; minimizing bond lengths
    # must not fold the two states together
    def chain(torsion):
        c = np.zeros((4, 3))
        c[1] = [1.5, 0, 0]
        c[2] = [2.0, 1.4, 0]
        c[3] = c[2] + np.array([
            1.4 * np.cos(torsion), 0.4, 1.4 * np.sin(torsion)])
        return c

    bonds = [(0, 1, 1), (1, 2, 1), (2, 3, 1)]
    g1 = graph_of(["C"] * 4, bonds, conformers=[chain(0.0)])
    g2 = graph_of(["C"] * 4, bonds, conformers=[chain(2.0)])
    oracle = HarmonicBondOracle()
    m1, _ = oracle.minimize(g1, g1.conformers[0], VOCAB, steps=300)
    m2, _ = oracle.minimize(g2, g2.conformers[0], VOCAB, steps=300)
    assert kabsch_rmsd(m1, m2) > 0.2


def test_strain_energy_report():
    g = stretched_ethane_like()
    rep = strain_energy(g, g.conformers[0], VOCAB, HarmonicBondOracle(), steps=500)
    assert rep["strain"] > 0
    assert rep["energy"] == pytest.approx(rep["minimized_energy"] + rep["strain"])
    assert rep["minimized_coords"].shape == (2, 3)


def test_strain_energy_requires_oracle():
    g = stretched_ethane_like()
    with pytest.raises(OracleUnavailable):
        strain_energy(g, g.conformers[0], VOCAB, None)


def test_subprocess_oracle_roundtrip():
    g = stretched_ethane_like()
    oracle = SubprocessEnergyOracle("python3 -m conflow.oracle_server")
    try:
        e = oracle.energy(g, g.conformers[0], VOCAB)
        local = HarmonicBondOracle()
        e_local = local.energy(g, g.conformers[0], VOCAB)
        assert e == pytest.approx(e_local, rel=1e-9)
        _, e_min = oracle.minimize(g, g.conformers[0], VOCAB, steps=100)
        assert e_min < e
    finally:
        oracle.close()


def test_subprocess_oracle_bad_command():
    with pytest.raises(OracleUnavailable):
        SubprocessEnergyOracle("definitely-not-a-real-binary-12345")


def test_subprocess_oracle_dead_process():
    oracle = SubprocessEnergyOracle("python3 -c pass")
    g = stretched_ethane_like()
    import time
    time.sleep(0.3)
    with pytest.raises(OracleUnavailable):
        oracle.energy(g, g.conformers[0], VOCAB)
    oracle.close()
