"""Reference energy-oracle server: line-delimited JSON over stdio.

Run as ``python -m conflow.oracle_server``. Serves the harmonic bond oracle;
mainly a protocol reference and a test fixture for SubprocessEnergyOracle.
"""

from __future__ import annotations

import json
import sys

import numpy as np

from .core import MolecularGraph, Vocabularies
from .metrics import HarmonicBondOracle


def _graph_from_request(req: dict) -> tuple[MolecularGraph, Vocabularies, np.ndarray]:
    symbols = req["symbols"]
    charges = [int(c) for c in req["charges"]]
    vocab = Vocabularies(
        atom_types=tuple(dict.fromkeys(symbols)),
        charge_types=tuple(sorted(set(charges) | {0})),
    )
    n = len(symbols)
    bonds = np.zeros((n, n), dtype=np.int64)
    for i, j, order in req["bonds"]:
        bonds[i, j] = bonds[j, i] = order
    graph = MolecularGraph(
        atom_idx=np.array([vocab.atom_index(s) for s in symbols], dtype=np.int64),
        charge_idx=np.array([vocab.charge_index(c) for c in charges], dtype=np.int64),
        bonds=bonds,
        conformers=[np.array(req["coords"], dtype=np.float64)],
    )
    return graph, vocab, graph.conformers[0]


def main() -> int:
    oracle = HarmonicBondOracle()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            graph, vocab, coords = _graph_from_request(req)
            if req["op"] == "energy":
                reply = {"energy": oracle.energy(graph, coords, vocab)}
            elif req["op"] == "minimize":
                x, e = oracle.minimize(graph, coords, vocab, steps=int(req.get("steps", 200)))
                reply = {"energy": e, "coords": x.tolist()}
            else:
                reply = {"error": f"unknown op {req.get('op')!r}"}
        except Exception as exc:  # malformed request: report, keep serving
            reply = {"error": str(exc)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
