"""Self-contained property checks behind the ``verify`` CLI command.

Each check builds its own tiny model or synthetic inputs, runs fast on one
CPU core, and returns (ok, detail). They guard the load-bearing structural
claims: branch-wise rotation equivariance, permutation equivariance,
conformer-blindness of the representative branch, block structure of the
flow Jacobian, step-count invariance of the integrator under an exact
predictor, the categorical jump process, and loss gradients.
"""

from __future__ import annotations

import numpy as np
import torch

from . import flow
from .core import NoisyState, Vocabularies, zero_center
from .losses import LossWeights, total_loss
from .model import DualFlowNet, ModelConfig, collate_states
from .training import collate_targets
from .core import TrainingTuple

_CHECK_VOCAB = Vocabularies(atom_types=("H", "C", "N", "O"))
_CHECK_CFG = ModelConfig(
    n_layers=2, d_model=32, d_edge=16, d_coord=8, d_message=16,
    d_message_hidden=16, n_attn_heads=4, time_embed_dim=8,
    ff_hidden=64, gate_hidden=64,
)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random rotation from the QR decomposition of a gaussian."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _random_state(n: int, vocab: Vocabularies, rng: np.random.Generator) -> NoisyState:
    b = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, k=1)
    b[iu] = rng.integers(0, vocab.n_bond_types, size=len(iu[0]))
    return NoisyState(
        x_t=rng.standard_normal((n, 3)),
        y_t=rng.standard_normal((n, 3)),
        a_t=rng.integers(0, vocab.n_atom_types, size=n),
        b_t=b + b.T,
        c_t=rng.integers(0, vocab.n_charge_types, size=n),
        t=float(rng.uniform(0.05, 0.95)),
    )


def _fresh_model(dtype=torch.float64, model_cls=DualFlowNet) -> DualFlowNet:
    torch.manual_seed(1234)
    model = model_cls(_CHECK_CFG, _CHECK_VOCAB).to(dtype)
    # zero-init residual tails would hide leaks, so perturb all parameters
    with torch.no_grad():
        gen = torch.Generator().manual_seed(99)
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    model.eval()
    return model


def check_rotation_equivariance(trials: int = 4, model_cls=DualFlowNet) -> tuple[bool, str]:
    """Independent rotations of the two branches must rotate the two
    predicted geometries independently and leave every logit unchanged."""
    model = _fresh_model(model_cls=model_cls)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(trials):
        st = _random_state(6, _CHECK_VOCAB, rng)
        rx, ry = random_rotation(rng), random_rotation(rng)
        rot = st.copy()
        rot.x_t = st.x_t @ rx.T
        rot.y_t = st.y_t @ ry.T
        with torch.no_grad():
            o1 = model.forward_state(st)
            o2 = model.forward_state(rot)
        tx = torch.from_numpy(rx).to(o1.x_hat.dtype)
        ty = torch.from_numpy(ry).to(o1.y_hat.dtype)
        errs = [
            (o1.x_hat @ tx.T - o2.x_hat).abs().max() / (o1.x_hat.abs().max() + 1e-12),
            (o1.y_hat @ ty.T - o2.y_hat).abs().max() / (o1.y_hat.abs().max() + 1e-12),
            (o1.atom_logits_x - o2.atom_logits_x).abs().max()
            / (o1.atom_logits_x.abs().max() + 1e-12),
            (o1.bond_logits_x - o2.bond_logits_x).abs().max()
            / (o1.bond_logits_x.abs().max() + 1e-12),
            (o1.atom_logits_y - o2.atom_logits_y).abs().max()
            / (o1.atom_logits_y.abs().max() + 1e-12),
        ]
        worst = max(worst, max(float(e) for e in errs))
    return worst < 1e-8, f"max relative error {worst:.3e} (tol 1e-8)"


def check_permutation_equivariance(trials: int = 4) -> tuple[bool, str]:
    model = _fresh_model()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(trials):
        n = 6
        st = _random_state(n, _CHECK_VOCAB, rng)
        perm = rng.permutation(n)
        ps = NoisyState(
            x_t=st.x_t[perm], y_t=st.y_t[perm], a_t=st.a_t[perm],
            b_t=st.b_t[np.ix_(perm, perm)], c_t=st.c_t[perm], t=st.t,
        )
        with torch.no_grad():
            o1 = model.forward_state(st)
            o2 = model.forward_state(ps)
        p = torch.from_numpy(perm)
        errs = [
            (o1.x_hat[0][p] - o2.x_hat[0]).abs().max(),
            (o1.y_hat[0][p] - o2.y_hat[0]).abs().max(),
            (o1.atom_logits_x[0][p] - o2.atom_logits_x[0]).abs().max(),
            (o1.bond_logits_x[0][p][:, p] - o2.bond_logits_x[0]).abs().max(),
        ]
        worst = max(worst, max(float(e) for e in errs))
    return worst < 1e-5, f"max abs error {worst:.3e} (tol 1e-5)"


def check_conformer_independence() -> tuple[bool, str]:
    """Representative-branch outputs must not move at all when only the
    conformer geometry changes."""
    model = _fresh_model(dtype=torch.float32)
    rng = np.random.default_rng(23)
    st = _random_state(6, _CHECK_VOCAB, rng)
    alt = st.copy()
    alt.y_t = rng.standard_normal(st.y_t.shape)
    with torch.no_grad():
        o1 = model.forward_state(st)
        o2 = model.forward_state(alt)
    same = (
        torch.equal(o1.x_hat, o2.x_hat)
        and torch.equal(o1.atom_logits_x, o2.atom_logits_x)
        and torch.equal(o1.charge_logits_x, o2.charge_logits_x)
        and torch.equal(o1.bond_logits_x, o2.bond_logits_x)
    )
    moved = float((o1.y_hat - o2.y_hat).abs().max())
    return same and moved > 0, (
        f"representative outputs bit-identical: {same}, "
        f"conformer prediction moved by {moved:.3e}"
    )


def check_jacobian_factorization(points: int = 5) -> tuple[bool, str]:
    blocks, sizes = flow.toy_block_flow([4, 4])
    rng = np.random.default_rng(3)
    worst_rel, worst_off = 0.0, 0.0
    for _ in range(points):
        z = rng.uniform(0.5, 1.5, size=8)
        rep = flow.jacobian_block_check(blocks, sizes, z)
        rel = abs(rep["det_full"] - rep["block_det_product"]) / abs(rep["det_full"])
        worst_rel = max(worst_rel, rel)
        worst_off = max(worst_off, rep["max_offblock"])
    ok = worst_rel < 1e-5 and worst_off < 1e-6
    return ok, (
        f"det mismatch {worst_rel:.3e} (tol 1e-5), "
        f"off-block magnitude {worst_off:.3e} (tol 1e-6)"
    )


def check_ode_consistency() -> tuple[bool, str]:
    """With a predictor that always returns the true endpoint, the Euler
    scheme lands on that endpoint for every step count."""
    rng = np.random.default_rng(5)
    x1 = zero_center(rng.standard_normal((5, 3)))
    worst = 0.0
    for steps in (1, 10, 100):
        x = zero_center(rng.standard_normal((5, 3)))
        dt = 1.0 / steps
        for k in range(steps):
            x = flow.euler_coord_step(x, x1, k * dt, dt)
        worst = max(worst, float(np.abs(x - x1).max()))
    return worst < 1e-10, f"endpoint error {worst:.3e} over steps 1/10/100 (tol 1e-10)"


def check_categorical_dynamics() -> tuple[bool, str]:
    rng = np.random.default_rng(17)
    n_draws, k = 20000, 4
    a0 = rng.integers(0, k, size=n_draws)
    a1 = rng.integers(0, k, size=n_draws)
    t = 0.35
    a_t = flow.cat_interp(t, a0, a1, rng)
    frac = float((a_t == a1)[a0 != a1].mean())
    se = (t * (1 - t) / (a0 != a1).sum()) ** 0.5
    marg_ok = abs(frac - t) < 4 * se

    chains, steps = 2000, 100
    state = rng.integers(0, k, size=chains)
    target = rng.integers(0, k, size=chains)
    p = np.eye(k)[target]
    dt = 1.0 / steps
    for s in range(steps):
        state = flow.cat_update(state, p, s * dt, dt, rng)
    absorbed = float((state == target).mean())
    ok = marg_ok and absorbed >= 0.999
    return ok, (
        f"interp fraction {frac:.4f} vs t={t} (4se={4 * se:.4f}), "
        f"absorbed {absorbed:.4f} (need >=0.999)"
    )


def check_loss_gradients(n_params: int = 40) -> tuple[bool, str]:
    """Analytic gradient of the full loss vs central finite differences on a
    random subsample of parameters."""
    torch.manual_seed(3)
    model = DualFlowNet(_CHECK_CFG, _CHECK_VOCAB).to(torch.float64)
    with torch.no_grad():
        gen = torch.Generator().manual_seed(5)
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    rng = np.random.default_rng(9)
    n = 3
    bonds = np.zeros((n, n), dtype=np.int64)
    bonds[0, 1] = bonds[1, 0] = 1
    tup = TrainingTuple(
        atom_idx=rng.integers(0, 4, size=n),
        charge_idx=np.ones(n, dtype=np.int64),
        bonds=bonds,
        x=zero_center(rng.standard_normal((n, 3))),
        y=zero_center(rng.standard_normal((n, 3))),
    )
    st = _random_state(n, _CHECK_VOCAB, rng)
    inputs = collate_states([st], dtype=torch.float64)
    targets = collate_targets([tup], dtype=torch.float64)
    weights = LossWeights()

    def loss_value() -> torch.Tensor:
        return total_loss(model(**inputs), targets, weights).total

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    flat = [(pi, i) for pi, p in enumerate(params) for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    h = 1e-4
    bad = 0
    worst = 0.0
    with torch.no_grad():
        for pick in picks:
            pi, i = flat[pick]
            p = params[pi]
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + h
            up = loss_value().item()
            p.view(-1)[i] = orig - h
            dn = loss_value().item()
            p.view(-1)[i] = orig
            fd = (up - dn) / (2 * h)
            an = p.grad.view(-1)[i].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            if rel > 1e-4:
                bad += 1
    ok = bad == 0
    return ok, f"{len(picks)} params checked, worst rel err {worst:.3e} (tol 1e-4)"


ALL_CHECKS = [
    ("rotation_equivariance", check_rotation_equivariance),
    ("permutation_equivariance", check_permutation_equivariance),
    ("conformer_independence", check_conformer_independence),
    ("jacobian_factorization", check_jacobian_factorization),
    ("ode_consistency", check_ode_consistency),
    ("categorical_dynamics", check_categorical_dynamics),
    ("loss_gradients", check_loss_gradients),
]
