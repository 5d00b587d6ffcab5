"""Training objective: coordinate regression, categorical NLL and regularisers.

All single-molecule ops take unbatched torch tensors and stay differentiable.
``total_loss`` reduces a padded batch by slicing each molecule out and
averaging, which keeps every normaliser exactly per-molecule.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .core import ModelOutput

ALIGN_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    coord: float = 1.0
    atom: float = 1.0
    charge: float = 1.0
    bond: float = 1.0
    adjacency: float = 1.0
    alignment: float = 1.0


@dataclass
class LossBreakdown:
    coord: torch.Tensor
    atom: torch.Tensor
    charge: torch.Tensor
    bond: torch.Tensor
    adj_x: torch.Tensor
    adj_y: torch.Tensor
    align_bond: torch.Tensor
    align_type: torch.Tensor
    align_charge: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def coord_loss(x_hat, x1, y_hat, y1) -> torch.Tensor:
    """Mean squared endpoint error summed over both coordinate branches."""
    n = x1.shape[0]
    lx = (x_hat - x1).pow(2).sum(dim=-1).sum() / n
    ly = (y_hat - y1).pow(2).sum(dim=-1).sum() / n
    return lx + ly


def categorical_nll(logits, targets, normalizer: float) -> torch.Tensor:
    """Summed negative log-likelihood divided by an explicit normaliser."""
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -picked.sum() / normalizer


def _pair_distances(coords: torch.Tensor) -> torch.Tensor:
    diff = coords[:, None, :] - coords[None, :, :]
    return torch.sqrt(diff.pow(2).sum(dim=-1) + 1e-24)


def adjacency_loss(pred_coords, target_coords, target_bonds) -> torch.Tensor:
    """Mean absolute deviation of bonded-pair distances, normalised by n^2.

    Only pairs carrying a bond in the target graph contribute.
    """
    n = target_coords.shape[0]
    bonded = target_bonds > 0
    d_pred = _pair_distances(pred_coords)
    d_true = _pair_distances(target_coords)
    gap = torch.where(bonded, d_pred - d_true, torch.zeros_like(d_pred))
    return gap.abs().sum() / (n * n)


def alignment_loss(logits_x, logits_y, targets, normalizer: float) -> torch.Tensor:
    """Pull y-branch logits onto the x branch and onto the data.

    Squared logit gap divided by sqrt(#elements), plus the y-branch NLL
    against the target labels divided by #elements.
    """
    gap = (logits_x - logits_y).pow(2).sum()
    count = float(targets.numel())
    return gap / (count**0.5 + ALIGN_EPS) + categorical_nll(logits_y, targets, normalizer)


def molecule_loss(
    x_hat, y_hat,
    atom_logits_x, charge_logits_x, bond_logits_x,
    atom_logits_y, charge_logits_y, bond_logits_y,
    x1, y1, atom_idx, charge_idx, bonds,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """All loss components for one molecule (unbatched tensors)."""
    n = atom_idx.shape[0]
    l_coord = coord_loss(x_hat, x1, y_hat, y1)
    l_atom = categorical_nll(atom_logits_x, atom_idx, float(n))
    l_charge = categorical_nll(charge_logits_x, charge_idx, float(n))
    l_bond = categorical_nll(
        bond_logits_x.reshape(n * n, -1), bonds.reshape(n * n), float(n * n)
    )
    l_adj_x = adjacency_loss(x_hat, x1, bonds)
    l_adj_y = adjacency_loss(y_hat, y1, bonds)
    l_align_bond = alignment_loss(
        bond_logits_x.reshape(n * n, -1),
        bond_logits_y.reshape(n * n, -1),
        bonds.reshape(n * n),
        float(n * n),
    )
    l_align_type = alignment_loss(atom_logits_x, atom_logits_y, atom_idx, float(n))
    l_align_charge = alignment_loss(charge_logits_x, charge_logits_y, charge_idx, float(n))

    total = (
        weights.coord * l_coord
        + weights.atom * l_atom
        + weights.charge * l_charge
        + weights.bond * l_bond
        + weights.adjacency * (l_adj_x + l_adj_y)
        + weights.alignment * (l_align_bond + l_align_type + l_align_charge)
    )
    return LossBreakdown(
        coord=l_coord, atom=l_atom, charge=l_charge, bond=l_bond,
        adj_x=l_adj_x, adj_y=l_adj_y,
        align_bond=l_align_bond, align_type=l_align_type, align_charge=l_align_charge,
        total=total,
    )


def total_loss(
    out: ModelOutput,
    targets: dict,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Batch loss: per-molecule components averaged in a fixed order.

    ``targets`` carries padded tensors ``x1``/``y1`` (B, N, 3), ``atom_idx``/
    ``charge_idx`` (B, N) and ``bonds`` (B, N, N); real atoms are given by
    ``out.mask``.
    """
    batch = out.mask.shape[0]
    parts: list[LossBreakdown] = []
    for b in range(batch):
        n = int(out.mask[b].sum())
        sl = slice(0, n)
        parts.append(
            molecule_loss(
                out.x_hat[b, sl], out.y_hat[b, sl],
                out.atom_logits_x[b, sl], out.charge_logits_x[b, sl],
                out.bond_logits_x[b, sl, sl],
                out.atom_logits_y[b, sl], out.charge_logits_y[b, sl],
                out.bond_logits_y[b, sl, sl],
                targets["x1"][b, sl], targets["y1"][b, sl],
                targets["atom_idx"][b, sl], targets["charge_idx"][b, sl],
                targets["bonds"][b, sl, sl],
                weights,
            )
        )
    acc = {f.name: sum(getattr(p, f.name) for p in parts) / batch for f in fields(LossBreakdown)}
    return LossBreakdown(**acc)
