"""Dual-branch equivariant network over molecular graphs.

Two coordinate states (a graph-defining representative ``x`` and a conformer
``y``) are processed side by side. Invariant features interact through
channel-wise scalar products only, so the network is equivariant to
*independent* rotations of the two coordinate states. Information flows one
way: the x branch never reads y features, which is what makes fixed-graph
conformer sampling possible.

Tensor layout: invariant features ``(B, N, d)``, edge features ``(B, N, N, de)``,
coordinate channels ``(B, N, dc, 3)``, boolean atom mask ``(B, N)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .core import ModelOutput, NoisyState, Vocabularies

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 384
    d_edge: int = 128
    d_coord: int = 64
    d_message: int = 64
    d_message_hidden: int = 64
    n_attn_heads: int = 12
    time_embed_dim: int = 64
    # Hidden widths of the two feed-forward MLPs; 0 means "use the default
    # multiple of d_model" (5x for the feature MLP, 4x for the gate MLP).
    ff_hidden: int = 0
    gate_hidden: int = 0

    def __post_init__(self):
        for name in (
            "n_layers", "d_model", "d_edge", "d_coord",
            "d_message", "d_message_hidden", "n_attn_heads", "time_embed_dim",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_attn_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by "
                f"n_attn_heads ({self.n_attn_heads})"
            )

    @property
    def ff_hidden_dim(self) -> int:
        return self.ff_hidden if self.ff_hidden > 0 else 5 * self.d_model

    @property
    def gate_hidden_dim(self) -> int:
        return self.gate_hidden if self.gate_hidden > 0 else 4 * self.d_model


MODEL_PRESETS: dict[str, ModelConfig] = {
    "small": ModelConfig(n_layers=6, d_model=384, d_edge=128, d_coord=64,
                         d_message=64, d_message_hidden=64, n_attn_heads=12),
    "medium": ModelConfig(n_layers=8, d_model=384, d_edge=128, d_coord=64,
                          d_message=128, d_message_hidden=128, n_attn_heads=32),
    "large": ModelConfig(n_layers=12, d_model=384, d_edge=128, d_coord=64,
                         d_message=128, d_message_hidden=128, n_attn_heads=32),
    # Tiny configuration for tests and toy runs on a laptop CPU.
    "desk": ModelConfig(n_layers=2, d_model=64, d_edge=32, d_coord=16,
                        d_message=32, d_message_hidden=32, n_attn_heads=4,
                        time_embed_dim=16, ff_hidden=128, gate_hidden=128),
}


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of flow time t in [0, 1], shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = 1000.0 * t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax that assigns exactly zero weight to masked slots.

    Rows with no valid entries (e.g. a single-atom molecule attending over an
    empty neighbourhood) come out as all-zero rather than NaN.
    """
    mask_f = mask.to(logits.dtype)
    scores = logits.masked_fill(~mask, -1e30)
    scores = scores - scores.amax(dim=dim, keepdim=True).detach()
    weights = torch.exp(scores) * mask_f
    denom = weights.sum(dim=dim, keepdim=True)
    return weights / (denom + 1e-30)


def _zero_init(linear: nn.Linear) -> nn.Linear:
    nn.init.zeros_(linear.weight)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)
    return linear


class ChannelLinear(nn.Module):
    """Linear mixing of coordinate channels: (B, N, C_in, 3) -> (B, N, C_out, 3).

    Acts on the channel axis only and carries no bias, so rotations applied to
    the trailing 3-vector axis commute with it.
    """

    def __init__(self, c_in: int, c_out: int, zero: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in))
        if zero:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return torch.einsum("oc,bncv->bnov", self.weight, coords)


class EquivariantNorm(nn.Module):
    """Per-channel RMS normalisation of coordinate sets with a learnable gain.

    Each channel is divided by the root-mean-square (over real atoms) of its
    vector norms, which rescales but never rotates, keeping the layer
    equivariant.
    """

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(channels))
        self.eps = eps

    def forward(self, coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # coords: (B, N, C, 3), mask: (B, N)
        mask_f = mask.to(coords.dtype)[:, :, None]
        sq_norms = coords.pow(2).sum(dim=-1)  # (B, N, C)
        n_real = mask_f.sum(dim=1, keepdim=True).clamp(min=1.0)
        mean_sq = (sq_norms * mask_f).sum(dim=1, keepdim=True) / n_real
        rms = torch.sqrt(mean_sq + 1e-24)  # (B, 1, C)
        return self.gain[None, None, :, None] * coords / (rms[..., None] + self.eps)


def _mlp(d_in: int, d_hidden: int, d_out: int, zero_last: bool = False) -> nn.Sequential:
    last = nn.Linear(d_hidden, d_out)
    if zero_last:
        _zero_init(last)
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), last)


def _channel_norms(coords: torch.Tensor) -> torch.Tensor:
    """Per-channel vector norms, (B, N, C, 3) -> (B, N, C), smooth at zero."""
    return torch.sqrt(coords.pow(2).sum(dim=-1) + 1e-24)


class FeedForwardBlock(nn.Module):
    """Residual per-atom update of invariant features and coordinate channels.

    The same MLPs serve both branches; only the inputs differ. Invariant
    features see the channel norms of their branch's coordinates, coordinates
    get a channel-mixed update gated by invariant features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dc = cfg.d_model, cfg.d_coord
        self.inv_norm = nn.LayerNorm(d)
        self.equi_norm = EquivariantNorm(dc)
        self.phi = _mlp(d + dc, cfg.ff_hidden_dim, d, zero_last=True)
        self.psi = _mlp(d, cfg.gate_hidden_dim, dc)
        self.w_f = ChannelLinear(dc, dc)
        self.w_g = ChannelLinear(dc, dc, zero=True)

    def _update(self, h, coords, mask):
        mask_f = mask.to(coords.dtype)
        h_n = self.inv_norm(h)
        c_n = self.equi_norm(coords, mask)
        h_out = h + self.phi(torch.cat([h_n, _channel_norms(c_n)], dim=-1))
        gate = self.psi(h_n)  # (B, N, dc)
        c_out = coords + self.w_g(gate[..., None] * self.w_f(c_n))
        return h_out * mask_f[..., None], c_out * mask_f[..., None, None]

    def forward(self, h_x, h_y, x, y, mask):
        h_x, x = self._update(h_x, x, mask)
        h_y, y = self._update(h_y, y, mask)
        return h_x, h_y, x, y


class AttentionBlock(nn.Module):
    """Pairwise message computation plus invariant/equivariant attention.

    Message MLPs are per-branch because the y branch additionally conditions
    on products of the two branches' pair features; everything downstream of
    the messages (value, output and direction projections) is shared.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, de, dc = cfg.d_model, cfg.d_edge, cfg.d_coord
        heads, msg = cfg.n_attn_heads, cfg.d_message
        self.heads = heads
        self.d_head = d // heads
        self.d_edge = de

        self.inv_norm = nn.LayerNorm(d)
        self.equi_norm = EquivariantNorm(dc)
        self.edge_norm = nn.LayerNorm(de)

        self.w_h = nn.Linear(d, msg)
        out_dim = 2 * heads + de
        self.mlp_x = _mlp(2 * msg + dc + de, cfg.d_message_hidden, out_dim)
        self.mlp_y = _mlp(2 * msg + 2 * dc + de, cfg.d_message_hidden, out_dim)
        # The edge slice of the message output feeds a residual update, so its
        # rows start at zero like every other residual head.
        for mlp in (self.mlp_x, self.mlp_y):
            nn.init.zeros_(mlp[-1].weight[2 * heads:])
            nn.init.zeros_(mlp[-1].bias[2 * heads:])

        self.w_v = nn.Linear(d, d)
        self.w_z = _zero_init(nn.Linear(d, d))
        self.w_r = ChannelLinear(dc, heads)
        self.w_s = ChannelLinear(heads, dc, zero=True)

    @staticmethod
    def _pair_products(coords: torch.Tensor) -> torch.Tensor:
        """Channel-wise scalar products, (B, N, C, 3) -> (B, N, N, C)."""
        return torch.einsum("bicv,bjcv->bijc", coords, coords)

    def _pair_features(self, h_n: torch.Tensor) -> torch.Tensor:
        n = h_n.shape[1]
        hp = self.w_h(h_n)  # (B, N, msg)
        hp_i = hp[:, :, None, :].expand(-1, -1, n, -1)
        hp_j = hp[:, None, :, :].expand(-1, n, -1, -1)
        return torch.cat([hp_i, hp_j], dim=-1)  # (B, N, N, 2*msg)

    def compute_messages(self, h_x, h_y, e_x, e_y, x, y, mask):
        """Per-branch pair messages; the x branch sees only x-side features."""
        x_n = self.equi_norm(x, mask)
        y_n = self.equi_norm(y, mask)
        hx_n = self.inv_norm(h_x)
        hy_n = self.inv_norm(h_y)
        ex_n = self.edge_norm(e_x)
        ey_n = self.edge_norm(e_y)

        x_p = self._pair_products(x_n)
        y_p = self._pair_products(y_n)
        hp_x = self._pair_features(hx_n)
        hp_y = self._pair_features(hy_n)

        omega_x = self.mlp_x(torch.cat([hp_x, x_p, ex_n], dim=-1))
        omega_y = self.mlp_y(torch.cat([hp_x * hp_y, x_p, y_p, ex_n * ey_n], dim=-1))
        return omega_x, omega_y, (hx_n, hy_n, x_n, y_n)

    def _attend(self, omega, h_n, c_n, pair_mask):
        heads = self.heads
        att_inv = omega[..., :heads]
        att_eq = omega[..., heads:2 * heads]
        edge_upd = omega[..., 2 * heads:]

        pm = pair_mask[..., None]
        alpha = masked_softmax(att_inv, pm, dim=2)  # (B, N, N, K)
        b, n = h_n.shape[:2]
        values = self.w_v(h_n).reshape(b, n, heads, self.d_head)
        h_aggr = torch.einsum("bijk,bjkd->bikd", alpha, values)
        scale = torch.sqrt(alpha.pow(2).sum(dim=2) + 1e-24)  # (B, N, K)
        h_msg = self.w_z((h_aggr * scale[..., None]).reshape(b, n, -1))

        alpha_eq = masked_softmax(att_eq, pm, dim=2)
        dirs = self.w_r(c_n)  # (B, N, K, 3)
        diff = dirs[:, :, None, :, :] - dirs[:, None, :, :, :]  # (B, N, N, K, 3)
        norm = torch.sqrt(diff.pow(2).sum(dim=-1, keepdim=True) + 1e-24)
        unit = diff / (norm + 1e-12)
        c_aggr = torch.einsum("bijk,bijkv->bikv", alpha_eq, unit)
        scale_eq = torch.sqrt(alpha_eq.pow(2).sum(dim=2) + 1e-24)
        c_msg = self.w_s(c_aggr * scale_eq[..., None])

        return h_msg, c_msg, edge_upd

    def forward(self, h_x, h_y, e_x, e_y, x, y, mask):
        omega_x, omega_y, normed = self.compute_messages(h_x, h_y, e_x, e_y, x, y, mask)
        hx_n, hy_n, x_n, y_n = normed

        pair_mask = mask[:, :, None] & mask[:, None, :]
        eye = torch.eye(mask.shape[1], dtype=torch.bool, device=mask.device)
        pair_mask = pair_mask & ~eye[None]

        hx_msg, x_msg, ex_upd = self._attend(omega_x, hx_n, x_n, pair_mask)
        hy_msg, y_msg, ey_upd = self._attend(omega_y, hy_n, y_n, pair_mask)

        mask_f = mask.to(x.dtype)
        pm_f = pair_mask.to(x.dtype)[..., None]
        h_x = (h_x + hx_msg) * mask_f[..., None]
        h_y = (h_y + hy_msg) * mask_f[..., None]
        x = (x + x_msg) * mask_f[..., None, None]
        y = (y + y_msg) * mask_f[..., None, None]
        e_x = e_x + 0.5 * (ex_upd + ex_upd.transpose(1, 2)) * pm_f
        e_y = e_y + 0.5 * (ey_upd + ey_upd.transpose(1, 2)) * pm_f
        return h_x, h_y, e_x, e_y, x, y


class InteractionLayer(nn.Module):
    """One network layer: feed-forward block followed by graph attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ff = FeedForwardBlock(cfg)
        self.attention = AttentionBlock(cfg)

    def forward(self, h_x, h_y, e_x, e_y, x, y, mask):
        h_x, h_y, x, y = self.ff(h_x, h_y, x, y, mask)
        return self.attention(h_x, h_y, e_x, e_y, x, y, mask)


class EdgeUpdateLayer(nn.Module):
    """Pairwise refinement of edge features from node features and geometry.

    The pair descriptor stacks both endpoint features, the squared distance
    and inner product of the (normalised) coordinate sets summed over
    channels, and the current edge state. Output is symmetrised.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, de, dc = cfg.d_model, cfg.d_edge, cfg.d_coord
        self.inv_norm = nn.LayerNorm(d)
        self.equi_norm = EquivariantNorm(dc)
        self.edge_norm = nn.LayerNorm(de)
        self.w_p = nn.Linear(d, de)
        self.mlp = _mlp(2 * de + 2 + de, de, de)

    def forward(self, x, h, e, mask):
        n = h.shape[1]
        c_n = self.equi_norm(x, mask)
        hp = self.w_p(self.inv_norm(h))
        e_n = self.edge_norm(e)

        prod = torch.einsum("bicv,bjcv->bij", c_n, c_n)[..., None]  # sum over channels
        sq = c_n.pow(2).sum(dim=(-1, -2))  # (B, N)
        dist_sq = (sq[:, :, None] + sq[:, None, :] - 2.0 * prod[..., 0])[..., None]

        hp_i = hp[:, :, None, :].expand(-1, -1, n, -1)
        hp_j = hp[:, None, :, :].expand(-1, n, -1, -1)
        feats = torch.cat([hp_i, hp_j, dist_sq, prod, e_n], dim=-1)
        out = self.mlp(feats)
        out = 0.5 * (out + out.transpose(1, 2))
        pair_mask = (mask[:, :, None] & mask[:, None, :]).to(out.dtype)[..., None]
        return out * pair_mask


class RefinementHead(nn.Module):
    """Final feed-forward pass, coordinate collapse and logit heads.

    Heads are shared between the branches; bond logits are symmetrised.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabularies):
        super().__init__()
        d, de, dc = cfg.d_model, cfg.d_edge, cfg.d_coord
        self.ff = FeedForwardBlock(cfg)
        self.out_equi_norm = EquivariantNorm(dc)
        self.collapse = ChannelLinear(dc, 1)
        self.edge_update = EdgeUpdateLayer(cfg)
        self.node_norm = nn.LayerNorm(d)
        self.bond_norm = nn.LayerNorm(de)
        self.atom_head = _mlp(d, d, vocab.n_atom_types)
        self.charge_head = _mlp(d, d, vocab.n_charge_types)
        self.bond_head = _mlp(de, de, vocab.n_bond_types)

    def _branch(self, h, e, coords, mask):
        mask_f = mask.to(coords.dtype)
        coords_out = self.collapse(self.out_equi_norm(coords, mask))[:, :, 0, :]
        coords_out = coords_out * mask_f[..., None]
        e_ref = self.edge_update(coords, h, e, mask)
        h_n = self.node_norm(h)
        atom_logits = self.atom_head(h_n) * mask_f[..., None]
        charge_logits = self.charge_head(h_n) * mask_f[..., None]
        bond_logits = self.bond_head(self.bond_norm(e_ref))
        bond_logits = 0.5 * (bond_logits + bond_logits.transpose(1, 2))
        pair_mask = (mask[:, :, None] & mask[:, None, :]).to(coords.dtype)[..., None]
        return coords_out, atom_logits, charge_logits, bond_logits * pair_mask

    def forward(self, h_x, h_y, e_x, e_y, x, y, mask) -> ModelOutput:
        h_x, h_y, x, y = self.ff(h_x, h_y, x, y, mask)
        x_hat, atom_x, charge_x, bond_x = self._branch(h_x, e_x, x, mask)
        y_hat, atom_y, charge_y, bond_y = self._branch(h_y, e_y, y, mask)
        return ModelOutput(
            x_hat=x_hat, y_hat=y_hat,
            atom_logits_x=atom_x, charge_logits_x=charge_x, bond_logits_x=bond_x,
            atom_logits_y=atom_y, charge_logits_y=charge_y, bond_logits_y=bond_y,
            mask=mask,
        )


class DualFlowNet(nn.Module):
    """The full network: featurisation, interaction layers, refinement head."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabularies):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d, de = cfg.d_model, cfg.d_edge
        in_dim = vocab.n_atom_types + vocab.n_charge_types + cfg.time_embed_dim
        self.node_embed = _mlp(in_dim, d, d)
        self.edge_embed = _mlp(vocab.n_bond_types, de, de)
        self.coord_lift = ChannelLinear(1, cfg.d_coord)
        self.layers = nn.ModuleList(InteractionLayer(cfg) for _ in range(cfg.n_layers))
        self.head = RefinementHead(cfg, vocab)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def featurize(self, atom_idx, charge_idx, bonds, x_t, y_t, t, mask):
        """Build initial branch features; both branches start from the same h/e."""
        v = self.vocab
        a_oh = torch.nn.functional.one_hot(atom_idx, v.n_atom_types).to(x_t.dtype)
        c_oh = torch.nn.functional.one_hot(charge_idx, v.n_charge_types).to(x_t.dtype)
        t_emb = time_embedding(t.to(x_t.dtype), self.cfg.time_embed_dim)
        t_emb = t_emb[:, None, :].expand(-1, atom_idx.shape[1], -1)
        h = self.node_embed(torch.cat([a_oh, c_oh, t_emb], dim=-1))

        b_oh = torch.nn.functional.one_hot(bonds, v.n_bond_types).to(x_t.dtype)
        e = self.edge_embed(b_oh)

        x = self.coord_lift(x_t[:, :, None, :])
        y = self.coord_lift(y_t[:, :, None, :])

        mask_f = mask.to(x_t.dtype)
        h = h * mask_f[..., None]
        pair_f = (mask[:, :, None] & mask[:, None, :]).to(x_t.dtype)[..., None]
        e = e * pair_f
        x = x * mask_f[..., None, None]
        y = y * mask_f[..., None, None]
        return h, h.clone(), e, e.clone(), x, y

    def forward(self, atom_idx, charge_idx, bonds, x_t, y_t, t, mask=None) -> ModelOutput:
        """Predict endpoints and categorical logits for a padded batch.

        atom_idx/charge_idx: (B, N) long; bonds: (B, N, N) long;
        x_t/y_t: (B, N, 3); t: (B,); mask: (B, N) bool (default all-real).
        """
        if mask is None:
            mask = torch.ones_like(atom_idx, dtype=torch.bool)
        v = self.vocab
        if int(atom_idx.max()) >= v.n_atom_types or int(atom_idx.min()) < 0:
            raise ValueError("atom index outside the vocabulary")
        if int(bonds.max()) >= v.n_bond_types or int(bonds.min()) < 0:
            raise ValueError("bond index outside the vocabulary")
        if int(charge_idx.max()) >= v.n_charge_types or int(charge_idx.min()) < 0:
            raise ValueError("charge index outside the vocabulary")

        h_x, h_y, e_x, e_y, x, y = self.featurize(
            atom_idx, charge_idx, bonds, x_t, y_t, t, mask
        )
        for i, layer in enumerate(self.layers):
            h_x, h_y, e_x, e_y, x, y = layer(h_x, h_y, e_x, e_y, x, y, mask)
            if not torch.isfinite(x).all() or not torch.isfinite(h_x).all():
                raise RuntimeError(f"non-finite features after layer {i}")
        return self.head(h_x, h_y, e_x, e_y, x, y, mask)

    def forward_state(self, state: NoisyState) -> ModelOutput:
        """Single-molecule convenience wrapper around the batched forward."""
        batch = collate_states([state], dtype=self.dtype)
        return self.forward(**batch)


def collate_states(states: list[NoisyState], dtype=torch.float32) -> dict:
    """Pad a list of per-molecule flow states into batched tensors."""
    b = len(states)
    n_max = max(s.n for s in states)
    atom = torch.zeros(b, n_max, dtype=torch.long)
    charge = torch.zeros(b, n_max, dtype=torch.long)
    bonds = torch.zeros(b, n_max, n_max, dtype=torch.long)
    x_t = torch.zeros(b, n_max, 3, dtype=dtype)
    y_t = torch.zeros(b, n_max, 3, dtype=dtype)
    t = torch.zeros(b, dtype=dtype)
    mask = torch.zeros(b, n_max, dtype=torch.bool)
    for i, s in enumerate(states):
        n = s.n
        atom[i, :n] = torch.from_numpy(np.ascontiguousarray(s.a_t))
        charge[i, :n] = torch.from_numpy(np.ascontiguousarray(s.c_t))
        bonds[i, :n, :n] = torch.from_numpy(np.ascontiguousarray(s.b_t))
        x_t[i, :n] = torch.from_numpy(np.ascontiguousarray(s.x_t)).to(dtype)
        y_t[i, :n] = torch.from_numpy(np.ascontiguousarray(s.y_t)).to(dtype)
        t[i] = float(s.t)
        mask[i, :n] = True
    return {
        "atom_idx": atom, "charge_idx": charge, "bonds": bonds,
        "x_t": x_t, "y_t": y_t, "t": t, "mask": mask,
    }


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: DualFlowNet, extra: Optional[dict] = None) -> None:
    """Write a self-describing checkpoint (config, vocab, weights, extras)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "vocab": model.vocab.to_dict(),
        "state_dict": model.state_dict(),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ValueError(f"extra keys collide with checkpoint fields: {sorted(overlap)}")
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "version" not in payload:
        raise ValueError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def model_from_checkpoint(payload: dict) -> DualFlowNet:
    cfg = ModelConfig(**payload["model_config"])
    vocab = Vocabularies.from_dict(payload["vocab"])
    model = DualFlowNet(cfg, vocab)
    model.load_state_dict(payload["state_dict"])
    return model
