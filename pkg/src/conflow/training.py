"""Training: noisy-state construction, schedule, EMA, checkpointed loop.

The loop is deterministic given the config seed: dataset order, time draws,
priors and parameter init all derive from it, and checkpoints carry enough
RNG state to resume bit-exactly at epoch boundaries.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from . import flow
from .core import NoisyState, TrainingTuple, Vocabularies, zero_center
from .data import build_training_tuples, read_dataset
from .losses import LossBreakdown, LossWeights, total_loss
from .model import DualFlowNet, ModelConfig, collate_states, save_checkpoint


@dataclass(frozen=True)
class InterpolantConfig:
    sigma: float = 0.2
    time_alpha: float = 2.0
    time_beta: float = 1.0


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    warmup_start_factor: float = 1e-2
    warmup_iters: int = 10000
    ema_decay: float = 0.999


@dataclass
class TrainConfig:
    seed: int = 42
    epochs: int = 1
    max_steps: int = 0  # 0 = no cap
    batch_atom_budget: int = 256
    dataset: str = ""
    out_dir: str = "runs/run"
    model: ModelConfig = field(default_factory=lambda: ModelConfig())
    interpolant: InterpolantConfig = field(default_factory=InterpolantConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)


def load_train_config(path) -> TrainConfig:
    """Read the nested YAML config (run/data/model/interpolant/optimizer/loss)."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    run = raw.get("run", {})
    data = raw.get("data", {})
    return TrainConfig(
        seed=int(run.get("seed", 42)),
        epochs=int(run.get("epochs", 1)),
        max_steps=int(run.get("max_steps", 0)),
        out_dir=str(run.get("out_dir", "runs/run")),
        dataset=str(data.get("dataset", "")),
        batch_atom_budget=int(data.get("batch_atom_budget", 256)),
        model=ModelConfig(**raw.get("model", {})),
        interpolant=InterpolantConfig(**raw.get("interpolant", {})),
        optimizer=OptimizerConfig(**raw.get("optimizer", {})),
        loss=LossWeights(**raw.get("loss", {})),
    )


def save_train_config(cfg: TrainConfig, path) -> None:
    doc = {
        "run": {
            "seed": cfg.seed, "epochs": cfg.epochs,
            "max_steps": cfg.max_steps, "out_dir": cfg.out_dir,
        },
        "data": {"dataset": cfg.dataset, "batch_atom_budget": cfg.batch_atom_budget},
        "model": asdict(cfg.model),
        "interpolant": asdict(cfg.interpolant),
        "optimizer": asdict(cfg.optimizer),
        "loss": asdict(cfg.loss),
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def lr_at(opt: OptimizerConfig, iteration: int) -> float:
    """Linear warmup from start_factor * lr to lr over warmup_iters, then flat."""
    if opt.warmup_iters <= 0:
        return opt.learning_rate
    frac = min(iteration, opt.warmup_iters) / opt.warmup_iters
    factor = opt.warmup_start_factor + (1.0 - opt.warmup_start_factor) * frac
    return opt.learning_rate * factor


# ---------------------------------------------------------------------------
# Noisy-state construction
# ---------------------------------------------------------------------------

def _symmetric_uniform_bonds(n: int, n_types: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform bond prior: i.i.d. over the upper triangle, mirrored, zero diagonal."""
    b = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, k=1)
    b[iu] = rng.integers(0, n_types, size=len(iu[0]))
    return b + b.T


def make_noisy_state(
    example: TrainingTuple,
    vocab: Vocabularies,
    icfg: InterpolantConfig,
    rng: np.random.Generator,
) -> NoisyState:
    """Draw t and the full noisy joint state for one training tuple."""
    n = example.n
    t = flow.sample_time(rng, icfg.time_alpha, icfg.time_beta)
    x0 = zero_center(rng.standard_normal((n, 3)))
    y0 = zero_center(rng.standard_normal((n, 3)))
    x_t = flow.interpolate_coords(x0, example.x, t, icfg.sigma, rng)
    y_t = flow.interpolate_coords(y0, example.y, t, icfg.sigma, rng)

    a0 = rng.integers(0, vocab.n_atom_types, size=n)
    c0 = rng.integers(0, vocab.n_charge_types, size=n)
    b0 = _symmetric_uniform_bonds(n, vocab.n_bond_types, rng)
    a_t = flow.cat_interp(t, a0, example.atom_idx, rng)
    c_t = flow.cat_interp(t, c0, example.charge_idx, rng)
    iu = np.triu_indices(n, k=1)
    b_t = np.zeros((n, n), dtype=np.int64)
    b_t[iu] = flow.cat_interp(t, b0[iu], example.bonds[iu], rng)
    b_t = b_t + b_t.T
    return NoisyState(x_t=x_t, y_t=y_t, a_t=a_t, b_t=b_t, c_t=c_t, t=t)


def collate_targets(tuples: Sequence[TrainingTuple], dtype=torch.float32) -> dict:
    """Pad training targets to batch tensors matching ``collate_states`` layout."""
    b = len(tuples)
    n_max = max(tp.n for tp in tuples)
    x1 = torch.zeros(b, n_max, 3, dtype=dtype)
    y1 = torch.zeros(b, n_max, 3, dtype=dtype)
    atom = torch.zeros(b, n_max, dtype=torch.long)
    charge = torch.zeros(b, n_max, dtype=torch.long)
    bonds = torch.zeros(b, n_max, n_max, dtype=torch.long)
    for i, tp in enumerate(tuples):
        n = tp.n
        x1[i, :n] = torch.from_numpy(np.ascontiguousarray(tp.x)).to(dtype)
        y1[i, :n] = torch.from_numpy(np.ascontiguousarray(tp.y)).to(dtype)
        atom[i, :n] = torch.from_numpy(np.ascontiguousarray(tp.atom_idx))
        charge[i, :n] = torch.from_numpy(np.ascontiguousarray(tp.charge_idx))
        bonds[i, :n, :n] = torch.from_numpy(np.ascontiguousarray(tp.bonds))
    return {"x1": x1, "y1": y1, "atom_idx": atom, "charge_idx": charge, "bonds": bonds}


def make_noisy_batch(
    tuples: Sequence[TrainingTuple],
    vocab: Vocabularies,
    icfg: InterpolantConfig,
    rng: np.random.Generator,
    dtype=torch.float32,
) -> tuple[dict, dict]:
    """Noisy model inputs and padded targets for a list of tuples."""
    states = [make_noisy_state(tp, vocab, icfg, rng) for tp in tuples]
    return collate_states(states, dtype=dtype), collate_targets(tuples, dtype=dtype)


def batches_by_budget(
    sizes: Sequence[int],
    budget: int,
    rng: np.random.Generator,
) -> list[list[int]]:
    """Pack indices greedily in (shuffled) size order so each batch stays
    under the atom budget (a single oversized molecule still gets its own
    batch). Grouping similar sizes keeps padding waste low when molecule
    sizes vary a lot; the batch order is shuffled so epochs do not always
    visit the same sizes in the same sequence."""
    shuffled = rng.permutation(len(sizes))
    order = sorted(shuffled, key=lambda i: -sizes[i])
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_atoms = 0
    for idx in order:
        n = sizes[idx]
        if cur and cur_atoms + n > budget:
            batches.append(cur)
            cur, cur_atoms = [], 0
        cur.append(int(idx))
        cur_atoms += n
    if cur:
        batches.append(cur)
    rng.shuffle(batches)
    return batches


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

class Ema:
    """Exponential moving average of model parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in model.state_dict().items()
        }

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def copy_to(self, model: torch.nn.Module) -> None:
        model.load_state_dict(self.shadow)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": self.shadow}

    @staticmethod
    def from_state(state: dict, model: torch.nn.Module) -> "Ema":
        ema = Ema(model, state["decay"])
        ema.shadow = {k: v.clone() for k, v in state["shadow"].items()}
        return ema


def apply_ema_weights(model: DualFlowNet, payload: dict) -> None:
    """Load EMA shadow parameters from a checkpoint payload into the model."""
    trainer = payload.get("trainer", {})
    ema_state = trainer.get("ema_state")
    if ema_state is not None:
        model.load_state_dict(ema_state["shadow"])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train_step(
    model: DualFlowNet,
    optimizer: torch.optim.Optimizer,
    inputs: dict,
    targets: dict,
    weights: LossWeights,
) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    out = model(**inputs)
    breakdown = total_loss(out, targets, weights)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def _size_histogram(tuples: Sequence[TrainingTuple]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for tp in tuples:
        hist[tp.n] = hist.get(tp.n, 0) + 1
    return hist


def train(
    cfg: TrainConfig,
    resume_from: Optional[str] = None,
    quiet: bool = True,
) -> tuple[DualFlowNet, list[dict]]:
    """Full training run. Returns the model and the per-step loss history.

    Writes ``train_log.jsonl`` (one record per step) and an epoch checkpoint
    ``checkpoint.pt`` under ``cfg.out_dir``. When ``resume_from`` points at a
    checkpoint from the same config, the run continues exactly where it
    stopped, including data order.
    """
    graphs, vocab, scale = read_dataset(cfg.dataset)
    tuples = [tp for g in graphs for tp in build_training_tuples(g)]
    if not tuples:
        raise ValueError(f"dataset {cfg.dataset} holds no training tuples")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = DualFlowNet(cfg.model, vocab)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.optimizer.learning_rate,
        weight_decay=cfg.optimizer.weight_decay,
    )
    ema = Ema(model, cfg.optimizer.ema_decay)
    rng = np.random.default_rng(cfg.seed)
    iteration = 0
    start_epoch = 0

    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["state_dict"])
        trainer = payload["trainer"]
        optimizer.load_state_dict(trainer["optimizer_state"])
        ema = Ema.from_state(trainer["ema_state"], model)
        rng = np.random.default_rng()
        rng.bit_generator.state = trainer["np_rng_state"]
        torch.set_rng_state(trainer["torch_rng_state"])
        iteration = trainer["iteration"]
        start_epoch = trainer["epoch"]

    sizes = [tp.n for tp in tuples]
    history: list[dict] = []
    log_path = out_dir / "train_log.jsonl"
    log_mode = "a" if resume_from is not None else "w"
    stop = False

    def checkpoint(epoch_done: int) -> None:
        save_checkpoint(
            out_dir / "checkpoint.pt",
            model,
            extra={
                "trainer": {
                    "iteration": iteration,
                    "epoch": epoch_done,
                    "optimizer_state": optimizer.state_dict(),
                    "ema_state": ema.state_dict(),
                    "np_rng_state": rng.bit_generator.state,
                    "torch_rng_state": torch.get_rng_state(),
                    "scale": scale,
                    "size_histogram": _size_histogram(tuples),
                    "interpolant": asdict(cfg.interpolant),
                    "train_config_seed": cfg.seed,
                },
            },
        )

    with open(log_path, log_mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            for batch_idx in batches_by_budget(sizes, cfg.batch_atom_budget, rng):
                lr = lr_at(cfg.optimizer, iteration)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                batch = [tuples[i] for i in batch_idx]
                inputs, targets = make_noisy_batch(batch, vocab, cfg.interpolant, rng)
                breakdown = train_step(model, optimizer, inputs, targets, cfg.loss)
                ema.update(model)
                iteration += 1
                record = {
                    "iteration": iteration,
                    "epoch": epoch,
                    "lr": lr,
                    "n_molecules": len(batch),
                    **breakdown.to_dict(),
                }
                history.append(record)
                log.write(json.dumps(record) + "\n")
                if not quiet and iteration % 50 == 0:
                    print(f"iter {iteration} loss {record['total']:.4f} lr {lr:.2e}")
                if cfg.max_steps and iteration >= cfg.max_steps:
                    stop = True
                    break
            checkpoint(epoch + 1)
            if stop:
                break
    return model, history
