import dataclasses
import json

import numpy as np
import pytest
import torch

from conflow.core import Vocabularies
from conflow.data import generate_toy_dataset, preprocess, write_dataset
from conflow.model import ModelConfig
from conflow.training import (
    Ema,
    InterpolantConfig,
    OptimizerConfig,
    TrainConfig,
    batches_by_budget,
    collate_targets,
    load_train_config,
    lr_at,
    make_noisy_batch,
    make_noisy_state,
    save_train_config,
    train,
)
from conflow.data import build_training_tuples

TINY_MODEL = ModelConfig(
    n_layers=1, d_model=32, d_edge=16, d_coord=8, d_message=16,
    d_message_hidden=16, n_attn_heads=4, time_embed_dim=8,
    ff_hidden=64, gate_hidden=64,
)


def toy_tuples(n_mols=3, seed=0):
    graphs, vocab = generate_toy_dataset(n_mols, seed=seed, n_conformers=2)
    processed, scale = preprocess(graphs, vocab)
    tuples = [tp for g in processed for tp in build_training_tuples(g)]
    return tuples, vocab, scale


def test_lr_schedule_endpoints():
    opt = OptimizerConfig()
    assert lr_at(opt, 0) == pytest.approx(1e-5)
    assert lr_at(opt, 10000) == pytest.approx(1e-3)
    assert lr_at(opt, 20000) == pytest.approx(1e-3)


def test_lr_schedule_midpoint_linear():
    opt = OptimizerConfig()
    mid = lr_at(opt, 5000)
    assert mid == pytest.approx((1e-5 + 1e-3) / 2.0)


def test_lr_schedule_no_warmup():
    opt = OptimizerConfig(warmup_iters=0)
    assert lr_at(opt, 0) == pytest.approx(1e-3)


def test_ema_decay_zero_tracks_model():
    torch.manual_seed(0)
    lin = torch.nn.Linear(4, 4)
    ema = Ema(lin, decay=0.0)
    with torch.no_grad():
        lin.weight.add_(1.0)
    ema.update(lin)
    assert torch.equal(ema.shadow["weight"], lin.weight)


def test_ema_decay_one_freezes():
    torch.manual_seed(1)
    lin = torch.nn.Linear(4, 4)
    before = lin.weight.detach().clone()
    ema = Ema(lin, decay=1.0)
    with torch.no_grad():
        lin.weight.add_(5.0)
    ema.update(lin)
    assert torch.equal(ema.shadow["weight"], before)


def test_ema_mixes_at_expected_rate():
    lin = torch.nn.Linear(2, 2)
    with torch.no_grad():
        lin.weight.zero_()
    ema = Ema(lin, decay=0.9)
    with torch.no_grad():
        lin.weight.fill_(1.0)
    ema.update(lin)
    assert torch.allclose(ema.shadow["weight"],
                          torch.full_like(lin.weight, 0.1))


def test_batches_by_budget_covers_all_and_respects_budget():
    rng = np.random.default_rng(2)
    sizes = [5, 9, 3, 12, 7, 4, 6]
    batches = batches_by_budget(sizes, budget=15, rng=rng)
    seen = sorted(i for b in batches for i in b)
    assert seen == list(range(len(sizes)))
    for b in batches:
        if len(b) > 1:
            assert sum(sizes[i] for i in b) <= 15


def test_batches_by_budget_oversized_molecule_alone():
    rng = np.random.default_rng(3)
    batches = batches_by_budget([50, 2], budget=10, rng=rng)
    big = [b for b in batches if 0 in b][0]
    assert big == [0]


def test_make_noisy_state_layout():
    tuples, vocab, _ = toy_tuples()
    rng = np.random.default_rng(4)
    st = make_noisy_state(tuples[0], vocab, InterpolantConfig(), rng)
    n = tuples[0].n
    assert st.x_t.shape == (n, 3)
    assert 0.0 <= st.t <= 1.0
    assert np.array_equal(st.b_t, st.b_t.T)
    assert np.all(np.diag(st.b_t) == 0)
    assert st.a_t.max() < vocab.n_atom_types


def test_make_noisy_state_t_one_hits_targets():
    tuples, vocab, _ = toy_tuples()
    rng = np.random.default_rng(5)
    icfg = InterpolantConfig(sigma=0.0, time_alpha=1e9, time_beta=1e-9)
    # with alpha huge and beta tiny the Beta draw is pinned to 1
    st = make_noisy_state(tuples[0], vocab, icfg, rng)
    assert st.t > 0.999
    assert np.allclose(st.x_t, tuples[0].x, atol=1e-2)
    assert np.array_equal(st.a_t, tuples[0].atom_idx)
    assert np.array_equal(st.b_t, tuples[0].bonds)


def test_make_noisy_batch_shapes():
    tuples, vocab, _ = toy_tuples()
    rng = np.random.default_rng(6)
    inputs, targets = make_noisy_batch(tuples[:3], vocab, InterpolantConfig(), rng)
    n_max = max(tp.n for tp in tuples[:3])
    assert inputs["x_t"].shape == (3, n_max, 3)
    assert targets["x1"].shape == (3, n_max, 3)
    assert inputs["mask"].shape == (3, n_max)
    assert targets["bonds"].shape == (3, n_max, n_max)
    for i, tp in enumerate(tuples[:3]):
        assert inputs["mask"][i].sum() == tp.n


def test_collate_targets_zero_pads():
    tuples, _, _ = toy_tuples()
    pair = [tuples[0], tuples[1]]
    targets = collate_targets(pair)
    n_small = min(tp.n for tp in pair)
    idx_small = 0 if pair[0].n == n_small else 1
    assert torch.all(targets["x1"][idx_small, n_small:] == 0)
    assert torch.all(targets["atom_idx"][idx_small, n_small:] == 0)


def test_config_yaml_roundtrip(tmp_path):
    cfg = TrainConfig(
        seed=11, epochs=3, max_steps=50, dataset="somewhere",
        out_dir="out", batch_atom_budget=77, model=TINY_MODEL,
        interpolant=InterpolantConfig(sigma=0.3),
        optimizer=OptimizerConfig(learning_rate=5e-4, ema_decay=0.99),
    )
    path = tmp_path / "cfg.yaml"
    save_train_config(cfg, path)
    loaded = load_train_config(path)
    assert loaded == cfg


def test_train_smoke_and_exact_resume(tmp_path):
    graphs, vocab = generate_toy_dataset(3, seed=1, n_conformers=2)
    processed, scale = preprocess(graphs, vocab)
    ds = tmp_path / "ds"
    write_dataset(ds, processed, vocab, scale)

    base = TrainConfig(
        seed=5, epochs=2, dataset=str(ds), out_dir=str(tmp_path / "runA"),
        batch_atom_budget=64, model=TINY_MODEL,
    )
    model_a, hist_a = train(base)
    assert hist_a
    assert (tmp_path / "runA" / "checkpoint.pt").exists()
    log_lines = (tmp_path / "runA" / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == len(hist_a)
    rec = json.loads(log_lines[0])
    assert {"iteration", "lr", "total", "coord"} <= set(rec)

    # straight 4-epoch run vs 2 + 2 with a resume must agree bit for bit
    cfg4 = dataclasses.replace(base, epochs=4, out_dir=str(tmp_path / "runB"))
    model_b, _ = train(cfg4)
    cfg_resume = dataclasses.replace(base, epochs=4)
    model_c, _ = train(cfg_resume, resume_from=str(tmp_path / "runA" / "checkpoint.pt"))
    for k, v in model_b.state_dict().items():
        assert torch.equal(v, model_c.state_dict()[k]), k


def test_train_max_steps_cap(tmp_path):
    graphs, vocab = generate_toy_dataset(3, seed=2, n_conformers=2)
    processed, scale = preprocess(graphs, vocab)
    ds = tmp_path / "ds"
    write_dataset(ds, processed, vocab, scale)
    cfg = TrainConfig(
        seed=6, epochs=50, max_steps=3, dataset=str(ds),
        out_dir=str(tmp_path / "run"), batch_atom_budget=64, model=TINY_MODEL,
    )
    _, hist = train(cfg)
    assert len(hist) == 3


def test_checkpoint_carries_sampler_metadata(tmp_path):
    graphs, vocab = generate_toy_dataset(2, seed=3, n_conformers=2)
    processed, scale = preprocess(graphs, vocab)
    ds = tmp_path / "ds"
    write_dataset(ds, processed, vocab, scale)
    cfg = TrainConfig(
        seed=7, epochs=1, dataset=str(ds), out_dir=str(tmp_path / "run"),
        batch_atom_budget=64, model=TINY_MODEL,
    )
    train(cfg)
    payload = torch.load(tmp_path / "run" / "checkpoint.pt", weights_only=False)
    trainer = payload["trainer"]
    assert trainer["scale"] == pytest.approx(scale)
    assert sum(trainer["size_histogram"].values()) == sum(g.m for g in processed)
    assert "ema_state" in trainer and "optimizer_state" in trainer
