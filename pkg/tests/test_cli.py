import json

import numpy as np
import pytest
import yaml

from conflow.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def read_json(out):
    return json.loads(out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One shared toy dataset + tiny trained checkpoint for the CLI tests."""
    root = tmp_path_factory.mktemp("cliws")
    ds = root / "ds"
    code = main(["dataset", "make-toy", "--out", str(ds), "--n", "5",
                 "--seed", "3", "--conformers", "3"])
    assert code == 0
    cfg = {
        "run": {"seed": 1, "epochs": 1, "out_dir": str(root / "run")},
        "data": {"dataset": str(ds), "batch_atom_budget": 48},
        "model": {
            "n_layers": 1, "d_model": 32, "d_edge": 16, "d_coord": 8,
            "d_message": 16, "d_message_hidden": 16, "n_attn_heads": 4,
            "time_embed_dim": 8, "ff_hidden": 64, "gate_hidden": 64,
        },
    }
    cfg_path = root / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return root


def test_dataset_stats(workspace, capsys):
    code, out, _ = run_cli(capsys, "dataset", "stats", "--data",
                           str(workspace / "ds"))
    assert code == 0
    stats = read_json(out)
    assert stats["n_molecules"] == 5
    assert stats["scale"] > 0


def test_sample_fresh_writes_outputs(workspace, capsys):
    out_dir = workspace / "fresh"
    code, out, _ = run_cli(
        capsys, "sample", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
        "--out", str(out_dir), "--n-molecules", "3", "--steps", "4",
        "--seed", "11",
    )
    assert code == 0
    rep = read_json(out)
    assert rep["n_molecules"] == 3
    assert (out_dir / "index.json").exists()
    sdfs = sorted((out_dir / "sdf").glob("*.sdf"))
    assert len(sdfs) == 3
    assert "seed11" in sdfs[0].name and "steps4" in sdfs[0].name


def test_sample_fixed_x_ensembles(workspace, capsys):
    out_dir = workspace / "ens"
    code, out, _ = run_cli(
        capsys, "sample", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
        "--out", str(out_dir), "--n-molecules", "2", "--n-conformers", "3",
        "--steps", "4", "--mode", "fixed-x", "--seed", "2", "--x-seed", "30",
    )
    assert code == 0
    from conflow.data import read_dataset
    graphs, _, _ = read_dataset(out_dir)
    assert all(g.m == 4 for g in graphs)  # representative + 3


def test_sample_fresh_rejects_multi_conformer(workspace, capsys):
    code, _, err = run_cli(
        capsys, "sample", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
        "--out", str(workspace / "bad"), "--n-conformers", "2", "--steps", "2",
    )
    assert code == 1
    assert err.startswith("conflow:")


def test_eval_graphs(workspace, capsys):
    code, out, _ = run_cli(
        capsys, "eval", "graphs", "--input", str(workspace / "fresh"),
        "--train", str(workspace / "ds"),
    )
    assert code == 0
    rep = read_json(out)
    for key in ("validity", "uniqueness", "atom_stability", "novelty"):
        assert key in rep


def test_eval_ensembles_with_plot(workspace, capsys):
    plot = workspace / "cov.svg"
    code, out, _ = run_cli(
        capsys, "eval", "ensembles", "--input", str(workspace / "ens"),
        "--ref", str(workspace / "ens"), "--plot", str(plot),
    )
    assert code == 0
    rep = read_json(out)
    assert rep["amr_r"] == pytest.approx(0.0, abs=1e-9)
    assert plot.exists()
    assert plot.read_text().lstrip().startswith("<?xml")


def test_eval_ensembles_size_mismatch(workspace, capsys):
    code, _, err = run_cli(
        capsys, "eval", "ensembles", "--input", str(workspace / "ens"),
        "--ref", str(workspace / "fresh"),
    )
    assert code == 1
    assert "conflow:" in err


def test_eval_diversity_plain(workspace, capsys):
    code, out, _ = run_cli(
        capsys, "eval", "diversity", "--input", str(workspace / "ens"),
    )
    assert code == 0
    rep = read_json(out)
    assert rep["mean_diversity"] is not None
    assert rep["mean_diversity"] > 0


def test_eval_diversity_strain_needs_oracle(workspace, capsys, monkeypatch):
    monkeypatch.delenv("CONFLOW_ORACLE_CMD", raising=False)
    code, _, err = run_cli(
        capsys, "eval", "diversity", "--input", str(workspace / "ens"),
        "--strain",
    )
    assert code == 1
    assert "oracle" in err


def test_eval_diversity_with_subprocess_oracle(workspace, capsys):
    code, out, _ = run_cli(
        capsys, "eval", "diversity", "--input", str(workspace / "ens"),
        "--strain", "--oracle-cmd", "python3 -m conflow.oracle_server",
        "--minimize-steps", "50",
    )
    assert code == 0
    rep = read_json(out)
    assert all("mean_strain" in row for row in rep["molecules"])


def test_verify_single_check(capsys):
    code, out, _ = run_cli(capsys, "verify", "--only", "ode_consistency")
    assert code == 0
    assert out.startswith("PASS ode_consistency")


def test_verify_injected_bug_fails(capsys):
    code, out, err = run_cli(capsys, "verify", "--only", "rotation_equivariance",
                             "--inject-bug", "equivariance")
    assert code == 2
    assert "FAIL rotation_equivariance" in out
    assert err.startswith("conflow:")


def test_missing_checkpoint_reports_cleanly(workspace, capsys):
    code, _, err = run_cli(
        capsys, "sample", "--checkpoint", str(workspace / "nope.pt"),
        "--out", str(workspace / "x"),
    )
    assert code == 1
    assert err.startswith("conflow:")


def test_train_resume_via_cli(workspace, capsys, tmp_path):
    cfg = yaml.safe_load((workspace / "cfg.yaml").read_text())
    cfg["run"]["epochs"] = 2
    cfg["run"]["out_dir"] = str(workspace / "run")
    cfg_path = tmp_path / "more.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    code, out, _ = run_cli(
        capsys, "train", "--config", str(cfg_path),
        "--resume", str(workspace / "run" / "checkpoint.pt"),
    )
    assert code == 0


def test_mnist_cli_round(workspace, capsys):
    ck = workspace / "mnist.pt"
    code, out, _ = run_cli(
        capsys, "mnist", "train", "--out", str(ck), "--n-images", "8",
        "--epochs", "1", "--batch-size", "8", "--width", "4",
    )
    assert code == 0
    png = workspace / "grid.png"
    code, out, _ = run_cli(
        capsys, "mnist", "sample", "--checkpoint", str(ck), "--out", str(png),
        "--n", "2", "--steps", "2",
    )
    assert code == 0
    rep = read_json(out)
    assert len(rep["dominant_channels"]) == 2
    assert png.exists()
