"""Command-line interface.

Subcommands: ``dataset`` (make-toy / import-sdf / stats), ``train``,
``sample``, ``eval`` (graphs / ensembles / diversity), ``verify`` and
``mnist`` (train / sample). Reports go to stdout as JSON; plots are SVG.
Errors print one ``conflow: <message>`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checks, data, metrics, mnist, sampling, training
from .core import geom_vocab, qm9_vocab
from .model import MODEL_PRESETS, DualFlowNet, load_checkpoint, model_from_checkpoint

ORACLE_ENV = "CONFLOW_ORACLE_CMD"


def _fail(message: str, code: int = 1) -> int:
    print(f"conflow: {message}", file=sys.stderr)
    return code


def _emit(report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def cmd_dataset_make_toy(args) -> int:
    graphs, vocab = data.generate_toy_dataset(
        args.n, seed=args.seed, n_conformers=args.conformers
    )
    processed, scale = data.preprocess(graphs, vocab)
    data.write_dataset(args.out, processed, vocab, scale)
    _emit({"out": str(args.out), "n_molecules": len(processed),
           "scale": scale, "seed": args.seed})
    return 0


def cmd_dataset_import_sdf(args) -> int:
    vocab = {"qm9": qm9_vocab, "geom": geom_vocab,
             "toy": data.toy_vocab}[args.vocab]()
    graphs = data.read_sdf(args.sdf, vocab)
    if not graphs:
        return _fail(f"no molecules parsed from {args.sdf}")
    processed, scale = data.preprocess(graphs, vocab)
    data.write_dataset(args.out, processed, vocab, scale)
    _emit({"out": str(args.out), "n_molecules": len(processed), "scale": scale})
    return 0


def cmd_dataset_stats(args) -> int:
    graphs, vocab, scale = data.read_dataset(args.data)
    stats = data.dataset_stats(graphs, vocab)
    stats["scale"] = scale
    _emit(_jsonable(stats))
    return 0


# ---------------------------------------------------------------------------
# train / sample
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = training.load_train_config(args.config)
    if args.preset:
        cfg.model = MODEL_PRESETS[args.preset]
    model, history = training.train(
        cfg, resume_from=args.resume, quiet=not args.verbose
    )
    final = history[-1] if history else {}
    _emit({"out_dir": cfg.out_dir, "iterations": final.get("iteration", 0),
           "final_loss": final.get("total")})
    return 0


def _load_sampler(args):
    payload = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(payload)
    if not args.no_ema:
        training.apply_ema_weights(model, payload)
    model.eval()
    vocab = model.vocab
    trainer = payload.get("trainer", {})
    scale = float(trainer.get("scale", 1.0))
    hist = {int(k): int(v) for k, v in trainer.get("size_histogram", {}).items()}
    return model, vocab, scale, hist


def cmd_sample(args) -> int:
    model, vocab, scale, hist = _load_sampler(args)
    if not hist:
        if args.n_atoms is None:
            return _fail("checkpoint has no size histogram; pass --n-atoms")
        hist = {args.n_atoms: 1}
    rng = np.random.default_rng(args.seed)
    sizes = (
        [args.n_atoms] * args.n_molecules
        if args.n_atoms is not None
        else sampling.draw_sizes(hist, args.n_molecules, rng)
    )

    mode = args.mode.replace("-", "_")
    graphs = []
    if mode == "fresh":
        if args.n_conformers != 1:
            return _fail("fresh mode generates one conformer per molecule; "
                         "use --mode fixed-x for ensembles")
        graphs = sampling.generate_many(
            model, vocab, sizes, args.steps, rng, scale=scale
        )
    else:
        base = args.x_seed if args.x_seed is not None else args.seed
        for i, n in enumerate(sizes):
            graphs.append(sampling.generate_ensemble(
                model, vocab, n, args.n_conformers, args.steps,
                x_seed=base + i, rng=rng, scale=scale,
            ))

    out = Path(args.out)
    data.write_dataset(out, graphs, vocab, scale=1.0)
    sdf_dir = out / "sdf"
    sdf_dir.mkdir(exist_ok=True)
    for i, g in enumerate(graphs):
        name = f"sample_seed{args.seed}_steps{args.steps}_{i:04d}"
        data.write_sdf(sdf_dir / f"{name}.sdf", g, vocab, name=name)
    _emit({"out": str(out), "n_molecules": len(graphs), "mode": args.mode,
           "seed": args.seed, "steps": args.steps,
           "n_conformers": args.n_conformers})
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_physical(path):
    """Dataset with coordinates mapped back to physical units."""
    graphs, vocab, scale = data.read_dataset(path)
    if scale != 1.0:
        for g in graphs:
            for i in range(len(g.conformers)):
                g.conformers[i] = g.conformers[i] * scale
    return graphs, vocab


def cmd_eval_graphs(args) -> int:
    graphs, vocab = _load_physical(args.input)
    train_keys = None
    if args.train:
        ref_graphs, ref_vocab = _load_physical(args.train)
        train_keys = {metrics.canonical_key(g, ref_vocab) for g in ref_graphs}
    report = metrics.graph_metrics(graphs, vocab, train_keys=train_keys)
    _emit(_jsonable(report))
    return 0


def cmd_eval_ensembles(args) -> int:
    gen_graphs, vocab = _load_physical(args.input)
    ref_graphs, _ = _load_physical(args.ref)
    if len(gen_graphs) != len(ref_graphs):
        return _fail(
            f"ensemble eval pairs molecules by index, got {len(gen_graphs)} "
            f"generated vs {len(ref_graphs)} reference"
        )
    deltas = None
    rows = []
    for g, r in zip(gen_graphs, ref_graphs):
        if g.n != r.n:
            return _fail("generated and reference molecules differ in size")
        cov = metrics.coverage_metrics(r.conformers, g.conformers)
        deltas = cov["deltas"]
        rows.append(cov)
    report = {
        "n_molecules": len(rows),
        "deltas": deltas,
        "cov_r": np.mean([r["cov_r"] for r in rows], axis=0),
        "cov_p": np.mean([r["cov_p"] for r in rows], axis=0),
        "amr_r": float(np.mean([r["amr_r"] for r in rows])),
        "amr_p": float(np.mean([r["amr_p"] for r in rows])),
    }
    if args.plot:
        _plot_coverage(args.plot, report)
        report["plot"] = str(args.plot)
    _emit(_jsonable(report))
    return 0


def _plot_coverage(path, report) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report["deltas"], report["cov_r"], label="coverage (recall)")
    ax.plot(report["deltas"], report["cov_p"], label="coverage (precision)")
    ax.set_xlabel("RMSD threshold")
    ax.set_ylabel("fraction covered")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval_diversity(args) -> int:
    graphs, vocab = _load_physical(args.input)
    oracle_cmd = args.oracle_cmd or os.environ.get(ORACLE_ENV)
    oracle = None
    rows = []
    try:
        if args.strain:
            if not oracle_cmd:
                return _fail(
                    f"strain requested but no energy oracle; set {ORACLE_ENV} "
                    "or pass --oracle-cmd"
                )
            oracle = metrics.SubprocessEnergyOracle(oracle_cmd)
        for i, g in enumerate(graphs):
            row = {"molecule": i, "n_atoms": g.n, "n_conformers": g.m}
            if g.m >= 2:
                row["diversity"] = metrics.conformer_diversity(g.conformers)
            if oracle is not None:
                strains = []
                for conf in g.conformers:
                    rep = metrics.strain_energy(g, conf, vocab, oracle,
                                                steps=args.minimize_steps)
                    strains.append(rep["strain"])
                row["mean_strain"] = float(np.mean(strains))
            rows.append(row)
    except metrics.OracleUnavailable as exc:
        return _fail(f"energy oracle failed: {exc}")
    finally:
        if oracle is not None:
            oracle.close()
    divs = [r["diversity"] for r in rows if "diversity" in r]
    report = {
        "molecules": rows,
        "mean_diversity": float(np.mean(divs)) if divs else None,
    }
    _emit(_jsonable(report))
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

class _CoordinateLeakNet(DualFlowNet):
    """Deliberately broken variant: raw coordinates leak into the invariant
    node features, which destroys rotation equivariance."""

    def featurize(self, atom_idx, charge_idx, bonds, x_t, y_t, t, mask):
        h_x, h_y, e_x, e_y, x, y = super().featurize(
            atom_idx, charge_idx, bonds, x_t, y_t, t, mask
        )
        pad = torch.zeros_like(h_x)
        pad[..., 0] = x_t[..., 0]
        return h_x + pad, h_y, e_x, e_y, x, y


def cmd_verify(args) -> int:
    failures = 0
    for name, fn in checks.ALL_CHECKS:
        if args.only and name != args.only:
            continue
        if name == "rotation_equivariance" and args.inject_bug == "equivariance":
            ok, detail = checks.check_rotation_equivariance(
                model_cls=_CoordinateLeakNet
            )
        else:
            ok, detail = fn()
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        if not ok:
            failures += 1
    if failures:
        print(f"conflow: verify failed {failures} check(s)", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# mnist
# ---------------------------------------------------------------------------

def cmd_mnist_train(args) -> int:
    cfg = mnist.MnistTrainConfig(
        seed=args.seed, n_images=args.n_images, source=args.source,
        epochs=args.epochs, batch_size=args.batch_size,
        model=mnist.MnistModelConfig(base_width=args.width),
    )
    model, history = mnist.train_mnist(cfg, quiet=not args.verbose)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mnist.save_mnist_checkpoint(out, model, extra={"history_tail": history[-5:]})
    _emit({"out": str(out), "steps": len(history),
           "final_loss": history[-1]["loss"] if history else None})
    return 0


def cmd_mnist_sample(args) -> int:
    model = mnist.load_mnist_checkpoint(args.checkpoint)
    gray, color = mnist.sample_mnist(
        model, args.n, args.steps, gray_seed=args.gray_seed,
        color_seed=args.color_seed,
    )
    mnist.save_image_grid(args.out, gray, color)
    dom = mnist.dominant_channels(color, gray)
    _emit({"out": str(args.out), "n": args.n, "gray_seed": args.gray_seed,
           "color_seed": args.color_seed,
           "dominant_channels": [int(d) for d in dom]})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conflow",
        description="Joint molecular graph and conformer ensemble generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ds = sub.add_parser("dataset", help="build and inspect datasets")
    ds_sub = p_ds.add_subparsers(dest="dataset_command", required=True)
    p = ds_sub.add_parser("make-toy", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conformers", type=int, default=5)
    p.set_defaults(func=cmd_dataset_make_toy)
    p = ds_sub.add_parser("import-sdf", help="import an SDF file")
    p.add_argument("--sdf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", choices=("qm9", "geom", "toy"), default="qm9")
    p.set_defaults(func=cmd_dataset_import_sdf)
    p = ds_sub.add_parser("stats", help="summarize a dataset directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample molecules from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-molecules", type=int, default=10)
    p.add_argument("--n-conformers", type=int, default=1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--mode", choices=("fresh", "fixed-x"), default="fresh")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x-seed", type=int, default=None,
                   help="base seed for the shared graph stream (fixed-x)")
    p.add_argument("--n-atoms", type=int, default=None,
                   help="force molecule size instead of drawing from the "
                        "training histogram")
    p.add_argument("--no-ema", action="store_true",
                   help="sample with raw weights instead of the EMA")
    p.set_defaults(func=cmd_sample)

    p_ev = sub.add_parser("eval", help="evaluate samples")
    ev_sub = p_ev.add_subparsers(dest="eval_command", required=True)
    p = ev_sub.add_parser("graphs", help="stability / validity / uniqueness")
    p.add_argument("--input", required=True)
    p.add_argument("--train", help="training set for novelty")
    p.set_defaults(func=cmd_eval_graphs)
    p = ev_sub.add_parser("ensembles", help="coverage and matching metrics")
    p.add_argument("--input", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--plot", help="write an SVG coverage curve")
    p.set_defaults(func=cmd_eval_ensembles)
    p = ev_sub.add_parser("diversity", help="ensemble diversity and strain")
    p.add_argument("--input", required=True)
    p.add_argument("--strain", action="store_true")
    p.add_argument("--oracle-cmd", help=f"energy oracle command "
                                         f"(default ${ORACLE_ENV})")
    p.add_argument("--minimize-steps", type=int, default=200)
    p.set_defaults(func=cmd_eval_diversity)

    p = sub.add_parser("verify", help="run structural property checks")
    p.add_argument("--inject-bug", choices=("equivariance",),
                   help="deliberately break the model to prove the check "
                        "catches it")
    p.add_argument("--only", help="run a single named check")
    p.set_defaults(func=cmd_verify)

    p_mn = sub.add_parser("mnist", help="image-domain demonstrator")
    mn_sub = p_mn.add_subparsers(dest="mnist_command", required=True)
    p = mn_sub.add_parser("train")
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="synthetic",
                   help="'synthetic' or a path to an IDX image file")
    p.add_argument("--n-images", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_mnist_train)
    p = mn_sub.add_parser("sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--gray-seed", type=int, default=0)
    p.add_argument("--color-seed", type=int, default=1)
    p.set_defaults(func=cmd_mnist_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
