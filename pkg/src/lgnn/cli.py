"""Command-line entry point: ``lgnn generate|train|eval|rollout|massmatrix``.

Every option can also come from ``--config file.json`` (keys use the long
option names with underscores); explicit flags win over the file. The
effective configuration is written to ``<out>/run_config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from lgnn import evaluation, graphmodel, systems, training
from lgnn.topology import State

log = logging.getLogger("lgnn")

DEFAULTS = {
    "generate": {"system": "chain-4", "trajectories": 100, "points": 10000, "dt": 1e-5,
                 "sample_interval": 1e-3},
    "train": {"model": "lgnn", "lr": 1e-3, "batch_size": 10, "max_epochs": 10000, "patience": 500,
              "split": 0.75, "embedding_dim": 5, "hidden": 10, "mlp_layers": 1, "mp_rounds": 2,
              "type_vocab": 2, "labels": "solver"},
    "eval": {"systems": ["chain-4"], "horizon": 1.0, "dt": 1e-3, "gt_dt": 1e-5, "seeds": 100},
    "rollout": {"system": "chain-4", "horizon": 1.0, "dt": 1e-3, "gt_dt": 1e-5},
    "massmatrix": {"checkpoint": "analytic", "system": "chain-16"},
}
SHARED = {"seed": 0, "out": "."}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--config", help="JSON file with option values")
        return sp

    g = command("generate", "simulate ground truth and write a dataset")
    g.add_argument("--system", help="catalog label or topology JSON")
    g.add_argument("--trajectories", type=int)
    g.add_argument("--points", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--sample-interval", type=float)

    t = command("train", "fit a Lagrangian model to a dataset")
    t.add_argument("--dataset")
    t.add_argument("--model", choices=["lgnn", "clnn"])
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--split", type=float)
    t.add_argument("--embedding-dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--mlp-layers", type=int)
    t.add_argument("--mp-rounds", type=int)
    t.add_argument("--type-vocab", type=int)
    t.add_argument("--labels", choices=["solver", "verlet"])

    e = command("eval", "roll out a checkpoint on target systems and score it")
    e.add_argument("--checkpoint")
    e.add_argument("--systems", nargs="+")
    e.add_argument("--horizon", type=float)
    e.add_argument("--dt", type=float)
    e.add_argument("--gt-dt", type=float)
    e.add_argument("--seeds", type=int, help="number of seeded initial conditions")

    r = command("rollout", "write one predicted and one ground-truth trajectory")
    r.add_argument("--checkpoint", help="checkpoint JSON or 'analytic'")
    r.add_argument("--system")
    r.add_argument("--horizon", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--gt-dt", type=float)

    m = command("massmatrix", "extract the mass matrix of a model at one state")
    m.add_argument("--checkpoint", help="checkpoint JSON or 'analytic'")
    m.add_argument("--system")
    m.add_argument("--state", help="JSON with q and qdot; default: reference pose at rest")
    return p


def effective_config(args: argparse.Namespace) -> dict:
    cfg = {**SHARED, **DEFAULTS[args.command]}
    if args.config:
        cfg.update(json.loads(Path(args.config).read_text()))
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        cfg[key] = value
    return cfg


def _load_model(ref: str):
    if ref == "analytic":
        return systems.AnalyticLagrangian()
    return graphmodel.load_checkpoint(ref)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1) + "\n")


def cmd_generate(cfg: dict, out: Path) -> int:
    spec = systems.resolve_system(cfg["system"])
    ds = systems.generate_dataset(spec, cfg["trajectories"], cfg["points"], cfg["dt"],
                                  cfg["sample_interval"], cfg["seed"])
    spec.topology.save(out / "topology.json")
    ds.save(out / "dataset.jsonl")
    print(f"wrote {len(ds)} records to {out / 'dataset.jsonl'}")
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    ds = systems.TrajectoryDataset.load(cfg["dataset"])
    if cfg["model"] == "lgnn":
        mc = graphmodel.ModelConfig(embedding_dim=cfg["embedding_dim"], mlp_hidden=cfg["hidden"],
                                    mlp_layers=cfg["mlp_layers"], mp_rounds=cfg["mp_rounds"],
                                    type_vocab=cfg["type_vocab"])
        model = graphmodel.LgnnModel.init(mc, seed=cfg["seed"])
    else:
        model = graphmodel.ClnnModel.init(graphmodel.ClnnConfig(n_coords=ds.topology.n_coords),
                                          seed=cfg["seed"])
    tc = training.TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                              early_stop_patience=cfg["patience"], split=cfg["split"],
                              seed=cfg["seed"], label_source=cfg["labels"])
    model, report = training.train(model, ds, tc, progress_every=10)
    ckpt = out / "checkpoint.json"
    report.checkpoint = str(ckpt)
    graphmodel.save_checkpoint(model, ckpt, {"train_config": {"lr": tc.lr, "batch_size": tc.batch_size}})
    report.save(out / "report.json", out / "loss.csv")
    print(f"best validation loss {report.best_val_loss:.6e} at epoch {report.best_epoch}; "
          f"checkpoint {ckpt}")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    model = _load_model(cfg["checkpoint"])
    specs = [systems.resolve_system(s) for s in cfg["systems"]]
    if hasattr(model, "_check"):
        for spec in specs:
            model._check(spec.topology)
    summaries = evaluation.zero_shot_eval(model, specs, cfg["seeds"], cfg["horizon"], cfg["dt"],
                                          cfg["gt_dt"], cfg["seed"])
    evaluation.write_metrics_csv(summaries, out / "metrics.csv")
    evaluation.write_summary_csv(summaries, out / "summary.csv")
    for s in summaries:
        print(f"{s.system}: geomean RE {s.geomean_RE:.3e} EE {s.geomean_EE:.3e} "
              f"combined {s.geomean_combined:.3e} diverged {s.n_diverged}/{s.n_runs}")
    return 0


def _write_trajectory(path: Path, traj: evaluation.Trajectory) -> None:
    with open(path, "w") as fh:
        for k in range(len(traj)):
            fh.write(json.dumps({"t": float(traj.t[k]), "q": traj.q[k].tolist(),
                                 "qdot": traj.qdot[k].tolist(), "qddot": traj.qddot[k].tolist()}) + "\n")


def cmd_rollout(cfg: dict, out: Path) -> int:
    model = _load_model(cfg.get("checkpoint") or "analytic")
    spec = systems.resolve_system(cfg["system"])
    (seed, start), = evaluation.starts_for(spec, 1, cfg["seed"])
    truth, = evaluation.ground_truth(spec, [start], cfg["horizon"], cfg["dt"], cfg["gt_dt"])
    pred = evaluation.rollout(model, spec.topology, start.q, start.qdot, cfg["horizon"], cfg["dt"])
    res = evaluation.compare(spec, pred, truth, seed)
    _write_trajectory(out / "predicted.jsonl", pred)
    _write_trajectory(out / "truth.jsonl", truth)
    summary = evaluation.summarize(spec.label, [res])
    evaluation.write_metrics_csv([summary], out / "metrics.csv")
    print(f"{spec.label}: {len(pred)} steps, combined error {res.combined:.3e}"
          + (f", diverged at step {res.diverged_step}" if res.diverged_step is not None else ""))
    return 0


def cmd_massmatrix(cfg: dict, out: Path) -> int:
    model = _load_model(cfg["checkpoint"])
    spec = systems.resolve_system(cfg["system"])
    if cfg.get("state"):
        data = json.loads(Path(cfg["state"]).read_text())
        state = State(q=data["q"], qdot=data.get("qdot", np.zeros(len(data["q"]))))
    else:
        state = State.at_rest(spec.topology)
    rep = evaluation.mass_matrix_probe(model, spec.topology, state)
    np.savetxt(out / "mass_matrix.csv", rep.M, delimiter=",", fmt="%.17g")
    np.savetxt(out / "mask.csv", rep.mask.astype(int), delimiter=",", fmt="%d")
    _write_json(out / "band.json", {"symmetry_residual": rep.symmetry_residual,
                                    "threshold": rep.threshold,
                                    "band_max": {str(k): v for k, v in sorted(rep.band_max.items())},
                                    "coord_nodes": rep.coord_nodes.tolist()})
    print(f"mass matrix {rep.M.shape[0]}x{rep.M.shape[1]}, symmetry residual "
          f"{rep.symmetry_residual:.3e}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "rollout": cmd_rollout, "massmatrix": cmd_massmatrix}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = effective_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {"command": args.command, **cfg})
    try:
        return COMMANDS[args.command](cfg, out)
    except (KeyError, ValueError, OSError, FloatingPointError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
