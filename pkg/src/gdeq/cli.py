"""Experiment runner: config handling, execution, and metric emission.

One invocation trains every (seed, fold) pair of a single pathway on one
dataset and writes a per-run directory of artifacts plus pathway-level
aggregates:

    <out>/<dataset>/<pathway>/<seed>_<fold>/   metrics.txt, curves.csv,
                                               checkpoint.npz, lipschitz.txt,
                                               timing.txt
    <out>/<dataset>/<pathway>/                 summary.{txt,csv},
                                               iteration_curves.csv, config.txt

Everything except the timing values and the checkpoint archive's internal
zip timestamps is byte-deterministic in (config, seeds); numbers are
written with 17 significant digits so records re-parse to the exact values
used in aggregation.  The exit status is nonzero iff any run failed
(exception, or more than 10% of its forward solves diverged) or a trained
operator's empirical Lipschitz estimate exceeded its analytic bound.
"""

import argparse
import csv
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .contraction import LipschitzReport, analyze_operator
from .graphs import collate, load_tu_dataset, stratified_folds
from .operators import GraphContext, PATHWAYS
from .solvers import SolverConfig
from .training import (ModelConfig, TrainConfig, aggregate_runs, encode,
                       run_training, save_checkpoint)

FAILURE_RATE_LIMIT = 0.1   # diverged share of forward solves that fails a run


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    dataset: str = "MUTAG"
    data_dir: str = "data"
    pathway: str = "classical"
    seeds: tuple = (42,)
    folds: int = 10
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    hidden_dim: int = 64
    n_qubits: int = 4
    reps: int = 1
    alpha: float = 0.1
    kappa: float = 0.8
    heads: int = 4
    mlp_hidden: int = 64
    dropout: float = 0.4
    l_max: int = 6
    solver: str = "anderson"
    fwd_max_iter: int = 300
    fwd_tol: float = 1e-6
    bwd_max_iter: int = 150
    bwd_tol: float = 1e-5
    out: str = "runs"
    workers: int = 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            pathway=self.pathway, d_hidden=self.hidden_dim,
            n_qubits=self.n_qubits, reps=self.reps, alpha=self.alpha,
            kappa=self.kappa, heads=self.heads, mlp_hidden=self.mlp_hidden,
            dropout=self.dropout, l_max=self.l_max,
            fwd=SolverConfig(method=self.solver, max_iter=self.fwd_max_iter,
                             tol=self.fwd_tol),
            bwd=SolverConfig(method=self.solver, max_iter=self.bwd_max_iter,
                             tol=self.bwd_tol))

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lr_min=self.lr_min,
                           weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size,
                           grad_clip=self.grad_clip, seed=self.seeds[0],
                           folds=self.folds)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seeds":
                v = ",".join(str(s) for s in v)
            lines.append(f"{f.name}={fmt(v)}")
        return "\n".join(lines) + "\n"


_INT_FIELDS = {"folds", "epochs", "batch_size", "hidden_dim", "n_qubits",
               "reps", "heads", "mlp_hidden", "l_max", "fwd_max_iter",
               "bwd_max_iter", "workers"}
_FLOAT_FIELDS = {"lr", "lr_min", "weight_decay", "grad_clip", "alpha",
                 "kappa", "dropout", "fwd_tol", "bwd_tol"}


def _coerce(name: str, raw: str):
    if name == "seeds":
        return tuple(int(s) for s in raw.split(",") if s.strip())
    if name in _INT_FIELDS:
        return int(raw)
    if name in _FLOAT_FIELDS:
        return float(raw)
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """key=value lines over a base config; unknown keys are errors."""
    cfg = base or ExperimentConfig()
    known = {f.name for f in fields(cfg)}
    updates = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {ln}: unknown config key {key!r}")
        updates[key] = _coerce(key, raw.strip())
    return replace(cfg, **updates)


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of the result-relevant fields; output placement and worker
    count do not change what gets computed."""
    lines = [l for l in cfg.to_text().splitlines()
             if not l.startswith(("out=", "workers="))]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# record formatting


def fmt(v) -> str:
    """17 significant digits for floats, so records re-parse exactly."""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_kv(path, record: dict) -> None:
    with open(path, "w") as fh:
        for k, v in record.items():
            fh.write(f"{k}={fmt(v)}\n")


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# aggregation records


def emit_summary(runs, dataset: str = "") -> list:
    """One record per variant: mean/std accuracy (n-1), iterations, minutes."""
    if not runs:
        raise ValueError("no runs to summarise")
    variants = list(dict.fromkeys(r.pathway for r in runs))
    records = []
    for v in variants:
        agg = aggregate_runs([r for r in runs if r.pathway == v])
        records.append({"variant": v, "dataset": dataset,
                        "acc_mean": agg["acc_mean"], "acc_std": agg["acc_std"],
                        "iter_mean": agg["iter_mean"],
                        "time_minutes_mean": agg["time_minutes_mean"]})
    return records


def emit_iteration_curves(runs):
    """(header, rows): per-epoch mean/std of forward iterations per variant."""
    if not runs:
        raise ValueError("no runs to emit")
    epochs = len(runs[0].iterations)
    if any(len(r.iterations) != epochs for r in runs):
        raise ValueError("runs disagree on epoch count")
    variants = list(dict.fromkeys(r.pathway for r in runs))
    header = ["epoch"]
    for v in variants:
        header += [f"{v}_iter_mean", f"{v}_iter_std"]
    rows = []
    for e in range(epochs):
        row = [e]
        for v in variants:
            vals = np.array([r.iterations[e] for r in runs if r.pathway == v])
            row.append(float(vals.mean()))
            row.append(float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        rows.append(row)
    return header, rows


# ---------------------------------------------------------------------------
# runner


def certificate_report(model, batch, rng_seed=0) -> LipschitzReport:
    """Lipschitz analysis of a trained operator on a probe batch."""
    with ad.no_grad():
        h = encode(batch.features, model.encoder)
        ctx = GraphContext(a_norm=ad.constant(batch.a_norm), h=h)
        if model.cfg.pathway == "id":
            ctx = replace(ctx, q_id=model.operator.compute_id_conditioning(
                h, batch.tau))
    report = LipschitzReport(kappa=model.cfg.kappa, alpha=model.cfg.alpha)
    report.add(analyze_operator(model.operator, ctx,
                                np.random.default_rng(rng_seed)))
    return report


def _write_run_artifacts(run_dir: Path, cfg, metrics, model, dataset) -> list:
    """Write one run's files; returns the certificate violations."""
    run_dir.mkdir(parents=True, exist_ok=True)
    write_kv(run_dir / "metrics.txt", {
        "dataset": cfg.dataset, "pathway": metrics.pathway,
        "seed": metrics.seed, "fold": metrics.fold,
        "test_accuracy": metrics.test_accuracy,
        "final_iterations": metrics.final_iterations,
        "skipped_batches": metrics.skipped_batches,
    })
    write_kv(run_dir / "timing.txt", {"wall_minutes": metrics.wall_minutes})
    write_table(run_dir / "curves.csv",
                ["epoch", "train_loss", "train_accuracy", "iterations"],
                [[e, metrics.train_loss[e], metrics.train_accuracy[e],
                  metrics.iterations[e]]
                 for e in range(len(metrics.iterations))])
    save_checkpoint(run_dir / "checkpoint.npz", model,
                    config_hash=config_digest(cfg))
    labels = [g.label for g in dataset.graphs]
    test_idx = stratified_folds(labels, cfg.folds, metrics.seed)[metrics.fold][1]
    probe = collate([dataset.graphs[i] for i in test_idx[:4]])
    report = certificate_report(model, probe,
                                rng_seed=(metrics.seed, metrics.fold, 99))
    (run_dir / "lipschitz.txt").write_text(report.to_text())
    return report.violations()


def run_experiment(cfg: ExperimentConfig) -> int:
    try:
        dataset = load_tu_dataset(cfg.data_dir, cfg.dataset, l_max=cfg.l_max)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    base = Path(cfg.out) / cfg.dataset / cfg.pathway
    base.mkdir(parents=True, exist_ok=True)
    (base / "config.txt").write_text(cfg.to_text())

    jobs = [(s, f) for s in cfg.seeds for f in range(cfg.folds)]
    failed, violations, runs = [], [], []
    labels = [g.label for g in dataset.graphs]
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        futures = [pool.submit(run_training, dataset, mcfg, tcfg, s, f)
                   for s, f in jobs]
        for (seed, fold), fut in zip(jobs, futures):
            tag = f"{seed}_{fold}"
            try:
                metrics, model = fut.result()
            except Exception as e:  # noqa: BLE001 - a run must not kill the rest
                print(f"run {tag} failed: {e}", file=sys.stderr)
                failed.append(tag)
                continue
            n_train = len(stratified_folds(labels, cfg.folds, seed)[fold][0])
            attempts = cfg.epochs * -(-n_train // cfg.batch_size)
            if metrics.skipped_batches > FAILURE_RATE_LIMIT * attempts:
                print(f"run {tag}: {metrics.skipped_batches}/{attempts} "
                      "solves diverged", file=sys.stderr)
                failed.append(tag)
            bad = _write_run_artifacts(base / tag, cfg, metrics, model, dataset)
            if bad:
                violations.append((tag, bad))
                print(f"run {tag}: certificate violated for {bad}",
                      file=sys.stderr)
            runs.append(metrics)
            print(f"run {tag}: acc {metrics.test_accuracy:.4f} "
                  f"iters {metrics.final_iterations:.1f} "
                  f"({metrics.wall_minutes:.2f} min)")

    if runs:
        records = emit_summary(runs, dataset=cfg.dataset)
        write_table(base / "summary.csv",
                    ["variant", "dataset", "acc_mean", "acc_std",
                     "iter_mean", "time_minutes_mean"],
                    [[r[k] for k in ("variant", "dataset", "acc_mean",
                                     "acc_std", "iter_mean",
                                     "time_minutes_mean")] for r in records])
        write_kv(base / "summary.txt", records[0])
        header, rows = emit_iteration_curves(runs)
        write_table(base / "iteration_curves.csv", header, rows)
        agg = aggregate_runs(runs)
        print(f"{cfg.pathway} on {cfg.dataset}: "
              f"acc {agg['acc_mean']:.4f} +- {agg['acc_std']:.4f} "
              f"over {agg['runs']} runs")
    return 1 if failed or violations else 0


# ---------------------------------------------------------------------------
# entry point

_FLAGS = [
    ("--dataset", "dataset", str), ("--data-dir", "data_dir", str),
    ("--seeds", "seeds", str), ("--folds", "folds", int),
    ("--epochs", "epochs", int), ("--batch-size", "batch_size", int),
    ("--hidden-dim", "hidden_dim", int), ("--n-qubits", "n_qubits", int),
    ("--alpha", "alpha", float), ("--kappa", "kappa", float),
    ("--fwd-max-iter", "fwd_max_iter", int), ("--fwd-tol", "fwd_tol", float),
    ("--bwd-max-iter", "bwd_max_iter", int), ("--bwd-tol", "bwd_tol", float),
    ("--out", "out", str), ("--workers", "workers", int),
]


def build_config(argv) -> tuple:
    p = argparse.ArgumentParser(
        prog="gdeq",
        description="equilibrium graph-network experiments on TU datasets")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--pathway", choices=PATHWAYS)
    p.add_argument("--solver", choices=("picard", "anderson"))
    for flag, dest, typ in _FLAGS:
        p.add_argument(flag, dest=dest, type=typ)
    p.add_argument("--print-config", action="store_true",
                   help="dump the effective config and exit")
    args = p.parse_args(argv)

    cfg = ExperimentConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), cfg)
    overrides = {}
    for name in [d for _, d, _ in _FLAGS] + ["pathway", "solver"]:
        v = getattr(args, name)
        if v is not None:
            overrides[name] = _coerce(name, str(v))
    return replace(cfg, **overrides), args.print_config


def main(argv=None) -> int:
    cfg, print_only = build_config(argv)
    if print_only:
        print(cfg.to_text(), end="")
        return 0
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
