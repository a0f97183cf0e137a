"""Command line entry point: ``dynconv {train,verify,bench,ponder}``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .budget import CRITERIA, network_fraction, report_csv
from .data import make_glyph_dataset
from .harness import bench, emit_ponder, ponder_focus, ponder_maps, verify_equivalence, write_bench_csv
from .model import DynConvNet, ModelConfig, build_model
from .tensor import ConfigurationError
from .training import TrainingDiverged, train

log = logging.getLogger("dynconv")

METRIC_HEAD = ["epoch", "task_loss", "sp_net", "sp_low", "sp_up"]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML model/recipe file; unknown keys are rejected")
    p.add_argument("--seed", type=int, help="override recipe seed")
    p.add_argument("--theta", type=float, help="override computational budget")
    p.add_argument("--alpha", type=float, help="override sparsity loss weight")
    p.add_argument("--criterion", choices=CRITERIA, help="override sparsity criterion")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--deterministic", action="store_true", help="single-threaded kernels and BLAS")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the glyph task and write metrics.csv")
    _common(p)

    p = sub.add_parser("verify", help="check sparse inference against the dense masked path")
    _common(p)
    p.add_argument("--model", type=Path, help="trained model (.npz); random weights otherwise")
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("bench", help="dense vs sparse throughput of the block stack")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--densities", type=float, nargs="+", default=[1.0, 0.5, 0.25, 0.125])

    p = sub.add_parser("ponder", help="write ponder-cost maps for glyph images")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--images", type=int, default=8)
    return parser


def load_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    r = cfg.recipe
    for key in ("seed", "theta", "alpha", "criterion", "epochs"):
        v = getattr(args, key)
        if v is not None:
            setattr(r, key, v)
    return cfg.validate()


def _model(args, cfg: ModelConfig) -> DynConvNet:
    if getattr(args, "model", None):
        return DynConvNet.load(args.model)
    return build_model(cfg)


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    import numba
    from threadpoolctl import threadpool_limits

    prev = numba.get_num_threads()
    numba.set_num_threads(1)
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        numba.set_num_threads(prev)


def _write_rows(path: Path, rows: List[dict], fields: Optional[Sequence[str]] = None) -> None:
    fields = list(fields or rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def cmd_train(args, cfg: ModelConfig) -> int:
    r = cfg.recipe
    val = make_glyph_dataset(r.val_size, seed=r.seed + 10_000, noise_sigma=r.noise_sigma, canvas=cfg.input_size)
    try:
        model, logs = train(cfg, val_set=val, callback=lambda e: log.info(
            "epoch %d task %.4f net %.4f val_acc %.3f fraction %.3f", e.epoch, e.task_loss, e.sp_net,
            e.val_acc, e.val_fraction))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    rows = [e.as_row() for e in logs]
    frac = [k for k in rows[0] if k.startswith("frac_b")]
    rest = [k for k in rows[0] if k not in METRIC_HEAD and k not in frac]
    _write_rows(args.out / "metrics.csv", rows, METRIC_HEAD + frac + rest)
    model.save(args.out / "model.npz")
    (args.out / "config.yaml").write_text(cfg.to_yaml())
    reports = model.infer(val.images, "infer-sparse").reports
    (args.out / "budget.csv").write_text(report_csv(reports))
    last = logs[-1]
    print(f"val_acc={last.val_acc:.4f} executed_fraction={network_fraction(reports):.4f} "
          f"theta={r.theta} -> {args.out}")
    return 0


def cmd_verify(args, cfg: ModelConfig) -> int:
    model = _model(args, cfg)
    rep = verify_equivalence(model, trials=args.trials, seed=cfg.recipe.seed)
    _write_rows(args.out / "verify.csv", rep.rows())
    for row in rep.rows():
        print(f"{row['scope']:>12}  max_rel_error={row['max_rel_error']:.3e}")
    print("PASS" if rep.passed else f"FAIL (tolerance {rep.tolerance:g})")
    return 0 if rep.passed else 1


def cmd_bench(args, cfg: ModelConfig) -> int:
    model = _model(args, cfg)
    rows = bench(model, batch=args.batch, repeats=args.repeats, warmup=args.warmup,
                 densities=args.densities, seed=cfg.recipe.seed)
    write_bench_csv(rows, args.out / "bench.csv")
    dense = rows[0].images_per_sec
    for r in rows:
        print(f"{r.path:>6} density={r.density:<6g} {r.images_per_sec:9.1f} img/s  x{r.images_per_sec / dense:4.2f}  "
              f"mask={r.mask_ms:.2f} book={r.bookkeeping_ms:.2f} gather={r.gather_ms:.2f} "
              f"residual={r.residual_ms:.2f} scatter={r.scatter_ms:.2f} ms")
    return 0


def cmd_ponder(args, cfg: ModelConfig) -> int:
    model = _model(args, cfg)
    if not model.gated_indices:
        print("model has no gated blocks", file=sys.stderr)
        return 1
    data = make_glyph_dataset(args.images, seed=cfg.recipe.seed + 20_000, noise_sigma=cfg.recipe.noise_sigma,
                              canvas=model.cfg.input_size)
    maps = ponder_maps(model, data.images)
    emit_ponder(maps, len(model.gated_indices), args.out)
    focus, coverage = ponder_focus(maps, data.boxes)
    print(f"wrote {len(maps)} ponder maps to {args.out}; mass in box+2px {focus:.3f} (box covers {coverage:.3f})")
    return 0


COMMANDS = {"train": cmd_train, "verify": cmd_verify, "bench": cmd_bench, "ponder": cmd_ponder}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
    except (ConfigurationError, TypeError, OSError, yaml.YAMLError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    with deterministic_mode(args.deterministic):
        return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
