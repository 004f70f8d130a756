"""Command-line entry point: ``python -m twohand <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .errors import ConfigError, ShapeError, TrainingDiverged

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
ROW_SUM_TOL = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; validation failures here must exit 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint")
    p.add_argument("--disable-cha", action="store_true", help="silence the cross-hand attention path")
    p.add_argument("--disable-pifa", action="store_true", help="skip the image-patch attention stage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twohand", description="Two-hand mesh regression on a synthetic desk-scale task.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and cache a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of samples (default: config n_samples)")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory from gen-data (generated in memory if absent)")
    p.add_argument("--resume", type=Path, help="continue from an epoch checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _common(p)
    p.add_argument("--coords", type=int, default=16, help="sampled coordinates per parameter")

    p = sub.add_parser("oracle", help="dense-oracle equivalence suite")
    _common(p)
    p.add_argument("--graphs", type=int, default=100)

    p = sub.add_parser("coarsen", help="write hierarchy statistics and per-level meshes")
    _common(p)

    p = sub.add_parser("attnmap", help="export attention matrices as CSV and SVG")
    _common(p)
    p.add_argument("--sample-seed", type=int, default=0)

    p = sub.add_parser("pck-plot", help="turn an eval pck.csv into an SVG curve")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    return parser


def load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.disable_cha:
        changes["use_cha"] = False
    if args.disable_pifa:
        changes["use_pifa"] = False
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args, default: str) -> Path:
    d = args.out or Path(default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _header(cfg: Config) -> dict:
    return {"config_hash": cfg.hash()}


def _write_matrix_csv(path: Path, matrix: np.ndarray, cfg: Config) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash = {cfg.hash()}\n")
        w = csv.writer(fh)
        for row in matrix:
            w.writerow([f"{x:.12g}" for x in row])


def _datasets(cfg: Config, ctx, data_dir):
    from .synthdata import SynthConfig, load_dataset, make_dataset

    if data_dir is not None:
        return load_dataset(data_dir)
    h = ctx.hierarchy
    return make_dataset(cfg.n_samples, cfg.seed, cfg.split_ratio, h.template, h, SynthConfig.from_config(cfg))


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: Config) -> int:
    from .synthdata import SynthConfig, make_dataset, save_dataset
    from .trainer import context_from_config

    h = context_from_config(cfg).hierarchy
    n = args.n if args.n is not None else cfg.n_samples
    train, test = make_dataset(n, cfg.seed, cfg.split_ratio, h.template, h, SynthConfig.from_config(cfg))
    out = _out_dir(args, "data")
    save_dataset(out, train, test, _header(cfg))
    cfg.save(out / "config.txt")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .metrics import write_report, evaluate
    from .trainer import context_from_config, predict, train

    ctx = context_from_config(cfg)
    train_set, test_set = _datasets(cfg, ctx, args.data)
    out = _out_dir(args, "run")
    cfg.save(out / "config.txt")

    def progress(row):
        if "eval_mpvpe_mm" in row:
            print(f"step {row['step'] + 1}: loss {row['total']:.4f}, held-out MPVPE {row['eval_mpvpe_mm']:.3f} mm")

    resume = args.resume or args.checkpoint
    result = train(cfg, train_set, test_set, ctx, out_dir=out, resume=resume, progress=progress)
    report = evaluate(predict(result.params, test_set, ctx), list(test_set), ctx.regressor, ctx.protocol)
    write_report(out, report, _header(cfg))
    print(f"trained {result.state.step} steps; held-out MPVPE {report.mpvpe:.3f} mm, MPJPE {report.mpjpe:.3f} mm")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    from .metrics import evaluate, write_report
    from .model import load_params
    from .trainer import context_from_config, predict

    if args.checkpoint is None:
        raise UsageError("eval requires --checkpoint")
    ctx = context_from_config(cfg)
    params, _, _ = load_params(args.checkpoint, ctx.hierarchy)
    _, test_set = _datasets(cfg, ctx, args.data)
    report = evaluate(predict(params, test_set, ctx), list(test_set), ctx.regressor, ctx.protocol)
    out = _out_dir(args, "eval")
    write_report(out, report, _header(cfg))
    print(f"MPJPE {report.mpjpe:.3f} mm, MPVPE {report.mpvpe:.3f} mm, PCK AUC {report.auc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .oracle import run_gradient_suite

    rep = run_gradient_suite(cfg, seed=cfg.seed, n_coords=args.coords)
    print(f"checked {len(rep.per_param)} parameter groups ({args.coords} coordinates each) in {rep.seconds:.1f} s")
    print(f"max relative error {rep.worst:.3e} ({rep.worst_name})")
    return EXIT_OK if rep.worst < GRAD_TOL else EXIT_NUMERIC


def cmd_oracle(args, cfg: Config) -> int:
    from .oracle import run_oracle_suite

    rep = run_oracle_suite(seed=cfg.seed, n_graphs=args.graphs)
    for name in ("cheb", "mhsa", "cross", "pifa_like"):
        print(f"{name}: max relative error {getattr(rep, name):.3e}")
    return EXIT_OK if rep.worst < ORACLE_TOL else EXIT_NUMERIC


def cmd_coarsen(args, cfg: Config) -> int:
    from .meshtopo import save_obj
    from .storage import format_kv
    from .trainer import context_from_config

    h = context_from_config(cfg).hierarchy
    out = _out_dir(args, "hierarchy")
    (out / "stats.txt").write_text(format_kv({**_header(cfg), **h.stats()}))
    comment = f"config_hash = {cfg.hash()}"
    for t in range(h.n_levels):
        save_obj(out / f"level{t}.obj", h.positions[t], h.faces[t], header=comment)
    for k, v in h.stats().items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_attnmap(args, cfg: Config) -> int:
    from .model import ModelConfig, build_params, forward, load_params
    from .svg import heat_grid
    from .synthdata import SynthConfig, generate_sample
    from .trainer import context_from_config

    ctx = context_from_config(cfg)
    h = ctx.hierarchy
    if args.checkpoint is not None:
        params, _, _ = load_params(args.checkpoint, h)
    else:
        params = build_params(ModelConfig.from_config(cfg, h), h, seed=cfg.seed)
    sample = generate_sample(args.sample_seed, h.template, h, SynthConfig.from_config(cfg))
    pred = forward(sample.pyramid, h, ctx.encoding, params)
    out = _out_dir(args, "attn")
    comment = f"config_hash = {cfg.hash()}"
    worst = 0.0
    written = 0
    for t in range(len(pred.pifa_attention)):
        mats = {f"pifa_block{t}_{hand}": w for hand, w in pred.pifa_attention[t].items()}
        mats.update({f"cha_block{t}_{d}": w for d, w in pred.cha_attention[t].items()})
        for name, w in mats.items():
            dev = float(np.abs(w.sum(axis=1) - 1.0).max())
            worst = max(worst, dev)
            _write_matrix_csv(out / f"{name}.csv", w, cfg)
            (out / f"{name}.svg").write_text(heat_grid(w, name, comment=comment))
            written += 1
            print(f"{name}: {w.shape[0]}x{w.shape[1]}, row sums {w.sum(axis=1).mean():.3f} "
                  f"(max deviation {dev:.1e})")
    print(f"wrote {written} matrices to {out}")
    return EXIT_OK if worst < ROW_SUM_TOL else EXIT_NUMERIC


def cmd_pck_plot(args, cfg: Config) -> int:
    from .metrics import read_pck_csv
    from .svg import line_plot

    th, pck = read_pck_csv(args.input)
    out = args.out or args.input.with_suffix(".svg")
    if out.suffix != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "pck.svg"
    out.write_text(line_plot(th, pck, "PCK", "threshold (mm)", "fraction correct",
                             comment=f"config_hash = {cfg.hash()}"))
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle, "coarsen": cmd_coarsen, "attnmap": cmd_attnmap, "pck-plot": cmd_pck_plot,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ShapeError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
