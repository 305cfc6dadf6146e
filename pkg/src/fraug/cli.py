"""Command-line entry point: ``fraug <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fraug import kernels
from fraug.client import StageError
from fraug.config import ConfigError, ExperimentConfig, _parse_value, dump_config, load_config
from fraug.federation import communication_report, run_experiment
from fraug.metrics import MetricsError, MetricsWriter, format_table, merge_files, summarize_file, write_summary
from fraug.tensor import NonFiniteError


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, action="append", help="seed to run (repeatable); replaces run.seeds")
    p.add_argument("--out", help="output directory (run.out_dir)")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--strategy", help="strategy.name")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fraug", description="Federated representation augmentation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run an experiment for every seed")
    run.add_argument("--workers", type=int, help="client worker threads per round")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    sub.add_parser("headstudy", parents=[common], help="scarce-data head finetuning study")
    ab = sub.add_parser("ablation", parents=[common], help="component ablation grid")
    ab.add_argument("--rows", help="comma-separated subset of rows")
    pl = sub.add_parser("plot", parents=[common], help="convergence plot from a metrics file")
    pl.add_argument("metrics")
    pl.add_argument("output")
    sub.add_parser("paramcount", parents=[common], help="parameter counts and communication overhead")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    if args.seed:
        overrides["run.seeds"] = list(args.seed)
    if args.out:
        overrides["run.out_dir"] = args.out
    if args.precision:
        overrides["run.precision"] = args.precision
    if args.strategy:
        overrides["strategy.name"] = args.strategy
    return load_config(args.config, overrides)


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.run.out_dir)
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    per_seed = []
    for seed in cfg.run.seeds:
        path = out / "metrics" / f"seed-{seed}.csv"
        writer = MetricsWriter(path)
        fed_holder = {}

        def on_setup(fed, _holder=fed_holder):
            _holder["fed"] = fed

        run_experiment(cfg, seed, writer=writer, workers=args.workers, on_setup=on_setup)
        save_checkpoints(fed_holder["fed"], out / "checkpoints" / f"seed-{seed}")
        per_seed.append(path)
    merged = merge_files(per_seed, out / "metrics.csv")
    summary = summarize_file(merged)
    meta = {
        "strategy": cfg.strategy.name,
        "seeds": list(cfg.run.seeds),
        "rounds": cfg.train.rounds,
        "precision": cfg.run.precision,
        "backend": kernels.BACKEND,
    }
    write_summary(summary, out / "summary.json", meta)
    print(format_table(summary))
    print(f"wrote {merged} and {out / 'summary.json'}")
    return 0


def save_checkpoints(fed, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    fed.server.theta.save(directory / "server_theta.fraug")
    if fed.server.omega is not None:
        fed.server.omega.save(directory / "server_omega.fraug")
    for c in fed.clients:
        c.theta.save(directory / f"client{c.cid}_theta.fraug")
        if c.phi is not None:
            c.phi.save(directory / f"client{c.cid}_rtnet.fraug")


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    from fraug.gradcheck import format_report, run_gradcheck

    results = run_gradcheck(seed=cfg.run.seeds[0], corrupt=args.corrupt)
    print(format_report(results))
    bad = [r.component for r in results if not r.passed]
    if bad:
        print("gradient check failed: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def cmd_headstudy(cfg: ExperimentConfig, args) -> int:
    from fraug.studies import head_study, summarize_head_study

    rows = [r for seed in cfg.run.seeds for r in head_study(cfg, seed)]
    summary = summarize_head_study(rows)
    print(f"{'domain':>8} {'scarce':>8} {'finetuned':>10}")
    for d, v in summary["domains"].items():
        print(f"{d:>8} {v['scarce']:8.2f} {v['finetuned']:10.2f}")
    print(f"{'avg':>8} {summary['scarce_avg']:8.2f} {summary['finetuned_avg']:10.2f}  delta {summary['delta']:+.2f}")
    print("frozen extractor: bit-identical before and after finetuning")
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "headstudy.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_ablation(cfg: ExperimentConfig, args) -> int:
    from fraug.studies import ablation

    rows = args.rows.split(",") if args.rows else None
    table = ablation(cfg, rows=rows)
    domains = next(iter(table.values()))["domains"]
    print(f"{'row':>8} " + " ".join(f"{d:>7}" for d in domains) + f" {'avg':>14}")
    for name, res in table.items():
        cells = " ".join(f"{res['domains'][d]:7.2f}" for d in domains)
        print(f"{name:>8} {cells} {res['mean']:8.2f}±{res['std']:.2f}")
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    from fraug.plot import plot_metrics

    svg, sidecar = plot_metrics(args.metrics, args.output)
    print(f"wrote {svg} and {sidecar}")
    return 0


def cmd_paramcount(cfg: ExperimentConfig, args) -> int:
    rep = communication_report(cfg)
    print(f"classifier  {rep['classifier_params']:>10d} params  {rep['classifier_macs']:>10d} MACs")
    print(f"generator   {rep['generator_params']:>10d} params  {rep['generator_macs']:>10d} MACs")
    print(f"rtnet       {rep['rtnet_params']:>10d} params  {rep['rtnet_macs']:>10d} MACs  (never transmitted)")
    print(f"overhead (generator + rtnet) / classifier = {100 * rep['overhead_ratio']:.2f}%")
    print("per-round payload (scalars, each direction):")
    for row in rep["per_round"]:
        print(f"  {row['strategy']:<12} {row['upload_per_round']:>10d}")
    print("reference (full-scale models):")
    for row in rep["reference"]:
        print(f"  {row['model']:<16} {row['params_m']:>6.2f}M params  {row['macs_g']:>7}G MACs")
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "paramcount.json").write_text(json.dumps(rep, indent=2) + "\n", encoding="utf-8")
    return 0


COMMANDS = {
    "run": cmd_run,
    "gradcheck": cmd_gradcheck,
    "headstudy": cmd_headstudy,
    "ablation": cmd_ablation,
    "plot": cmd_plot,
    "paramcount": cmd_paramcount,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MetricsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, NonFiniteError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
