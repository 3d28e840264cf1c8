"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .engine import DivergenceError, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("asyncoffload")


def _load(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config, args.set)
    return ExperimentConfig().with_overrides(args.set) if args.set else ExperimentConfig()


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, files, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "files": sorted(Path(f).name for f in files),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    rep = train(cfg, concurrent=args.concurrent)
    files = rep.write(out)
    _write_manifest(out, cfg, "run", files.values(), execution="concurrent" if args.concurrent else "serial")
    summary = {
        "final_loss": rep.final_loss,
        "final_accuracy": rep.final_accuracy,
        "rho": rep.rho,
        "staleness_factor": rep.staleness_factor,
        "n_flushes": rep.n_flushes,
        "out": str(out),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .pipesim import PipelineProfile, ScheduleKind, ScheduleSpec, simulate

    cfg = _load(args)
    pc = cfg.pipeline
    p = pc.profile
    prof = PipelineProfile(fp_ms=p.fp_ms, bp_ms=p.bp_ms, cpu_update_ms=p.cpu_update_ms, model_bytes=p.model_bytes,
                           pcie_bytes_per_s=p.pcie_bytes_per_s, n_layers=p.n_layers, gpu_update_ms=p.gpu_update_ms)
    S = pc.S or cfg.optimizer.S
    k = pc.k if pc.k is not None else cfg.selection.k_channel_ratio
    n = args.n_iters or pc.n_iters
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = list(dict.fromkeys(["SequentialOffload", *pc.schedules]))
    summaries, files = {}, []
    for name in kinds:
        spec = ScheduleSpec(ScheduleKind(name), S=S, k=k, swap_bytes=pc.swap_bytes)
        tr = simulate(spec, prof, n)
        tr.check_exclusive()
        files += [tr.to_csv(out / f"{name}.csv"), tr.to_json(out / f"{name}.json")]
        summaries[name] = tr.summary()
    base = summaries["SequentialOffload"]["avg_iter_ms"]
    for s in summaries.values():
        s["speedup_vs_SequentialOffload"] = base / s["avg_iter_ms"]
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps({"profile": prof.to_dict(), "schedules": summaries}, sort_keys=True,
                                       indent=2) + "\n")
    files.append(summary_path)
    _write_manifest(out, cfg, "simulate", files, n_iters=n)
    for name, s in summaries.items():
        print(f"{name:<20} {s['avg_iter_ms']:>10.1f} ms/iter  stall {s['stall_ms']:>8.1f} ms  "
              f"speedup x{s['speedup_vs_SequentialOffload']:.2f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .pipesim import PipelineProfile, ScheduleKind, ScheduleSpec, io_per_iter_model, min_hide_interval
    from .sharding import reduction_table
    from .staleopt import staleness_factor, warmup_penalty

    cfg = _load(args)
    rho = args.rho
    if args.report:
        path = Path(args.report) / "report.json"
        if not path.is_file():
            raise ConfigError(f"no run report at {path}")
        rep = json.loads(path.read_text())
        rho = rep["rho"] if rho is None else rho
        if not args.config:
            cfg = ExperimentConfig.from_dict(rep["config"])
    if rho is None:
        raise ConfigError("analyze needs --rho or --report pointing at a run directory")
    S = args.S or cfg.optimizer.S
    T = args.T or cfg.T
    tau = args.tau if args.tau is not None else round(cfg.optimizer.warmup_frac * T)
    k = cfg.selection.k_channel_ratio
    p = cfg.pipeline.profile
    prof = PipelineProfile(fp_ms=p.fp_ms, bp_ms=p.bp_ms, cpu_update_ms=p.cpu_update_ms, model_bytes=p.model_bytes,
                           pcie_bytes_per_s=p.pcie_bytes_per_s, n_layers=p.n_layers, gpu_update_ms=p.gpu_update_ms)
    M = prof.model_bytes
    result = {
        "rho": rho,
        "S": S,
        "staleness_factor": staleness_factor(rho, S),
        "warmup_penalty": warmup_penalty(rho, S, tau, T, cfg.analysis.beta),
        "tau": tau,
        "T": T,
        "beta": cfg.analysis.beta,
        "io_per_iter_partitioned_over_M": io_per_iter_model(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=S, k=min(k, 0.999)), M) / M,
        "io_per_iter_baseline_over_M": io_per_iter_model(ScheduleSpec(ScheduleKind.SequentialOffload), M) / M,
        "min_hide_interval": min_hide_interval(prof, min(k, 0.999)),
        "comm_reduction_4096x4096_4_shards": reduction_table(4096, 4096, 4),
    }
    print(json.dumps(result, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_paper_check(args) -> int:
    from .checks import format_table, run_all

    ids = [int(x) for x in args.only.split(",")] if args.only else None
    results = run_all(ids)
    print(format_table(results))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "checks.json").write_text(json.dumps([r.to_dict() for r in results], sort_keys=True,
                                                    indent=2, default=str) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asyncoffload", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required: bool):
        if required:
            p.add_argument("config", help="experiment config (YAML or JSON)")
        else:
            p.add_argument("config", nargs="?", help="experiment config (YAML or JSON); defaults if omitted")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. selection.k_channel_ratio=0.05")

    p = sub.add_parser("run", help="train one configuration and write a report")
    with_config(p, True)
    p.add_argument("-o", "--out", default="runs/latest", help="output directory")
    p.add_argument("--concurrent", action="store_true", help="run delayed updates on a worker thread")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="simulate pipeline schedules and compare them")
    with_config(p, False)
    p.add_argument("-o", "--out", default="runs/simulate", help="output directory")
    p.add_argument("--n-iters", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="staleness penalties, I/O model and minimal hiding interval")
    with_config(p, False)
    p.add_argument("--report", help="run directory whose measured rho is used")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--S", type=int, default=None)
    p.add_argument("--tau", type=int, default=None, help="warm-up steps")
    p.add_argument("--T", type=int, default=None, help="total steps")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("paper-check", aliases=["check"], help="run the reference-claim checks and print a pass/fail table")
    p.add_argument("--only", help="comma-separated check ids")
    p.add_argument("-o", "--out", help="directory for checks.json")
    p.set_defaults(func=cmd_paper_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
