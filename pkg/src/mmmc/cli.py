"""Command-line front end.

Subcommands:

  run          one accelerated trajectory -> trajectory CSV
  replicate    R independent runs -> (time, mean, std) CSV
  match-sweep  matching error studies: constraint-count sweep (KS table,
               moment errors) and time-distance sweep (stress error vs dt)
  extrap-sweep one-step extrapolate+match error vs dt
  stability    roots of the multistep recurrence polynomial
  ks           two-sample Kolmogorov-Smirnov test on two sample files

Every CSV embeds the config hash and seed as '#' header comments; re-running
a command with the same inputs reproduces its output files byte for byte.
Exit status is 0 on success; failures print one machine-readable line
``error: <kind>: <detail>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import ks_two_sample, replicate_stats
from .config import (ConfigError, ExperimentConfig, config_hash,
                     config_to_ini, load_config)
from .experiments import (extrap_local_error_sweep, matching_dt_sweep,
                          matching_moment_sweep)
from .extrapolation import characteristic_roots
from .orchestrator import SimulationError, run_simulation


def _common_header(cfg: ExperimentConfig) -> list[str]:
    return [f"config_hash: {config_hash(cfg)}", f"seed: {cfg.seed}"]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "replicates", None) is not None:
        cfg = replace(cfg, replicates=args.replicates)
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg.validate()


def _outdir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    print(path)


def cmd_run(args) -> int:
    cfg = _load(args)
    rec = run_simulation(cfg)
    out = _outdir(cfg)
    _write(out / "trajectory.csv", rec.csv_text())
    _write(out / "config_snapshot.ini", config_to_ini(cfg))
    if cfg.record_inner:
        ts, qs = rec.inner_series()
        lines = [f"# {h}" for h in _common_header(cfg)] + ["time,qoi"]
        lines += [f"{t!r},{q!r}" for t, q in zip(ts, qs)]
        _write(out / "inner_qoi.csv", "\n".join(lines) + "\n")
    return 0


def cmd_replicate(args) -> int:
    cfg = _load(args)
    stats = replicate_stats(cfg, cfg.replicates, workers=cfg.workers)
    out = _outdir(cfg)
    _write(out / "replicate_stats.csv",
           stats.csv_text(header_lines=_common_header(cfg) +
                          [f"replicates: {cfg.replicates}"]))
    return 0


def cmd_match_sweep(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    header = [f"# {h}" for h in _common_header(cfg)]
    if args.mode == "L":
        L_values = list(range(args.lmin, args.lmax + 1))
        res = matching_moment_sweep(cfg, args.t_minus, args.t_star, L_values,
                                    report_l_max=max(args.lmax, 10))
        lines = header + ["L,D,p"]
        for L in res.L_values:
            ks = res.ks[L]
            if ks is None:
                lines.append(f"{L},nan,nan")
            else:
                lines.append(f"{L},{ks.statistic!r},{ks.pvalue!r}")
        _write(out / "ks_table.csv", "\n".join(lines) + "\n")
        lines = header + ["L,moment_order,relative_error"]
        for L in res.L_values:
            errs = res.moment_rel_errors[L]
            if errs is None:
                continue
            for order, err in zip(res.report_orders, errs):
                lines.append(f"{L},{order},{err!r}")
        _write(out / "moment_errors.csv", "\n".join(lines) + "\n")
    else:
        dts = np.array(args.dt_grid, dtype=float) if args.dt_grid else \
            cfg.dt_inner * np.array([1, 2, 5, 10, 20, 50, 100, 200])
        L_values = args.L_list or [3, 4, 5]
        res = matching_dt_sweep(cfg, args.t_minus, dts, L_values,
                                n_seeds=args.seeds)
        lines = header + ["L,dt,relative_stress_error"]
        for L in res.L_values:
            for d, e in zip(res.dt_values, res.rel_error[L]):
                lines.append(f"{L},{d!r},{e!r}")
        _write(out / "match_dt_error.csv", "\n".join(lines) + "\n")
    return 0


def cmd_extrap_sweep(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    header = [f"# {h}" for h in _common_header(cfg)]
    dts = np.array(args.dt_grid, dtype=float) if args.dt_grid else \
        cfg.dt_inner * np.array([1, 2, 5, 10, 20, 50, 100, 200])
    L_values = args.L_list or [3, 4, 5]
    res = extrap_local_error_sweep(cfg, args.t_minus, dts, L_values,
                                   n_seeds=args.seeds, method=args.method,
                                   pe=args.pe)
    lines = header + ["L,dt,relative_stress_error"]
    for L in res.L_values:
        for d, e in zip(res.dt_values, res.rel_error[L]):
            lines.append(f"{L},{d!r},{e!r}")
    _write(out / f"extrap_{args.method}_error.csv", "\n".join(lines) + "\n")
    return 0


def cmd_stability(args) -> int:
    rows = ["pe,beta,root_re,root_im,modulus,zero_stable"]
    for beta in args.beta:
        roots, stable = characteristic_roots(beta, args.pe)
        for r in roots:
            rows.append(f"{args.pe},{beta!r},{r.real!r},{r.imag!r},"
                        f"{abs(r)!r},{int(stable)}")
    text = "\n".join(rows)
    if args.out_file:
        Path(args.out_file).write_text(text + "\n", encoding="utf-8")
        print(args.out_file)
    else:
        print(text)
    return 0


def cmd_ks(args) -> int:
    a = np.loadtxt(args.sample_a, ndmin=1)
    b = np.loadtxt(args.sample_b, ndmin=1)
    res = ks_two_sample(a, b)
    print(f"D={res.statistic!r} p={res.pvalue!r} n_a={res.n_a} n_b={res.n_b}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="mmmc", description=__doc__,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="path to an INI experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="single accelerated trajectory")
    add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replicate", help="replicate mean/std of the observable")
    add_common(p)
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("match-sweep", help="matching error experiments")
    add_common(p)
    p.add_argument("--mode", choices=("L", "dt"), default="L")
    p.add_argument("--t-minus", type=float, default=1.0)
    p.add_argument("--t-star", type=float, default=1.15)
    p.add_argument("--lmin", type=int, default=2)
    p.add_argument("--lmax", type=int, default=10)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--dt-grid", type=float, nargs="*")
    p.add_argument("--L-list", type=int, nargs="*")
    p.set_defaults(func=cmd_match_sweep)

    p = sub.add_parser("extrap-sweep", help="one-step extrapolation error")
    add_common(p)
    p.add_argument("--method", choices=("projective", "multistep"),
                   default="projective")
    p.add_argument("--pe", type=int, default=1)
    p.add_argument("--t-minus", type=float, default=1.4)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--dt-grid", type=float, nargs="*")
    p.add_argument("--L-list", type=int, nargs="*")
    p.set_defaults(func=cmd_extrap_sweep)

    p = sub.add_parser("stability", help="multistep recurrence root check")
    p.add_argument("--pe", type=int, required=True)
    p.add_argument("--beta", type=float, nargs="+", required=True)
    p.add_argument("--out-file")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("ks", help="two-sample KS test on sample files")
    p.add_argument("sample_a")
    p.add_argument("sample_b")
    p.set_defaults(func=cmd_ks)
    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"error: simulation: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
