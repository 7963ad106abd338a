"""Command-line entry point: ``run``, ``bench`` and ``fit`` subcommands."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import bench
from .config import ConfigError, load_config
from .filters import run_trial
from .llvm import EmOptions, JointEnsemble, Variant, fit_llvm

EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _load(path, scenario=None):
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    try:
        configs = load_config(path)
    except ConfigError as exc:
        raise CliError(f"invalid config {path}: {exc}") from None
    if scenario is not None:
        configs = [c for c in configs if c.name == scenario]
        if not configs:
            raise CliError(f"no scenario named {scenario!r} in {path}")
    return configs


def _emit(text: str, out_dir, name: str):
    if out_dir is None:
        sys.stdout.write(text)
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        fh.write(text)


def _json_safe(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def cmd_run(args) -> int:
    cfg = _load(args.config, args.scenario)[0]
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    seed = bench.trial_seed(cfg.master_seed, cfg.scenario_id, args.trial)
    res = run_trial(cfg, seed)
    dim = res.posterior_means.shape[1]
    header = ["cycle", "time"] + [f"x{i + 1}_mean" for i in range(dim)] + ["alpha", "eff_components"]
    n_done = res.failed_cycle if res.failed else cfg.n_cycles
    rows = []
    for c in range(n_done):
        rows.append([c + 1, float(res.times[c]), *map(float, res.posterior_means[c]),
                     float(res.alphas[c]), float(res.eff_components[c])])
    diag = {
        "scenario": res.scenario, "filter": res.filter, "seed": seed,
        "rmse_mean": _json_safe(res.rmse_mean),
        "rmse_series": [_json_safe(float(v)) for v in res.rmse_series[:n_done]],
        "failed": res.failed, "failed_cycle": res.failed_cycle,
    }
    if args.format == "json":
        diag["cycles"] = [dict(zip(header, r)) for r in rows]
        _emit(json.dumps(diag, indent=2) + "\n", args.out, "posterior_mean.json")
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        _emit(buf.getvalue(), args.out, "posterior_mean.csv")
        if args.out is not None:
            _emit(json.dumps(diag, indent=2) + "\n", args.out, "diagnostics.json")
    if res.failed:
        print(f"trial failed at cycle {res.failed_cycle}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    configs = _load(args.config, args.scenario)
    try:
        threads = bench.resolve_threads(args.threads)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    result = bench.run_bench(configs, threads=threads, master_seed=args.seed, n_trials=args.trials)
    out = args.out or "."
    bench.write_outputs(result, out, args.format)
    sys.stdout.write(bench.table(result.stats))
    return 0


def _read_matrix(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise CliError(f"sample file not found: {path}", EXIT_USAGE)
    with open(path) as fh:
        text = fh.read()
    delim = "," if "," in text else None
    try:
        data = np.loadtxt(io.StringIO(text), delimiter=delim, ndmin=2)
    except ValueError as exc:
        raise CliError(f"cannot parse {path}: {exc}") from None
    return data


def cmd_fit(args) -> int:
    X = _read_matrix(args.samples)
    n, h = X.shape
    h_q = h if args.h_q is None else args.h_q
    if not 0 <= h_q <= h:
        raise CliError(f"--h-q must lie in [0, {h}]", EXIT_USAGE)
    if not 1 <= args.m < h:
        raise CliError(f"--m must lie in [1, {h - 1}]", EXIT_USAGE)
    try:
        ens = JointEnsemble(X, h_q, h - h_q)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    opts = EmOptions(tol=args.tol, max_iter=args.max_iter)
    params = fit_llvm(ens, args.m, Variant(args.variant), opts, seed=args.seed or 0)
    emp = np.cov(X, rowvar=False, bias=True).reshape(h, h)
    implied = params.implied_cov()
    info = params.info
    report = {
        "n_samples": n, "dim": h, "m_latent": args.m, "variant": args.variant,
        "n_iter": info.n_iter, "converged": info.converged, "degenerate": info.degenerate,
        "loglik": info.loglik[-1] if info.loglik else None,
        "mu": params.mu.tolist(), "psi": params.psi.tolist(),
        "implied_cov_diag": np.diag(implied).tolist(),
        "sample_cov_diag": np.diag(emp).tolist(),
        "rel_frobenius_gap": float(np.linalg.norm(implied - emp) / max(np.linalg.norm(emp), 1e-300)),
    }
    if args.format == "json":
        _emit(json.dumps(report, indent=2) + "\n", args.out, "fit.json")
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "mu", "psi", "implied_var", "sample_var"])
        for i in range(h):
            w.writerow([i, repr(float(params.mu[i])), repr(float(params.psi[i])),
                        repr(float(implied[i, i])), repr(float(emp[i, i]))])
        _emit(buf.getvalue(), args.out, "fit.csv")
        print(f"n_iter={info.n_iter} converged={info.converged} "
              f"rel_frobenius_gap={report['rel_frobenius_gap']:.3e}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentfilter", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI scenario file")
            sp.add_argument("--scenario", help="restrict to one section name")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    r = sub.add_parser("run", help="single trial, per-cycle posterior means")
    common(r)
    r.add_argument("--trial", type=int, default=0, help="trial index used for seed derivation")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="all trials of all scenarios, RMSE statistics")
    common(b)
    b.add_argument("--trials", type=int, help="trials per scenario (overrides the config)")
    b.add_argument("--threads", type=int, help=f"worker processes (default ${bench.THREADS_ENV} or 1)")
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fit", help="fit a latent model to a sample matrix")
    common(f, config=False)
    f.add_argument("samples", help="whitespace- or comma-separated matrix, one sample per row")
    f.add_argument("--m", type=int, default=2, help="latent dimension")
    f.add_argument("--variant", choices=[v.value for v in Variant], default="ppca")
    f.add_argument("--h-q", type=int, help="number of leading QoI columns (default all)")
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--max-iter", type=int, default=500)
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "trials", None) is not None and args.trials < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"latentfilter: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"latentfilter: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
