"""Benchmark orchestration: many seeded trials per scenario, aggregated RMSE statistics."""
from __future__ import annotations

import csv
import io
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import BenchConfig
from .filters import run_trial

STATS_HEADER = ("scenario", "filter", "mean_rmse", "std_rmse", "ok", "failed")
TRIALS_HEADER = ("scenario", "filter", "trial", "seed", "rmse", "failed", "failed_cycle", "alpha_median")
THREADS_ENV = "LATENTFILTER_THREADS"


@dataclass(frozen=True)
class RmseStats:
    scenario: str
    filter: str
    mean: float
    std: float
    n_ok: int
    n_failed: int

    @property
    def failed(self) -> bool:
        """True when no trial of the scenario survived."""
        return self.n_ok == 0

    def row(self) -> dict:
        return {"scenario": self.scenario, "filter": self.filter, "mean_rmse": self.mean,
                "std_rmse": self.std, "ok": self.n_ok, "failed": self.n_failed}


@dataclass(frozen=True)
class TrialSummary:
    scenario: str
    filter: str
    trial: int
    seed: int
    rmse: float
    failed: bool
    failed_cycle: int | None
    alphas: tuple[float, ...]

    @property
    def alpha_median(self) -> float:
        return float(np.median(self.alphas)) if self.alphas else float("nan")


@dataclass(frozen=True)
class BenchResult:
    stats: list[RmseStats]
    trials: list[TrialSummary]


def trial_seed(master_seed: int, scenario_id: str, trial: int) -> int:
    """Seed of one trial; independent of the filter so filters see the same twin data."""
    key = zlib.crc32(scenario_id.encode())
    return int(np.random.SeedSequence([int(master_seed), key, int(trial)]).generate_state(1, np.uint64)[0])


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def _run_one(task) -> TrialSummary:
    cfg, trial, seed = task
    res = run_trial(cfg, seed)
    n_done = res.failed_cycle if res.failed else cfg.n_cycles
    alphas = tuple(float(a) for a in res.alphas[:n_done]) if cfg.filter != "enkf" else ()
    return TrialSummary(cfg.scenario_id, cfg.filter, trial, seed, res.rmse_mean, res.failed,
                        res.failed_cycle, alphas)


def summarize(scenario: str, filt: str, rmses, failed) -> RmseStats:
    rmses = np.asarray(rmses, dtype=float)
    failed = np.asarray(failed, dtype=bool)
    ok = rmses[~failed]
    if ok.size == 0:
        return RmseStats(scenario, filt, float("nan"), float("nan"), 0, int(failed.sum()))
    # population std, so a single trial reports zero spread
    return RmseStats(scenario, filt, float(ok.mean()), float(ok.std()), int(ok.size), int(failed.sum()))


def run_bench(configs: list[BenchConfig], threads: int | None = None,
              master_seed: int | None = None, n_trials: int | None = None) -> BenchResult:
    """Run every trial of every config and aggregate per (scenario, filter).

    Results are sorted by config order and trial index before aggregation, so
    the output does not depend on the worker count or completion order.
    """
    threads = resolve_threads(threads)
    tasks = []
    for cfg in configs:
        if master_seed is not None:
            cfg = cfg.replace(master_seed=master_seed)
        if n_trials is not None:
            cfg = cfg.replace(n_trials=n_trials)
        for t in range(cfg.n_trials):
            tasks.append((cfg, t, trial_seed(cfg.master_seed, cfg.scenario_id, t)))

    if threads == 1 or len(tasks) == 1:
        trials = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            trials = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * threads))))

    order = []
    grouped: dict[tuple[str, str], list[TrialSummary]] = {}
    for tr in trials:
        key = (tr.scenario, tr.filter)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(tr)
    stats = []
    for key in order:
        rows = sorted(grouped[key], key=lambda r: r.trial)
        stats.append(summarize(*key, [r.rmse for r in rows], [r.failed for r in rows]))
    return BenchResult(stats, trials)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def stats_csv(stats: list[RmseStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    for s in stats:
        w.writerow([_fmt(v) for v in s.row().values()])
    return buf.getvalue()


def stats_json(stats: list[RmseStats]) -> str:
    rows = []
    for s in stats:
        r = s.row()
        # JSON has no NaN; a fully failed scenario is reported as null
        r = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
        rows.append(r)
    return json.dumps(rows, indent=2) + "\n"


def trials_csv(trials: list[TrialSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIALS_HEADER)
    for t in trials:
        w.writerow([_fmt(v) for v in (t.scenario, t.filter, t.trial, t.seed, t.rmse, int(t.failed),
                                      t.failed_cycle, t.alpha_median)])
    return buf.getvalue()


def write_outputs(result: BenchResult, out_dir, fmt: str = "csv") -> list[str]:
    """Write the stats table (csv and json mirror) plus the per-trial table."""
    os.makedirs(out_dir, exist_ok=True)
    files = {"rmse_stats.json": stats_json(result.stats), "trials.csv": trials_csv(result.trials)}
    if fmt == "csv":
        files["rmse_stats.csv"] = stats_csv(result.stats)
    elif fmt != "json":
        raise ValueError(f"unknown format {fmt!r}")
    paths = []
    for name, text in sorted(files.items()):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        paths.append(path)
    return paths


def table(stats: list[RmseStats]) -> str:
    """Plain-text table: one row per scenario, a mean/std column pair per filter."""
    filters = list(dict.fromkeys(s.filter for s in stats))
    by = {(s.scenario, s.filter): s for s in stats}
    scenarios = list(dict.fromkeys(s.scenario for s in stats))
    head = f"{'scenario':<28}" + "".join(f"{f + ' mean':>14}{f + ' std':>12}" for f in filters)
    lines = [head]
    for sc in scenarios:
        cells = []
        for f in filters:
            s = by.get((sc, f))
            if s is None or s.failed:
                cells.append(f"{'failed' if s else '-':>14}{'':>12}")
            else:
                cells.append(f"{s.mean:>14.3f}{s.std:>12.3f}")
        lines.append(f"{sc:<28}" + "".join(cells))
    return "\n".join(lines) + "\n"
