"""Lorenz 96 model-error grid: EnKF vs EnPPCA RMSE over truth forcings 8..12."""
import argparse
from pathlib import Path

from latentfilter import bench
from latentfilter.config import table1_grid

MEAS = ("l96_linear", "l96_nl1", "l96_nl2")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("table1_out"))
    args = ap.parse_args()

    res = bench.run_bench(table1_grid(n_trials=args.trials, master_seed=args.seed), threads=args.threads)
    bench.write_outputs(res, args.out)
    by_key = {(s.scenario, s.filter): s for s in res.stats}
    for meas in MEAS:
        print(f"\n{meas}")
        print(f"{'F':>4} {'EnKF mean':>10} {'EnKF std':>9} {'EnPPCA mean':>12} {'EnPPCA std':>11}")
        for F in (8, 9, 10, 11, 12):
            sc = f"lorenz96/{meas}/F{F}"
            k, p = by_key[(sc, "enkf")], by_key[(sc, "enppca")]
            print(f"{F:>4} {k.mean:>10.3f} {k.std:>9.3f} {p.mean:>12.3f} {p.std:>11.3f}")
    print(f"\noutputs in {args.out}")


if __name__ == "__main__":
    main()
