"""Warm-started optimization chain against independent cold starts at the same durations."""
import argparse
import time
import warnings

import numpy as np

from conveyor.lattice import SITE, LatticeParams
from conveyor.optimizer import OptimizerConfig, optimize, warm_start_chain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--u0", type=float, default=150.0)
    ap.add_argument("--hi", type=float, default=1.8)
    ap.add_argument("--lo", type=float, default=0.7)
    ap.add_argument("--n", type=int, default=12)
    ap.add_argument("--max-evals", type=int, default=600)
    args = ap.parse_args()
    warnings.simplefilter("ignore", UserWarning)

    p = LatticeParams.cesium(args.u0)
    cfg = OptimizerConfig(max_evals=args.max_evals, polish_evals=40)
    ratios = np.linspace(args.hi, args.lo, args.n)
    taus = ratios * p.tau_ho

    start = time.time()
    chain = warm_start_chain(taus, SITE, p, config=cfg)
    t_chain = time.time() - start
    start = time.time()
    cold = [optimize(t, SITE, p, config=cfg) for t in taus]
    t_cold = time.time() - start

    print("tau/tau_HO  chained     cold        detection(chained)")
    for r, a, b in zip(ratios, chain, cold):
        print(f"{r:9.3f}  {a.fidelity:.6f}  {b.fidelity:.6f}  {a.detection_fidelity:.6f}")
    wins = sum(a.fidelity >= b.fidelity - cfg.tol for a, b in zip(chain, cold))
    print(f"chained >= cold at {wins}/{len(taus)} durations; wall time {t_chain:.0f} s vs {t_cold:.0f} s")


if __name__ == "__main__":
    main()
