"""Zero-temperature and thermally averaged fidelity of optimized trajectories."""
import argparse
import warnings

from conveyor.dynamics import ThermalConfig, thermal_fidelity
from conveyor.lattice import SITE, LatticeParams
from conveyor.optimizer import OptimizerConfig, warm_start_chain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--u0", type=float, default=150.0)
    ap.add_argument("--t-perp", type=float, default=1.0, help="radial temperature in uK")
    ap.add_argument("--ratios", type=float, nargs="+", default=[2.0, 1.8, 1.6, 1.4, 1.2, 1.0, 0.8])
    ap.add_argument("--max-evals", type=int, default=1500)
    args = ap.parse_args()
    warnings.simplefilter("ignore", UserWarning)

    p = LatticeParams.cesium(args.u0)
    th = ThermalConfig(t_perp_uk=args.t_perp)
    ratios = sorted(args.ratios, reverse=True)
    chain = warm_start_chain([r * p.tau_ho for r in ratios], SITE, p,
                             config=OptimizerConfig(max_evals=args.max_evals, polish_evals=60))
    print("tau/tau_HO  F(T=0)     F(thermal)")
    for r, res in zip(ratios, chain):
        print(f"{r:9.3f}  {res.fidelity:.6f}  {thermal_fidelity(res.trajectory, p, th):.6f}")


if __name__ == "__main__":
    main()
