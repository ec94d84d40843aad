"""Fidelity of the linear ramp against duration, with the worst-phase harmonic envelope.

Writes a CSV (tau_over_tau_ho, fidelity, envelope_fidelity) and lists the
local maxima next to m times the recoil-corrected oscillation period.
"""
import argparse
import math

import numpy as np

from conveyor.geometry import l_qgt
from conveyor.lattice import SITE, LatticeParams
from conveyor.dynamics import transport
from conveyor.protocols import envelope_infidelity, linear


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--u0", type=float, default=150.0)
    ap.add_argument("--points", type=int, default=241)
    ap.add_argument("--out", default="linear_revivals.csv")
    ap.add_argument("--harmonic", action="store_true", help="use the harmonic well instead of the lattice")
    args = ap.parse_args()

    p = LatticeParams.cesium(args.u0)
    ratios = np.linspace(0.5, 3.5, args.points)
    well = "harmonic" if args.harmonic else "lattice"
    fid = np.array([transport(linear(SITE, r * p.tau_ho), p, well=well).fidelity for r in ratios])
    env = 1 - envelope_infidelity("linear", ratios * p.tau_ho, l_qgt(SITE, p), p)
    np.savetxt(args.out, np.column_stack([ratios, fid, env]), delimiter=",", fmt="%.12g",
               header="tau_over_tau_ho,fidelity,envelope_fidelity", comments="")

    tilde = 1 + p.tau_ho / (2 * math.pi)
    for i in range(1, len(fid) - 1):
        if fid[i] > fid[i - 1] and fid[i] >= fid[i + 1]:
            m = max(1, round(ratios[i] / tilde))
            print(f"maximum at {ratios[i]:.3f} tau_HO (F = {fid[i]:.5f}); m*tilde = {m * tilde:.3f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
