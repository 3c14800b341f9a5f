"""Regularization and penalty sweeps: errors against epsilon and against h."""

import argparse
from pathlib import Path

import numpy as np

from tresca_vi import verification as V
from tresca_vi.cli_io import sweep_rows, write_csv
from tresca_vi.state_solver import ControlField, ProblemSpec


def show(rep):
    print(f"{rep.name}: passed={rep.passed} slope={rep.slope:.3f}")
    for v, e in zip(rep.values, rep.errors):
        print(f"  {rep.parameter}={v:<10g} error={e:.4e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=1, choices=(1, 2))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("out/sweeps"))
    args = ap.parse_args()
    n, N = (16, 32) if args.dim == 1 else (8, 16)
    rng = np.random.default_rng(args.seed)
    # sticking regime (b = 0) for epsilon, sliding regime (b = 1) for h
    s_eps = ProblemSpec(dim=args.dim, n=n, n_steps=N, q=0.2, b=0.0, u_b=0.0)
    rep = V.sweep_eps(s_eps, ControlField.random(s_eps, rng))
    show(rep)
    write_csv(sweep_rows(rep, "script", args.seed), args.out / "sweep_eps.csv")
    s_h = ProblemSpec(dim=args.dim, n=n, n_steps=N, q=0.5, b=1.0, u_b=1.0, bc_mode="robin")
    rep = V.sweep_h(s_h, ControlField.random(s_h, rng))
    show(rep)
    print(f"  trace slope {rep.details['trace_slope']:.3f}")
    write_csv(sweep_rows(rep, "script", args.seed), args.out / "sweep_h.csv")


if __name__ == "__main__":
    main()
