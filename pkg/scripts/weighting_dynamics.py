"""Trace learned log-variances under frozen task losses.

    python scripts/weighting_dynamics.py --losses 0.25,4.0 --steps 2000

Each s_t should settle at log L_t, so the noisier task ends with the
smaller effective weight exp(-s)/2.
"""

import argparse

import numpy as np

from guidedrep.autodiff import NesterovSGD
from guidedrep.guidance import LossWeighter


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--losses", default="0.25,4.0")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--momentum", type=float, default=0.9)
    args = ap.parse_args()

    losses = [float(v) for v in args.losses.split(",")]
    tasks = [f"task{i}" for i in range(len(losses))]
    frozen = dict(zip(tasks, losses))
    w = LossWeighter(tasks, "uncertainty")
    opt = NesterovSGD(w.params(), lr=args.lr, momentum=args.momentum)
    print("step," + ",".join(f"s_{t},w_{t}" for t in tasks))
    for step in range(args.steps + 1):
        if step % max(1, args.steps // 20) == 0:
            weights = w.weights()
            print(f"{step}," + ",".join(f"{s:.6f},{weights[t]:.6f}" for t, s in zip(tasks, w.log_vars.values)))
        opt.lookahead()
        opt.zero_grad()
        w.backward(frozen)
        opt.step()
    print("target log L: " + ", ".join(f"{np.log(v):.6f}" for v in losses))


if __name__ == "__main__":
    main()
