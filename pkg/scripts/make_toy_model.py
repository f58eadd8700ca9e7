#!/usr/bin/env python3
"""Regenerate the bundled articulated toy model asset.

The asset under src/flowpose/assets/ is checked in; rerun this after
changing the toy-model construction in flowpose.body.
"""

import argparse
import os

from flowpose import body


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-per-joint", type=int, default=12)
    p.add_argument("--n-shape", type=int, default=4)
    p.add_argument("--seed", type=int, default=20240214)
    p.add_argument("--out", default=os.path.join(
        os.path.dirname(body.__file__), "assets", "toy_model.json"))
    args = p.parse_args()

    m = body.make_toy_model(args.n_per_joint, args.n_shape, args.seed)
    body.save_model(m, args.out)
    print(f"wrote {args.out}: K={m.n_joints} joints, N={m.n_vertices} "
          f"vertices, S={m.n_shape} shape directions, "
          f"{len(m.anchor_indices)} anchors")


if __name__ == "__main__":
    main()
