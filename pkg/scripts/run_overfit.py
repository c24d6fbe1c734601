#!/usr/bin/env python3
"""Memorization sanity check for every decoder mode.

Each architecture trains on ten tiles and is evaluated on those same tiles;
a correctly wired training path must exceed 0.8 mean IoU within 50 epochs.
"""

import argparse
import sys
import time

import numpy as np

from sardino import config as cf
from sardino.decoders import MODES
from sardino.experiments import overfit_run, overfit_values, prepare_data
from sardino.vit import VisionTransformer


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--modes", nargs="+", default=list(MODES))
    ap.add_argument("--target", type=float, default=0.8)
    args = ap.parse_args()

    failures = []
    for mode in args.modes:
        values = overfit_values(mode)
        data = prepare_data(values)
        backbone = None
        if mode != "unet_baseline":
            backbone = VisionTransformer(cf.build_vit_config(values),
                                         np.random.default_rng(5))
        t0 = time.time()
        score, epoch = overfit_run(values, data, mode, backbone,
                                   target_miou=args.target)
        status = "ok" if score > args.target else "FAIL"
        print(f"{mode:<20} miou {score:.3f} at epoch {epoch:>2} "
              f"({time.time()-t0:.0f}s)  {status}")
        if score <= args.target:
            failures.append(mode)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
