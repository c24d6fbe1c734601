#!/usr/bin/env python3
"""Run the label-fraction grid.

Pre-trains one desk-scale backbone, then sweeps decoder encoding x
(init, frozen) variant x labelled fraction, recording test MIOU per cell in
the pinned results CSV schema. A config snapshot sidecar records every
setting (including epochs) for the run.
"""

import argparse
import sys
import time

from sardino.experiments import (experiment_grid, grid_values,
                                 load_pretrained_backbone, prepare_data,
                                 pretrain_run, write_config_snapshot)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results.csv", help="results CSV path")
    ap.add_argument("--checkpoint", default="grid_backbone.sdck",
                    help="where to store the pre-trained backbone")
    ap.add_argument("--modes", nargs="+",
                    default=["attn_unet", "token_decoder"])
    ap.add_argument("--fractions", nargs="+", type=float,
                    default=[0.1, 0.5, 1.0])
    args = ap.parse_args()

    values = grid_values(args.seed)
    data = prepare_data(values)
    t0 = time.time()
    print(f"pre-training backbone on {len(data.split.train)} tiles")
    result = pretrain_run(values, data, checkpoint_path=args.checkpoint)
    print(f"  final entropy {result.epoch_history[-1]['entropy']:.3f} "
          f"({time.time()-t0:.0f}s)")
    backbone, _, _, _ = load_pretrained_backbone(args.checkpoint)

    rows = experiment_grid(
        values, data, backbone, modes=tuple(args.modes),
        fractions=tuple(args.fractions), seeds=(args.seed,),
        csv_path=args.out,
        progress=lambda r: print(
            f"  {r.mode:<14} {r.init:<10} frozen={str(r.frozen):<5} "
            f"fraction={r.fraction:<4} miou={r.miou:.3f}", flush=True))
    write_config_snapshot(args.out + ".config.txt", values)
    print(f"wrote {args.out} ({len(rows)} rows, {time.time()-t0:.0f}s total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
