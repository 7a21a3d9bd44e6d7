#!/usr/bin/env python3
"""Final-accuracy comparison: shared coefficients vs recompute vs sgd-m.

Trains fngd, ngd_smw, and sgd_momentum on the same config across
several seeds and tabulates mean final test accuracy. The point of the
exercise: coefficients frozen after epoch one should cost roughly
nothing in accuracy against recomputing them every step.

    python3 scripts/sharing_fidelity.py [--config configs/mlp_synth.cfg]
                                        [--seeds 3] [--out out/fidelity.csv]
"""

import argparse
import statistics
import sys
from dataclasses import replace
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from fngd.config import load_train_config
from fngd.train import run_train

KINDS = ("fngd", "ngd_smw", "sgd_momentum")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "mlp_synth.cfg"))
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="out/fidelity.csv")
    args = ap.parse_args()

    base = load_train_config(args.config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    means = {}
    with open(out, "w") as fh:
        fh.write("# fngd-fidelity-v1\n")
        fh.write("optimizer,seed,final_test_accuracy\n")
        for kind in KINDS:
            finals = []
            for seed in range(args.seeds):
                cfg = replace(
                    base,
                    seed=seed,
                    optim=replace(base.optim, kind=kind),
                    metrics_path=out.parent / f"fidelity_{kind}_{seed}.csv",
                )
                acc = run_train(cfg).final["test_accuracy"]
                finals.append(acc)
                fh.write(f"{kind},{seed},{acc:.4f}\n")
                print(f"{kind:13s} seed {seed}  test_acc {acc:.4f}")
            means[kind] = statistics.mean(finals)

    print()
    for kind in KINDS:
        print(f"{kind:13s} mean {means[kind]:.4f}")
    gap = (means["fngd"] - means["ngd_smw"]) * 100
    print(f"sharing gap vs recompute: {gap:+.2f} percentage points")
    print(f"table written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
