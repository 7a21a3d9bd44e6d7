#!/usr/bin/env python3
"""Per-epoch wall time for every optimizer on one workload.

Separates fngd's first (coefficient-building) epoch from its shared
phase, so the table shows where the speed comes from: the shared phase
does no Gram products and no solves.

    python3 scripts/timing_breakdown.py [--config configs/bench_mlp.cfg]
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from fngd.config import load_train_config
from fngd.train import run_bench


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "bench_mlp.cfg"))
    args = ap.parse_args()
    cfg = load_train_config(args.config)
    out = run_bench(cfg, log=print)
    print(f"table written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
