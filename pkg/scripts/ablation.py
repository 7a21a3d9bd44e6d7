#!/usr/bin/env python3
"""Train each design variant to completion and tabulate the cost.

Variants: the full method, recomputed coefficients (no sharing), the
explicit per-sample-gradient route (no acceleration), and a fixed
damping constant instead of the Frobenius rule.

    python3 scripts/ablation.py [--config configs/ablate_mlp.cfg]
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from fngd.config import load_train_config
from fngd.train import run_ablate


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "ablate_mlp.cfg"))
    args = ap.parse_args()
    cfg = load_train_config(args.config)
    out = run_ablate(cfg, log=print)
    print(f"table written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
