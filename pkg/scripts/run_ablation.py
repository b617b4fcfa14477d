"""Variant I-IV comparison on the synthetic benchmark, median over seeds.

    python scripts/run_ablation.py --out runs/ablation --seeds 0 1 2
"""

import argparse
import sys
from pathlib import Path

from crvos.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation.yaml"

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", nargs="+", default=["0", "1", "2"])
    p.add_argument("--variants", nargs="+", default=["I", "II", "III", "IV"])
    p.add_argument("--config", default=str(CONFIG))
    a = p.parse_args()
    sys.exit(main(["ablate", "--config", a.config, "--out", a.out, "--seeds", *a.seeds,
                   "--variants", *a.variants]))
