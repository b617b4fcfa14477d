"""Propagation throughput of a freshly initialized model across frame sizes and target counts.

Prints median fps over repeats. Weights do not affect speed, so no checkpoint is needed.
"""

import argparse
import json

import numpy as np
import torch

from crvos.config import ModelConfig
from crvos.data import SyntheticSpec, generate_synthetic
from crvos.model import CRVOS
from crvos.propagation import benchmark


def run(size, targets, variant, frames, warmup, repeats, scale):
    model = CRVOS(ModelConfig(variant=variant, encoder_width_scale=scale)).eval()
    rec = generate_synthetic(SyntheticSpec(canvas=(size, size), num_targets=targets, size=size // 6,
                                           length=frames, seed=0))
    reports = [benchmark(rec.frames, rec.masks[0], model, warmup=warmup, num_targets=targets)
               for _ in range(repeats)]
    fps = float(np.median([r.fps for r in reports]))
    stages = {k: round(float(np.median([r.per_stage_ms[k] / r.frames_processed for r in reports])), 3)
              for k in reports[0].per_stage_ms}
    return {"size": size, "targets": targets, "variant": variant, "fps": round(fps, 1), "ms_per_frame": stages}


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", nargs="+", type=int, default=[64, 128, 256])
    p.add_argument("--targets", nargs="+", type=int, default=[1, 2, 4])
    p.add_argument("--variant", default="III")
    p.add_argument("--width-scale", type=float, default=0.03125)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--warmup", type=int, default=4)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json", action="store_true")
    a = p.parse_args()
    rows = [run(s, k, a.variant, a.frames, a.warmup, a.repeats, a.width_scale)
            for s in a.sizes for k in a.targets]
    if a.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"torch threads: {torch.get_num_threads()}")
        print(f"{'size':>6}{'K':>4}{'fps':>9}  per-frame ms (encode/clue/decode/overlap)")
        for r in rows:
            ms = r["ms_per_frame"]
            print(f"{r['size']:>6}{r['targets']:>4}{r['fps']:>9.1f}  "
                  f"{ms['encode']:.2f}/{ms['clue']:.2f}/{ms['decode']:.2f}/{ms['overlap']:.2f}")
