"""Score ground truth and noisy copies of it with the detection and consistency metrics.

Run: python3 demos/04_evaluate.py [out_dir]
"""

import sys
import tempfile

import numpy as np

from box4d import cli
from box4d import dataset as io
from box4d import geometry as geo
from box4d import metrics

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="box4d_eval_")
cli.main(["generate", "--out", out, "--seed", "0", "--n-scenes", "2", "--n-frames", "20",
          "--clip-len", "10", "--stride", "5"])
gts, poses = cli.load_ground_truth(f"{out}/dataset")

# Ground truth scored against itself: AP and F1 are 1. The variance metrics
# are not zero because adapted boxes of partially seen objects grow over a clip.
r = metrics.evaluate(gts, gts, poses)
print(f"GT as prediction: AP {r.ap_mean:.3f}  F1@0.25 {r.f1_25:.3f}  Var_v {r.var_v:.4f}  Var_c {r.var_c:.4f}")

rng = np.random.default_rng(0)
for sigma in (0.02, 0.05, 0.10):
    noisy = [io.PredictionRecord(g.sequence_id, g.frame, g.instance_id,
                                 geo.OrientedBox3D(g.box.center + rng.normal(0, sigma, 3), g.box.dims, g.box.rotation),
                                 g.score, g.category) for g in gts]
    r = metrics.evaluate(noisy, gts, poses)
    print(f"center noise {sigma:.2f} m: AP {r.ap_mean:.3f}  Var_c {r.var_c:.4f}")

# The same through the command line, writing report.json and report.tsv.
io.write_predictions(noisy, f"{out}/noisy.jsonl")
cli.main(["eval", "--gt", f"{out}/dataset", "--pred", f"{out}/noisy.jsonl", "--out", f"{out}/report"])
