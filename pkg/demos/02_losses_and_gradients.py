"""Evaluate the training losses on one box pair and check their gradients.

Run: python3 demos/02_losses_and_gradients.py
"""

import math

import numpy as np

from box4d import checks
from box4d import geometry as geo
from box4d import losses as L

# Box parameters are [x, y, z, w, h, l, yaw] in the camera frame.
gt = np.array([0.2, 0.1, 4.0, 1.0, 0.8, 1.5, 0.3])
pred = np.array([0.35, 0.0, 4.3, 1.1, 0.7, 1.3, 0.5])
K = geo.CameraIntrinsics.default()

for name, fn in [("l_center", L.l_center), ("l_d", L.l_d), ("l_iou3d", L.l_iou3d),
                 ("l_corner", L.l_corner), ("l_dim", L.l_dim)]:
    v = fn(pred, gt)
    print(f"{name:<9} value {v.value:.6f}  |grad| {np.linalg.norm(v.gradient):.4f}")
print(f"{'l_iou2d':<9} value {L.l_iou2d(pred, gt, K).value:.6f}")

# Forward-mode gradients agree with central differences away from kinks.
res = L.grad_check(lambda x: L.l_iou3d(x, gt), pred)
print(f"\nl_iou3d gradient check: max rel. error {res.max_rel_error:.2e}, {res.n_flagged} components near a kink")

# A width/length swap is almost free under the dimension loss: only the height term remains.
a = np.array([0, 0, 4, 2.0, 1.3, 4.0, 0])
b = np.array([0, 0, 4, 4.0, 1.0, 2.0, 0])
print(f"l_dim after a w/l swap: {L.l_dim(a, b).value:.6f} (height term alone: {abs(1.3 - 1.0):.6f})")
# The soft minimum over the two assignments leaves a small residual at pred == gt
# when w and l are close: 2|w-l| sigmoid(-2|w-l|/tau).
c = np.array([0, 0, 4, 1.0, 1.0, 1.05, 0])
print(f"l_dim(c, c) = {L.l_dim(c, c).value:.3e}, "
      f"2|w-l|sigmoid(-2|w-l|/tau) = {2 * 0.05 / (1 + math.exp(2 * 0.05 / L.TAU)):.3e}")

# The full randomized suite, reduced to a few points per loss.
rows = checks.run_loss_suite(n_points=5, seed=0)
print()
print(checks.format_loss_table(rows, 0))
