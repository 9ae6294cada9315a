"""Run the sequence decoder and show that frame t never sees frames after t.

Run: python3 demos/03_decoder.py
"""

import numpy as np

from box4d import decoder as dec

T, N, M, d = 4, 3, 5, 32
weights = dec.DecoderWeights.init(d, seed=0)
tokens, e_img, e_geo = dec.random_inputs(T, N, M, d, seed=0)
states = dec.decoder_forward(tokens, e_img, e_geo, weights)
boxes, poses = dec.heads_forward(states, weights)
print(f"tokens {tokens.shape} -> states {states.shape} -> boxes {boxes.shape}, poses {poses.shape}")

# Perturb only the last frame's inputs and compare the earlier frames' outputs.
e_img2 = e_img.copy()
e_img2[-1] += np.random.default_rng(1).normal(size=e_img2[-1].shape)
states2 = dec.decoder_forward(tokens, e_img2, e_geo, weights)
for t in range(T):
    print(f"  frame {t}: max change {np.max(np.abs(states2[t] - states[t])):.2e}")

report = dec.causality_trials(weights, T, N, M, trials=20, seed=0, mode="frame")
print("\ncausality over 20 random trials:", {k: f"{v:.1e}" for k, v in report.items()})
print(f"padding neutrality: {dec.padding_trials(weights, T=3, M=M, seed=0):.1e}")
