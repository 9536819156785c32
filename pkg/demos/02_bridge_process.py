"""Walk the Brownian bridge forward and backward by hand.

The forward process interpolates from a class's image label (t=0) to the
input image (t=T) with variance that vanishes at both ends.  The reverse
process undoes it one step at a time from an epsilon prediction.  With the
cheating "oracle" prediction eps* = y_t - y_0 the chain lands exactly on the
label it started from; that identity is what training teaches the network
to approximate.

Run:  python3 demos/02_bridge_process.py
"""

import os

import numpy as np
import torch

from labelbridge import OraclePredictor, build_schedule, generate_codebook
from labelbridge.bridge import forward_marginal, reverse_step, sample_label
from labelbridge.data import load_dataset
from labelbridge.report import save_image_grid

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

schedule = build_schedule(num_steps=4, s_max=1.0)
print("schedule tables (T = 4):")
print("  m      ", np.round(schedule.m, 4))
print("  delta  ", np.round(schedule.delta, 4))
print("  gamma  ", np.round(schedule.gamma[1:], 4))
print("  c_eps  ", np.round(schedule.c_eps[1:4], 4), "(interior reverse coefficients)")

ds = load_dataset("shapes-4")
codebook = generate_codebook(4, ds.label_shape, ds.data_range, seed=0)

x = torch.as_tensor(ds.train_x[0])
true_class = int(ds.train_y[0])
y0 = torch.as_tensor(codebook.labels[true_class], dtype=x.dtype)
print(f"\nsample 0 is class {true_class}")

# forward: label -> image, one marginal per t
gen = torch.Generator().manual_seed(0)
forward_states = []
for t in range(1, 5):
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    forward_states.append(forward_marginal(schedule, y0, x, t, noise))
print("forward marginal means move from the label toward the input:")
for t, y_t in enumerate(forward_states, start=1):
    print(f"  t={t}: mean abs dev from label {float((y_t - y0).abs().mean()):.3f}, "
          f"from input {float((y_t - x).abs().mean()):.3f}")

# reverse: image -> label, using the oracle prediction at every step
y = x.clone()
reverse_states = [y.clone()]
for t in [4, 3, 2, 1]:
    eps_star = y - y0
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    y = reverse_step(schedule, y, x, eps_star, t, noise)
    reverse_states.append(y.clone())
print(f"\noracle reverse chain: final deviation from the label "
      f"{float((y - y0).abs().max()):.2e} (exact up to float rounding)")

# the same thing through the packaged sampler
oracle = OraclePredictor(y0)
regenerated = sample_label(schedule, oracle, x, torch.Generator().manual_seed(1))
print(f"sample_label with the oracle: max deviation {float((regenerated - y0).abs().max()):.2e}, "
      f"{oracle.calls} predictor evaluations (T_s)")

rows = [
    torch.stack(forward_states).numpy(),
    torch.stack(reverse_states[1:]).numpy(),
]
grid = os.path.join(OUT, "bridge.png")
save_image_grid(grid, rows, ["forward t=1..4", "reverse t=3..0"], ds.data_range)
print(f"\nchain visualization written to {grid}")
