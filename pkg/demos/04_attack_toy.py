"""White-box attacks against the trained toy classifier.

Loads the checkpoint written by 03_train_toy.py (run that first) and attacks
64 held-out samples with FGSM and 20-step PGD at epsilon = 8/255.  Because
classification is nearest-label over the diffusion output, gradients flow
through the full sampler; no surrogate needed.

Run:  python3 demos/04_attack_toy.py
"""

import os
import sys

import torch

from labelbridge import (
    AttackConfig,
    bundle_from_checkpoint,
    craft_adversarial,
    evaluate_robustness,
    load_checkpoint,
)
from labelbridge.data import load_dataset
from labelbridge.report import save_image_grid

OUT = os.path.join(os.path.dirname(__file__), "out")
checkpoint_path = os.path.join(OUT, "toy-run", "checkpoint.pt")
if not os.path.exists(checkpoint_path):
    sys.exit("no checkpoint at demos/out/toy-run/; run demos/03_train_toy.py first")

checkpoint = load_checkpoint(checkpoint_path)
bundle = bundle_from_checkpoint(checkpoint)
ds = load_dataset(checkpoint.config.data)
xs, ys = ds.test_x[:64], ds.test_y[:64]
print(f"attacking {len(ys)} test samples from {checkpoint.config.data.name} "
      f"(checkpoint step {checkpoint.step})")

for family in ("fgsm", "pgd"):
    config = AttackConfig(family=family, epsilon=8 / 255)
    r = config.resolved()
    report = evaluate_robustness(bundle, (xs, ys), config, torch.Generator().manual_seed(0))
    worst = max(rec["linf_pixel"] for rec in report.records)
    print(f"{family:<5}  steps={r.steps:<3d} clean {report.clean_accuracy:.3f} -> "
          f"robust {report.robust_accuracy:.3f}   worst linf {worst * 255:.2f}/255")

# gallery: original, adversarial, and the (amplified) difference
config = AttackConfig(family="pgd", epsilon=8 / 255)
x_show = torch.as_tensor(ds.test_x[:8])
x_adv = craft_adversarial(bundle, x_show, ds.test_y[:8], config, torch.Generator().manual_seed(0))
delta = (x_adv - x_show) * 10
grid = os.path.join(OUT, "attack.png")
save_image_grid(
    grid,
    [x_show.numpy(), x_adv.numpy(), delta.numpy()],
    ["clean", "pgd 8/255", "delta x10"],
    bundle.codebook.data_range,
)
print(f"adversarial gallery written to {grid}")
