"""Generate an orthogonal image-label codebook and inspect its geometry.

Each class gets a fixed image-shaped "label".  The rows come from a QR
factorization of a Gaussian matrix, so they are exactly orthonormal before
the affine rescale into the data range, which means every pair of labels
sits at the same L2 distance and classification never hinges on which
wrong class is "closer".

Run:  python3 demos/01_orthogonal_labels.py
"""

import os

import numpy as np

from labelbridge import generate_codebook, label_distances, save_codebook
from labelbridge.report import save_image_grid

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

codebook = generate_codebook(num_classes=6, label_shape=(3, 16, 16), data_range=(-1.0, 1.0), seed=0)
flat = codebook.basis  # the orthonormal rows, before rescaling

print(f"{codebook.num_classes} labels of shape {codebook.label_shape}")
gram = flat @ flat.T
print(f"max |G - I| over the Gram matrix: {np.abs(gram - np.eye(6)).max():.2e}")

# pairwise L2 distances are all sqrt(2) for orthonormal rows
pair = np.linalg.norm(flat[:, None] - flat[None], axis=2)
off = pair[~np.eye(6, dtype=bool)]
print(f"pairwise L2 spread: min {off.min():.12f}, max {off.max():.12f} (sqrt(2) = {np.sqrt(2):.12f})")

print(f"label value range: [{codebook.labels.min():.3f}, {codebook.labels.max():.3f}]")

# a random probe is far from every label; a label is at distance ~0 from itself
rng = np.random.default_rng(1)
probe = rng.uniform(-1, 1, size=codebook.label_shape)
print("\nsummed-L1 distances from a random probe:")
print("  ", np.round(label_distances(probe, codebook), 1))
print("distances from label 3 itself:")
print("  ", np.round(label_distances(codebook.labels[3], codebook), 1))

path = os.path.join(OUT, "labels.bin")
save_codebook(codebook, path)
print(f"\nexported to {path} ({os.path.getsize(path)} bytes, versioned header)")

grid = os.path.join(OUT, "labels.png")
save_image_grid(grid, [codebook.labels], ["image label"], codebook.data_range)
print(f"label gallery written to {grid}")
