"""Orthogonal image-label codebooks.

Every class k owns a fixed "image label": a tensor with the same shape as the
inputs whose flattened form is one row of an orthonormal basis, rescaled into
the working pixel range.  Orthonormal rows are pairwise equidistant, so no
class is geometrically privileged over another, and a single global affine
rescale keeps that equidistance exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_MAGIC = b"LBCB"
_FORMAT_VERSION = 1

# smallest acceptable |R[k,k]| before the QR factor counts as rank deficient
_RANK_TOL = 1e-10
_MAX_REGEN_ATTEMPTS = 3


@dataclass
class LabelCodebook:
    """Container for one generated set of image labels.

    Attributes:
        num_classes: number of labels K.
        label_shape: per-label array shape, e.g. (3, 32, 32).
        data_range: (lo, hi) pixel range shared with the input images.
        seed: generation seed; regeneration with the same seed is
            bit-identical.
        basis: (K, D) float64 matrix with orthonormal rows, D = prod(shape).
        labels: (K, *label_shape) float64 labels, every value in [lo, hi].
    """

    num_classes: int
    label_shape: tuple
    data_range: tuple
    seed: int
    basis: np.ndarray
    labels: np.ndarray


def _draw_gaussian(rng, shape):
    # separated out so tests can force a rank-deficient draw
    return rng.standard_normal(shape)


def generate_codebook(num_classes, label_shape, data_range=(-1.0, 1.0), seed=0):
    """Build K orthogonal image labels.

    A (K, D) standard-normal matrix is drawn and its transpose QR-factored,
    giving K orthonormal directions in pixel space.  One global min-max map
    then sends the whole basis into ``data_range``; using a single map for
    all labels preserves the exact pairwise equidistance of the rows.

    Args:
        num_classes: K >= 1; must not exceed D = prod(label_shape).
        label_shape: shape of each label, matching the inputs.
        data_range: (lo, hi) with lo < hi.
        seed: RNG seed for the Gaussian draw.

    Returns:
        LabelCodebook.
    """
    label_shape = tuple(int(s) for s in label_shape)
    lo, hi = float(data_range[0]), float(data_range[1])
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if any(s <= 0 for s in label_shape):
        raise ValueError(f"label_shape entries must be positive, got {label_shape}")
    dim = int(np.prod(label_shape))
    if num_classes > dim:
        raise ValueError(
            f"cannot fit {num_classes} orthogonal labels in {dim} dimensions"
        )
    if not lo < hi:
        raise ValueError(f"data_range must satisfy lo < hi, got ({lo}, {hi})")

    basis = None
    for attempt in range(_MAX_REGEN_ATTEMPTS):
        rng = np.random.default_rng(seed + attempt * 1000003)
        raw = _draw_gaussian(rng, (num_classes, dim)).astype(np.float64)
        q, r = np.linalg.qr(raw.T)  # q: (D, K), orthonormal columns
        if np.min(np.abs(np.diag(r))) > _RANK_TOL:
            basis = q.T
            break
    if basis is None:
        raise RuntimeError(
            f"random matrix rank-deficient after {_MAX_REGEN_ATTEMPTS} attempts"
        )

    qmin, qmax = basis.min(), basis.max()
    labels = lo + (basis - qmin) * (hi - lo) / (qmax - qmin)
    return LabelCodebook(
        num_classes=num_classes,
        label_shape=label_shape,
        data_range=(lo, hi),
        seed=int(seed),
        basis=basis,
        # contiguous so reductions over a fresh codebook and a reloaded one
        # accumulate in the same order (bit-identical scores either way)
        labels=np.ascontiguousarray(labels.reshape((num_classes,) + label_shape)),
    )


def label_distances(sample, codebook):
    """L1 distance (summed over all entries) from a sample to every label.

    Args:
        sample: array of shape label_shape, or (B, *label_shape) for a batch.
        codebook: LabelCodebook.

    Returns:
        float64 vector of length K, or (B, K) for batched input.
    """
    sample = np.asarray(sample, dtype=np.float64)
    flat_labels = codebook.labels.reshape(codebook.num_classes, -1)
    if sample.shape == codebook.label_shape:
        return np.abs(sample.reshape(1, -1) - flat_labels).sum(axis=1)
    if sample.shape[1:] == codebook.label_shape:
        flat = sample.reshape(sample.shape[0], 1, -1)
        return np.abs(flat - flat_labels[None]).sum(axis=2)
    raise ValueError(
        f"sample shape {sample.shape} incompatible with labels {codebook.label_shape}"
    )


def nearest_label(sample, codebook):
    """Index of the closest label under summed L1; ties go to the lowest index."""
    d = label_distances(sample, codebook)
    return int(np.argmin(d)) if d.ndim == 1 else np.argmin(d, axis=1)


def save_codebook(codebook, path):
    """Write a codebook to a self-describing binary file.

    Layout: magic, version, JSON header (counts, shape, range, seed, dtypes),
    then the raw label and basis bytes.  The writer is fully deterministic:
    two saves of the same codebook produce identical files.
    """
    header = {
        "num_classes": codebook.num_classes,
        "label_shape": list(codebook.label_shape),
        "data_range": [codebook.data_range[0], codebook.data_range[1]],
        "seed": codebook.seed,
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(codebook.labels, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(codebook.basis, dtype="<f8").tobytes())


def load_codebook(path):
    """Inverse of save_codebook; validates magic, version, and payload size."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a codebook file (bad magic)")
    version = int.from_bytes(data[4:8], "little")
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported codebook format version {version}")
    hlen = int.from_bytes(data[8:12], "little")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    shape = tuple(header["label_shape"])
    k = header["num_classes"]
    dim = int(np.prod(shape))
    body = data[12 + hlen :]
    want = 2 * k * dim * 8
    if len(body) != want:
        raise ValueError(f"{path}: payload is {len(body)} bytes, expected {want}")
    labels = np.frombuffer(body[: k * dim * 8], dtype="<f8").reshape((k,) + shape)
    basis = np.frombuffer(body[k * dim * 8 :], dtype="<f8").reshape((k, dim))
    return LabelCodebook(
        num_classes=k,
        label_shape=shape,
        data_range=tuple(header["data_range"]),
        seed=header["seed"],
        basis=basis.copy(),
        labels=labels.copy(),
    )
