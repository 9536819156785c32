"""End-to-end inference: translate an input onto the label manifold, then
pick the nearest class label.

Classification runs the full reverse chain (sample_label) and takes the
argmin of summed-L1 distances to the codebook.  soft_logits exposes the
differentiable surface that white-box attacks target: a softmax over
negated, tau-scaled distances, with the chain's noise draws held fixed per
call so the map x -> logits is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .bridge import BridgeSchedule, sample_label
from .codebook import LabelCodebook, nearest_label


@dataclass
class ClassifierBundle:
    schedule: BridgeSchedule
    predictor: object
    codebook: LabelCodebook
    tau: float = 0.1
    eot_samples: int = 20

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        cfg = getattr(self.predictor, "config", None)
        if cfg is not None:
            shape = (cfg.in_channels, cfg.base_resolution, cfg.base_resolution)
            if shape != tuple(self.codebook.label_shape):
                raise ValueError(
                    f"predictor expects {shape} but codebook labels are "
                    f"{tuple(self.codebook.label_shape)}"
                )

    def labels_like(self, x):
        return torch.as_tensor(self.codebook.labels, dtype=x.dtype, device=x.device)


def classify(bundle, x, rng):
    """Predict the class of one sample (or a batch) with a single chain draw.

    Exactly T_s predictor evaluations per call; deterministic given the
    generator state.  Returns an int for (C,H,W) input, an int array for
    (B,C,H,W).
    """
    x = torch.as_tensor(x)
    with torch.no_grad():
        y0_hat = sample_label(bundle.schedule, bundle.predictor, x, rng)
    return nearest_label(y0_hat.cpu().numpy(), bundle.codebook)


def scores_of_estimate(bundle, y0_hat):
    """Scores -tau * d for an already-computed label estimate."""
    labels = bundle.labels_like(y0_hat)
    flat_labels = labels.reshape(labels.shape[0], -1)
    if y0_hat.ndim == 3:
        d = (y0_hat.reshape(1, -1) - flat_labels).abs().sum(dim=1)
    else:
        d = (y0_hat.reshape(y0_hat.shape[0], 1, -1) - flat_labels[None]).abs().sum(dim=2)
    return -bundle.tau * d


def label_scores(bundle, x, rng):
    """Pre-softmax scores -tau * d where d are summed-L1 label distances.

    Differentiable w.r.t. x through the whole chain; noise draws are treated
    as constants.  Shape (K,) for a single sample, (B,K) for a batch.
    """
    y0_hat = sample_label(bundle.schedule, bundle.predictor, x, rng)
    return scores_of_estimate(bundle, y0_hat)


def soft_logits(bundle, x, rng):
    """Probability vector softmax(-tau * d); argmax equals argmin distance."""
    return torch.softmax(label_scores(bundle, x, rng), dim=-1)


def classify_votes(bundle, x, n, rng):
    """n independent chain draws for one sample: (winner, vote counts).

    The winner is the majority vote with ties broken toward the lower class
    index.  agreement = votes.max()/n is the stability of the stochastic
    prediction.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 votes, got {n}")
    votes = np.zeros(bundle.codebook.num_classes, dtype=np.int64)
    for _ in range(n):
        votes[classify(bundle, x, rng)] += 1
    return int(np.argmax(votes)), votes


def classify_eot(bundle, x, n, rng):
    """Majority-vote class over n stochastic predictions (ties break low)."""
    winner, _ = classify_votes(bundle, x, n, rng)
    return winner


def predict_batch(bundle, xs, rng, batch_size=64):
    """Single-draw predictions for an array of samples; returns int64 array."""
    xs = torch.as_tensor(np.asarray(xs))
    out = []
    for i in range(0, xs.shape[0], batch_size):
        out.append(np.atleast_1d(classify(bundle, xs[i : i + batch_size], rng)))
    return np.concatenate(out)


def margin_statistic(bundle, xs, ys, rng, batch_size=64):
    """Mean of (nearest-wrong-label distance - true-label distance).

    Distances are summed L1 from the full-chain estimate; positive margins
    mean generations land closer to the true label than to any other.
    """
    xs = torch.as_tensor(np.asarray(xs))
    ys = np.asarray(ys)
    margins = []
    with torch.no_grad():
        for i in range(0, xs.shape[0], batch_size):
            xb = xs[i : i + batch_size]
            yb = ys[i : i + batch_size]
            y0_hat = sample_label(bundle.schedule, bundle.predictor, xb, rng)
            labels = bundle.labels_like(xb).reshape(bundle.codebook.num_classes, -1)
            d = (y0_hat.reshape(xb.shape[0], 1, -1) - labels[None]).abs().sum(dim=2)
            d = d.cpu().numpy()
            d_true = d[np.arange(len(yb)), yb]
            d_masked = d.copy()
            d_masked[np.arange(len(yb)), yb] = np.inf
            margins.append(d_masked.min(axis=1) - d_true)
    return float(np.concatenate(margins).mean())
