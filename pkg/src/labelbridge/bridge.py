"""Brownian-bridge diffusion math.

The forward process is a discrete Brownian bridge pinned at both ends: a
class's image label y0 at t=0 and the input image x at t=T.  The marginal is

    y_t = (1 - m_t) * y0 + m_t * x + sqrt(delta_t) * eps,

with interpolation weights m_t = t/T and variance delta_t = 2*s*m_t*(1-m_t),
so the noise vanishes at both endpoints.  A small network eps_model(y_t, t)
regresses the combined drift-plus-noise term m_t*(x - y0) + sqrt(delta_t)*eps,
which is identically y_t - y0; running the reverse chain from y_T = x then
walks the input back onto its class label.

Everything here is a pure function of its arguments plus an explicit RNG.
Scalar-coefficient ops accept numpy arrays or torch tensors; the sampling and
loss ops are torch (they must stay differentiable for training and for
white-box attacks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .codebook import LabelCodebook, label_distances


@dataclass
class BridgeSchedule:
    """Per-timestep tables for one bridge process.

    Tables are indexed by t in 0..num_steps; entries that are undefined for a
    given t are NaN on purpose so accidental use fails loudly.  gamma and
    delta_cond are defined for t = 1..T, the reverse coefficients c_x, c_y,
    c_eps and post_var for the interior steps t = 1..T-1.
    """

    num_steps: int
    s_max: float
    m: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    delta_cond: np.ndarray
    c_x: np.ndarray
    c_y: np.ndarray
    c_eps: np.ndarray
    post_var: np.ndarray


def build_schedule(num_steps=4, s_max=1.0):
    """Build the schedule m_t = t/T, delta_t = 2*s_max*m_t*(1-m_t).

    This family makes the reverse-mean coefficients degenerate in a useful
    way: c_x = 0 and c_y = 1 exactly at every interior step, which the tests
    assert.  num_steps >= 2 because the t=T step is special-cased and at
    least one interior step must remain.
    """
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    if s_max <= 0:
        raise ValueError(f"s_max must be positive, got {s_max}")
    big_t = int(num_steps)
    m = np.arange(big_t + 1, dtype=np.float64) / big_t
    delta = 2.0 * float(s_max) * m * (1.0 - m)

    gamma = np.full(big_t + 1, np.nan)
    delta_cond = np.full(big_t + 1, np.nan)
    gamma[1:] = (1.0 - m[1:]) / (1.0 - m[:-1])
    delta_cond[1:] = delta[1:] - gamma[1:] ** 2 * delta[:-1]

    c_x = np.full(big_t + 1, np.nan)
    c_y = np.full(big_t + 1, np.nan)
    c_eps = np.full(big_t + 1, np.nan)
    post_var = np.full(big_t + 1, np.nan)
    i = np.arange(1, big_t)  # interior steps; delta[i] > 0 there
    ratio = delta[i - 1] / delta[i]
    c_x[i] = m[i - 1] - m[i] * gamma[i] * ratio
    c_y[i] = gamma[i] * ratio + (1.0 - m[i - 1]) * delta_cond[i] / delta[i]
    c_eps[i] = -(1.0 - m[i - 1]) * delta_cond[i] / delta[i]
    post_var[i] = delta_cond[i] * ratio

    return BridgeSchedule(
        num_steps=big_t,
        s_max=float(s_max),
        m=m,
        delta=delta,
        gamma=gamma,
        delta_cond=delta_cond,
        c_x=c_x,
        c_y=c_y,
        c_eps=c_eps,
        post_var=post_var,
    )


def _check_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_t(t, lowest, highest, what):
    if isinstance(t, (int, np.integer)):
        if not lowest <= int(t) <= highest:
            raise ValueError(f"{what}: t={t} outside [{lowest}, {highest}]")
        return
    arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    if arr.size == 0 or arr.min() < lowest or arr.max() > highest:
        raise ValueError(f"{what}: timesteps outside [{lowest}, {highest}]")


def _coeff(table, t, like, offset=0):
    """Schedule coefficient at t+offset: a python float for scalar t, else a
    per-sample column broadcastable against `like`."""
    if isinstance(t, (int, np.integer)):
        return float(table[int(t) + offset])
    shape = (-1,) + (1,) * (like.ndim - 1)
    if torch.is_tensor(like):
        tab = torch.as_tensor(table, dtype=like.dtype, device=like.device)
        idx = torch.as_tensor(t, dtype=torch.long, device=like.device) + offset
        return tab[idx].reshape(shape)
    return np.asarray(table, dtype=like.dtype)[np.asarray(t) + offset].reshape(shape)


def _sqrt_coeff(table, t, like, offset=0):
    c = _coeff(table, t, like, offset)
    return math.sqrt(c) if isinstance(c, float) else c**0.5


def forward_marginal(schedule, y0, x, t, noise):
    """y_t = (1-m_t)*y0 + m_t*x + sqrt(delta_t)*noise, for 1 <= t <= T.

    t may be a scalar or a per-sample vector matching the batch dimension.
    At t = T this returns x bit-exactly (m_T = 1, delta_T = 0).
    """
    _check_shape(y0, x, "forward_marginal")
    _check_shape(noise, x, "forward_marginal")
    _check_t(t, 1, schedule.num_steps, "forward_marginal")
    m_t = _coeff(schedule.m, t, x)
    sd = _sqrt_coeff(schedule.delta, t, x)
    return (1.0 - m_t) * y0 + m_t * x + sd * noise


def forward_transition(schedule, y_prev, x, t, noise):
    """One forward step y_{t-1} -> y_t, for 2 <= t <= T.

    Mean gamma_t*y_{t-1} + (m_t - gamma_t*m_{t-1})*x, variance
    delta_{t|t-1} = delta_t - gamma_t^2*delta_{t-1}.  Composing the marginal
    at t-1 with this transition reproduces the marginal at t in both mean and
    variance; the tests assert those identities.  t=1 is excluded: from t=0
    the transition IS the marginal.
    """
    _check_shape(y_prev, x, "forward_transition")
    _check_shape(noise, x, "forward_transition")
    _check_t(t, 2, schedule.num_steps, "forward_transition")
    g = _coeff(schedule.gamma, t, x)
    m_t = _coeff(schedule.m, t, x)
    m_prev = _coeff(schedule.m, t, x, offset=-1)
    sd = _sqrt_coeff(schedule.delta_cond, t, x)
    return g * y_prev + (m_t - g * m_prev) * x + sd * noise


def true_posterior_mean(schedule, y_t, y0, x, t):
    """Posterior mean of y_{t-1} given (y_t, y0, x) at interior steps.

    mean = (delta_{t-1}/delta_t)*gamma_t*y_t
         + (1-m_{t-1})*(delta_{t|t-1}/delta_t)*y0
         + (m_{t-1} - m_t*gamma_t*delta_{t-1}/delta_t)*x

    Valid for 2 <= t <= T-1; reverse_step handles t=1 and t=T.  This is the
    y0-form reference against which the coefficient-form reverse step is
    tested.
    """
    _check_shape(y_t, x, "true_posterior_mean")
    _check_shape(y0, x, "true_posterior_mean")
    _check_t(t, 2, schedule.num_steps - 1, "true_posterior_mean")
    g = _coeff(schedule.gamma, t, x)
    m_t = _coeff(schedule.m, t, x)
    m_prev = _coeff(schedule.m, t, x, offset=-1)
    d_t = _coeff(schedule.delta, t, x)
    d_prev = _coeff(schedule.delta, t, x, offset=-1)
    d_cond = _coeff(schedule.delta_cond, t, x)
    ratio = d_prev / d_t
    return ratio * g * y_t + (1.0 - m_prev) * (d_cond / d_t) * y0 + (m_prev - m_t * g * ratio) * x


def predict_y0_onestep(schedule, y_t, eps_pred, t):
    """One-step label estimate y0_hat = y_t - eps_pred.

    The regression target m_t*(x - y0) + sqrt(delta_t)*eps is identically
    y_t - y0, so subtracting the prediction from y_t estimates y0 directly at
    any timestep.
    """
    _check_shape(y_t, eps_pred, "predict_y0_onestep")
    _check_t(t, 1, schedule.num_steps, "predict_y0_onestep")
    return y_t - eps_pred


def reverse_step(schedule, y_t, x, eps_pred, t, noise):
    """One reverse step y_t -> y_{t-1}; t is a scalar in 1..T.

    Interior steps use the coefficient form
        c_x*x + c_y*y_t + c_eps*eps_pred + sqrt(post_var)*noise,
    which is noiseless at t=1 because post_var[1] = 0 exactly.  At t=T the
    coefficient form is 0/0 (delta_T = 0), so the step instead samples the
    degenerate posterior given the one-step estimate y0_hat = x - eps_pred:
    mean (1-m_{T-1})*y0_hat + m_{T-1}*x, variance delta_{T-1}.  That rule is
    limit-consistent: with an exact prediction it reproduces the forward
    marginal at T-1.
    """
    _check_shape(y_t, x, "reverse_step")
    _check_shape(eps_pred, x, "reverse_step")
    _check_shape(noise, x, "reverse_step")
    if not isinstance(t, (int, np.integer)):
        raise TypeError("reverse_step takes a scalar t; the chain shares one t per step")
    t = int(t)
    _check_t(t, 1, schedule.num_steps, "reverse_step")
    if t == schedule.num_steps:
        y0_hat = x - eps_pred
        m_prev = float(schedule.m[t - 1])
        sd = math.sqrt(float(schedule.delta[t - 1]))
        return (1.0 - m_prev) * y0_hat + m_prev * x + sd * noise
    cx = float(schedule.c_x[t])
    cy = float(schedule.c_y[t])
    ce = float(schedule.c_eps[t])
    sd = math.sqrt(float(schedule.post_var[t]))
    return cx * x + cy * y_t + ce * eps_pred + sd * noise


def sample_label(schedule, predictor, x, rng):
    """Run the full reverse chain from y_T = x down to a label estimate.

    Fresh noise is drawn at t = T..2 and none at t = 1, so the chain makes
    exactly T predictor evaluations and is deterministic given the generator
    state.  Gradients flow through the whole chain (noise draws are
    constants), which is what white-box attacks differentiate.

    x may be (C,H,W) or batched (B,C,H,W).
    """
    from .predictor import predict_eps

    squeeze = x.ndim == 3
    y = x[None] if squeeze else x
    xb = y
    for t in range(schedule.num_steps, 0, -1):
        eps_pred = predict_eps(predictor, y, t)
        if t == 1:
            noise = torch.zeros_like(y)
        else:
            noise = torch.randn(y.shape, generator=rng, dtype=y.dtype, device=y.device)
        y = reverse_step(schedule, y, xb, eps_pred, t, noise)
    return y[0] if squeeze else y


def intra_target(schedule, x, y0_i, t, eps):
    """Same-class regression target m_t*(x - y0_i) + sqrt(delta_t)*eps.

    Identically equals forward_marginal(y0_i, x, t, eps) - y0_i.  The
    intra-class loss is the mean-per-element L1 distance between this target
    and the prediction (means, not sums, so the loss scale is resolution
    independent).
    """
    _check_shape(y0_i, x, "intra_target")
    _check_shape(eps, x, "intra_target")
    _check_t(t, 1, schedule.num_steps, "intra_target")
    m_t = _coeff(schedule.m, t, x)
    sd = _sqrt_coeff(schedule.delta, t, x)
    return m_t * (x - y0_i) + sd * eps


def inter_target(schedule, x, y0_i, y0_j, t, eps):
    """Wrong-class target m_t*(x - y0_j) + m_{t-1}*(y0_j - y0_i) + sqrt(delta_t)*eps.

    The inter-class loss is the NEGATED L1 distance to the prediction: the
    model is pushed away from generating the confusing class j.  With j = i
    this reduces exactly to intra_target, so loss_inter = -loss_intra there.
    """
    _check_shape(y0_i, x, "inter_target")
    _check_shape(y0_j, x, "inter_target")
    _check_shape(eps, x, "inter_target")
    _check_t(t, 1, schedule.num_steps, "inter_target")
    m_t = _coeff(schedule.m, t, x)
    m_prev = _coeff(schedule.m, t, x, offset=-1)
    sd = _sqrt_coeff(schedule.delta, t, x)
    return m_t * (x - y0_j) + m_prev * (y0_j - y0_i) + sd * eps


def confusing_class(y0_estimate, codebook, true_class):
    """Nearest wrong label: argmin over j != true_class of summed-L1 distance.

    Accepts a single estimate or a batch (with a vector true_class).  The
    selection is evaluated in numpy (first-minimum tie break, no gradients);
    callers that need gradients must treat the returned index as a constant.
    """
    if codebook.num_classes < 2:
        raise ValueError("confusing_class needs K >= 2; no wrong label exists for K = 1")
    est = y0_estimate.detach().cpu().numpy() if torch.is_tensor(y0_estimate) else y0_estimate
    d = label_distances(est, codebook)
    if d.ndim == 1:
        d = d.copy()
        d[int(true_class)] = np.inf
        return int(np.argmin(d))
    d = d.copy()
    d[np.arange(d.shape[0]), np.asarray(true_class)] = np.inf
    return np.argmin(d, axis=1)


def classification_loss_terms(schedule, predictor, x, classes, codebook, rng, inter_hinge=0.0):
    """One training step's loss pieces for a batch.

    Draw protocol (fixed, part of the contract so runs are reproducible):
    first per-sample timesteps t ~ uniform{1..T} from `rng`, then one
    standard-normal eps of the batch shape.  A single predictor call serves
    both loss terms; the confusing class comes from the detached one-step
    estimate, so no gradient flows through the argmin.

    inter_hinge > 0 caps the push-away term at that many L1-per-element
    units (stability experiments); 0 leaves it unclamped.

    Returns (loss_intra, loss_inter, margin) where margin is the batch mean
    of d_confusing - d_true measured on the one-step estimate (summed L1),
    reported for monitoring.  loss_inter is None when the codebook has a
    single class.
    """
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("classification_loss expects a nonempty (B,C,H,W) batch")
    big_t = schedule.num_steps
    t = torch.randint(1, big_t + 1, (x.shape[0],), generator=rng, device=x.device)
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    labels = torch.as_tensor(codebook.labels, dtype=x.dtype, device=x.device)
    classes = torch.as_tensor(classes, dtype=torch.long, device=x.device)
    y0 = labels[classes]

    from .predictor import predict_eps

    y_t = forward_marginal(schedule, y0, x, t, eps)
    eps_pred = predict_eps(predictor, y_t, t)
    target_i = intra_target(schedule, x, y0, t, eps)
    loss_intra = (target_i - eps_pred).abs().mean()

    if codebook.num_classes < 2:
        return loss_intra, None, float("nan")

    with torch.no_grad():
        y0_hat = predict_y0_onestep(schedule, y_t, eps_pred, t)
        j = confusing_class(y0_hat, codebook, classes.cpu().numpy())
        flat = y0_hat.reshape(y0_hat.shape[0], -1)
        flat_labels = labels.reshape(labels.shape[0], -1)
        d_true = (flat - flat_labels[classes]).abs().sum(dim=1)
        d_conf = (flat - flat_labels[torch.as_tensor(j)]).abs().sum(dim=1)
        margin = float((d_conf - d_true).mean())

    target_j = inter_target(schedule, x, y0, labels[torch.as_tensor(j)], t, eps)
    raw_inter = (target_j - eps_pred).abs().mean()
    if inter_hinge and inter_hinge > 0:
        raw_inter = raw_inter.clamp(max=inter_hinge)
    loss_inter = -raw_inter
    return loss_intra, loss_inter, margin


def classification_loss(schedule, predictor, batch, codebook, alpha, rng, inter_hinge=0.0):
    """Total training loss loss_intra + alpha*loss_inter for a batch.

    batch is (x, classes).  alpha >= 0; alpha < 1 keeps the objective bounded
    below (the intra pull dominates the inter push far from both targets).
    Differentiable w.r.t. the predictor parameters.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x, classes = batch
    loss_intra, loss_inter, _ = classification_loss_terms(
        schedule, predictor, x, classes, codebook, rng, inter_hinge=inter_hinge
    )
    if loss_inter is None:
        return loss_intra
    return loss_intra + alpha * loss_inter
