"""White-box attacks and the robustness evaluation protocol.

All attacks maximize a loss inside an L-inf ball of radius epsilon around
the input and clip to the data range after every step.  Budgets and step
sizes are given in [0,1] pixel units and scaled by the data-range width
internally, so the usual 8/255 reads the same regardless of normalization.

Gradient access comes in two modes: "exact" differentiates through the full
reverse chain (noise draws fixed per evaluation), "bpda" runs the stochastic
chain forward but treats the sampler as the identity in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .bridge import sample_label
from .classifier import classify, label_scores, scores_of_estimate

FAMILIES = ("fgsm", "pgd", "mifgsm", "cw_margin", "pgd_eot", "bpda_eot")

# per-family defaults: iteration count, step size (pixel units), random start
_DEFAULT_STEPS = {
    "fgsm": 1,
    "pgd": 20,
    "mifgsm": 5,
    "cw_margin": 1000,
    "pgd_eot": 200,
    "bpda_eot": 200,
}
_DEFAULT_RANDOM_START = {
    "fgsm": False,
    "pgd": True,
    "mifgsm": False,
    "cw_margin": False,
    "pgd_eot": True,
    "bpda_eot": True,
}


@dataclass
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 0  # 0 means the family default
    step_size: float = 0.0  # 0 means the family default
    eot_samples: int = 20
    momentum_decay: float = 1.0
    random_start: bool | None = None
    seed: int = 0

    def resolved(self):
        """Fill family defaults and validate; returns a new complete config."""
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; choose from {FAMILIES}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.eot_samples < 1:
            raise ValueError(f"eot_samples must be >= 1, got {self.eot_samples}")
        steps = self.steps if self.steps else _DEFAULT_STEPS[self.family]
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        step_size = self.step_size
        if not step_size:
            if self.family == "fgsm":
                step_size = self.epsilon
            elif self.family == "mifgsm":
                step_size = self.epsilon / steps
            elif self.family == "cw_margin":
                step_size = 0.01
            else:
                step_size = 2 / 255
        if step_size <= 0 and self.epsilon > 0 and self.family != "fgsm":
            raise ValueError("step_size must be positive for iterative attacks")
        random_start = self.random_start
        if random_start is None:
            random_start = _DEFAULT_RANDOM_START[self.family]
        return AttackConfig(
            family=self.family,
            epsilon=self.epsilon,
            steps=steps,
            step_size=step_size,
            eot_samples=self.eot_samples,
            momentum_decay=self.momentum_decay,
            random_start=random_start,
            seed=self.seed,
        )


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: float
    n_samples: int
    records: list
    attack_config: dict
    predictor_eval_count: int
    seeds: dict

    def as_dict(self):
        return asdict(self)


def _attack_loss(bundle, x, true_class, loss_kind, mode, rng):
    """Summed-over-batch attack objective (to be ASCENDED).

    ce: cross-entropy of the soft logits at the true class.
    margin: (best wrong score - true score), the margin the attack wants
    positive.  Sum reduction keeps per-sample gradients independent of the
    batch they ride in.
    """
    if mode == "exact":
        scores = label_scores(bundle, x, rng)
    elif mode == "bpda":
        with torch.no_grad():
            y0_hat = sample_label(bundle.schedule, bundle.predictor, x, rng)
        surrogate = x + (y0_hat - x).detach()  # identity jacobian through the sampler
        scores = scores_of_estimate(bundle, surrogate)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    if scores.ndim == 1:
        scores = scores[None]
    if loss_kind == "ce":
        return F.cross_entropy(scores, true_class, reduction="sum")
    masked = scores.scatter(1, true_class[:, None], float("-inf"))
    best_wrong = masked.max(dim=1).values
    true_score = scores.gather(1, true_class[:, None]).squeeze(1)
    return (best_wrong - true_score).sum()


def _loss_gradient(bundle, x, true_class, loss_kind, mode, n_eot, rng):
    leaf = x.detach().clone().requires_grad_(True)
    total = torch.zeros_like(leaf)
    for _ in range(n_eot):
        loss = _attack_loss(bundle, leaf, true_class, loss_kind, mode, rng)
        (grad,) = torch.autograd.grad(loss, leaf)
        total = total + grad
    grad = total / n_eot
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise RuntimeError(
            f"non-finite attack gradient ({bad} entries; mode={mode}, loss={loss_kind})"
        )
    return grad


def estimate_gradient(bundle, x, true_class, mode="exact", n_eot=1, rng=None):
    """Average over n_eot independent-noise gradients of the classification
    cross-entropy w.r.t. x.

    mode "exact" differentiates through all reverse steps; "bpda" substitutes
    the identity for the sampler in the backward pass.  Errors on non-finite
    gradients rather than silently corrupting an attack.
    """
    if n_eot < 1:
        raise ValueError(f"n_eot must be >= 1, got {n_eot}")
    if rng is None:
        rng = torch.Generator(device="cpu")
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    tc = torch.as_tensor(np.atleast_1d(np.asarray(true_class)), dtype=torch.long)
    grad = _loss_gradient(bundle, xb, tc, "ce", mode, n_eot, rng)
    return grad[0] if squeeze else grad


def craft_adversarial(bundle, x, true_class, attack_config, rng):
    """Run one attack family; returns x_adv with the exact projection
    ||x_adv - x||_inf <= epsilon (data units) and range clipping applied.

    fgsm is literally pgd with steps=1, step_size=epsilon, and no random
    start, so the two agree bit-for-bit under those settings.  Deterministic
    given the generator state.
    """
    cfg = attack_config.resolved()
    squeeze = x.ndim == 3
    xb = (x[None] if squeeze else x).detach()
    tc = torch.as_tensor(np.atleast_1d(np.asarray(true_class)), dtype=torch.long)
    lo, hi = bundle.codebook.data_range
    width = hi - lo
    eps = cfg.epsilon * width
    step = cfg.step_size * width

    if eps == 0:
        out = xb.clone()
        return out[0] if squeeze else out

    # projecting to exactly eps then adding back to x rounds the realized
    # perturbation up by ~1 ulp of x; shrink the radius past that so the
    # measured norm never exceeds the budget
    eps_proj = max(0.0, eps - 2 * width * torch.finfo(xb.dtype).eps)

    x_adv = xb.clone()
    if cfg.random_start:
        start = torch.empty_like(xb).uniform_(-eps, eps, generator=rng)
        x_adv = torch.clamp(xb + start, lo, hi)

    loss_kind = "margin" if cfg.family == "cw_margin" else "ce"
    mode = "bpda" if cfg.family == "bpda_eot" else "exact"
    n_eot = cfg.eot_samples if cfg.family in ("pgd_eot", "bpda_eot") else 1

    momentum = torch.zeros_like(xb)
    for _ in range(cfg.steps):
        grad = _loss_gradient(bundle, x_adv, tc, loss_kind, mode, n_eot, rng)
        if cfg.family == "mifgsm":
            flat_dims = tuple(range(1, grad.ndim))
            norm = grad.abs().mean(dim=flat_dims, keepdim=True).clamp(min=1e-12)
            momentum = cfg.momentum_decay * momentum + grad / norm
            direction = momentum.sign()
        else:
            direction = grad.sign()
        x_adv = x_adv + step * direction
        x_adv = xb + torch.clamp(x_adv - xb, -eps_proj, eps_proj)
        x_adv = torch.clamp(x_adv, lo, hi)
    x_adv = x_adv.detach()
    return x_adv[0] if squeeze else x_adv


def evaluate_robustness(bundle, dataset, attack_config, rng, batch_size=64):
    """Clean and robust accuracy under the pessimistic convention: a sample
    already misclassified clean counts as successfully attacked, so
    robust_accuracy <= clean_accuracy by construction.

    dataset is (inputs, integer labels).  Per-sample records carry the true
    class, both predictions, and the perturbation norm in pixel units.
    Deterministic given the generator state and batch size.
    """
    xs, ys = dataset
    xs = torch.as_tensor(np.asarray(xs))
    ys = np.asarray(ys)
    if xs.shape[0] == 0:
        raise ValueError("evaluate_robustness needs a nonempty dataset")
    lo, hi = bundle.codebook.data_range
    width = hi - lo
    calls_before = getattr(bundle.predictor, "calls", 0)

    records = []
    clean_ok = 0
    robust_ok = 0
    for i in range(0, xs.shape[0], batch_size):
        xb = xs[i : i + batch_size]
        yb = ys[i : i + batch_size]
        clean_pred = np.atleast_1d(classify(bundle, xb, rng))
        x_adv = craft_adversarial(bundle, xb, yb, attack_config, rng)
        adv_pred = np.atleast_1d(classify(bundle, x_adv, rng))
        flat_dims = tuple(range(1, xb.ndim))
        norms = (x_adv - xb).abs().amax(dim=flat_dims).cpu().numpy() / width
        for k in range(len(yb)):
            ok_clean = bool(clean_pred[k] == yb[k])
            ok_robust = ok_clean and bool(adv_pred[k] == yb[k])
            clean_ok += ok_clean
            robust_ok += ok_robust
            records.append(
                {
                    "index": i + k,
                    "true_class": int(yb[k]),
                    "clean_pred": int(clean_pred[k]),
                    "adv_pred": int(adv_pred[k]),
                    "linf_pixel": float(norms[k]),
                }
            )

    n = xs.shape[0]
    return EvalReport(
        clean_accuracy=clean_ok / n,
        robust_accuracy=robust_ok / n,
        n_samples=n,
        records=records,
        attack_config=asdict(attack_config.resolved()),
        predictor_eval_count=getattr(bundle.predictor, "calls", 0) - calls_before,
        seeds={"attack_seed": attack_config.seed, "rng_initial_seed": int(rng.initial_seed())},
    )
