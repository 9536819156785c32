"""Training loop, checkpoint container, and exact-resume machinery.

A run is reproducible end to end on one device: parameter init is seeded,
batch indices come from a serialized numpy generator, and all noise draws
come from a serialized torch generator.  Checkpoints capture every piece of
that state, so resuming at step n replays the identical trajectory.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import __version__
from .bridge import BridgeSchedule, build_schedule, classification_loss_terms
from .codebook import LabelCodebook, generate_codebook
from .data import DataConfig, load_dataset
from .predictor import PredictorConfig, build_predictor

CHECKPOINT_MAGIC = "labelbridge.checkpoint"
CHECKPOINT_VERSION = 1


def _toy_predictor():
    return PredictorConfig(
        model_channels=16,
        channel_multipliers=(1, 2),
        res_blocks=1,
        in_channels=3,
        out_channels=3,
        base_resolution=16,
    )


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    predictor: PredictorConfig = field(default_factory=_toy_predictor)
    num_steps: int = 4
    s_max: float = 1.0
    batch_size: int = 64
    learning_rate: float = 1e-4
    train_steps: int = 2000
    alpha: float = 0.2
    alpha_schedule: str = "constant"  # "constant" or "linear"
    alpha_range: tuple = (0.0, 0.2)  # used when alpha_schedule == "linear"
    inter_hinge: float = 0.0  # > 0 caps the push-away loss term; 0 = unclamped
    tau: float = 0.1
    seed: int = 0
    codebook_seed: int = 0
    ema_decay: float = 0.0  # 0 disables EMA
    augment: bool = False  # horizontal flips
    checkpoint_every: int = 0  # 0: only the final checkpoint
    log_every: int = 25
    out_dir: str | None = None

    def validate(self):
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")
        if self.batch_size < 1 or self.train_steps < 1:
            raise ValueError("batch_size and train_steps must be >= 1")
        if self.learning_rate <= 0 or self.s_max <= 0 or self.tau <= 0:
            raise ValueError("learning_rate, s_max, and tau must be positive")
        if self.alpha < 0 or any(a < 0 for a in self.alpha_range):
            raise ValueError("alpha values must be >= 0")
        if self.inter_hinge < 0:
            raise ValueError("inter_hinge must be >= 0")
        if self.alpha_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown alpha_schedule {self.alpha_schedule!r}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")


def alpha_at(config, step):
    """Inter-loss weight at a given step (linear ramp or constant)."""
    if config.alpha_schedule == "constant":
        return float(config.alpha)
    a1, a2 = config.alpha_range
    progress = step / max(1, config.train_steps - 1)
    return float(a1 + (a2 - a1) * progress)


def config_hash(config):
    """Stable hash of a TrainConfig; tuples and dataclasses canonicalize."""
    blob = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _derive_seed(seed, tag):
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    config_hash: str
    step: int
    model_state: dict
    optimizer_state: dict
    ema_state: dict | None
    schedule: BridgeSchedule
    codebook: LabelCodebook
    torch_rng_state: torch.Tensor
    data_rng_state: dict
    code_version: str


def save_checkpoint(ckpt, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({"magic": CHECKPOINT_MAGIC, "version": ckpt.version, "state": ckpt}, path)


def load_checkpoint(path):
    """Load and validate a checkpoint; errors are explicit, never silent.

    Checks the magic string, the format version, and that the stored config
    still hashes to the stored hash (so a hand-edited config cannot silently
    drive mismatched weights).
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {payload.get('version')} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    ckpt = payload["state"]
    if config_hash(ckpt.config) != ckpt.config_hash:
        raise ValueError(f"{path}: config hash mismatch; checkpoint config was edited")
    return ckpt


def bundle_from_checkpoint(ckpt, use_ema=False):
    """Rebuild a ClassifierBundle from a checkpoint's weights and tables."""
    from .classifier import ClassifierBundle

    predictor = build_predictor(ckpt.config.predictor, rng=ckpt.config.seed)
    state = ckpt.ema_state if (use_ema and ckpt.ema_state is not None) else ckpt.model_state
    predictor.load_state_dict(state)
    predictor.eval()
    return ClassifierBundle(
        schedule=ckpt.schedule,
        predictor=predictor,
        codebook=ckpt.codebook,
        tau=ckpt.config.tau,
    )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=str)
        fh.write("\n")


def train(config, resume_from=None):
    """Run (or resume) a training loop; returns the final Checkpoint.

    Per step: draw batch indices, form the classification loss, Adam step.
    Records intra/inter/total losses, the current alpha, and the batch margin
    statistic mean(d_confusing - d_true).  A non-finite loss aborts after
    writing the last-good checkpoint.  With out_dir set, the run directory
    gets config.json, metrics.jsonl, and checkpoint files.
    """
    config.validate()
    dataset = load_dataset(config.data)
    pc = config.predictor
    want = (pc.in_channels, pc.base_resolution, pc.base_resolution)
    if want != dataset.label_shape or pc.out_channels != pc.in_channels:
        raise ValueError(
            f"predictor shape {want} (out={pc.out_channels}) does not match "
            f"dataset samples {dataset.label_shape}"
        )

    schedule = build_schedule(config.num_steps, config.s_max)
    codebook = generate_codebook(
        dataset.num_classes, dataset.label_shape, dataset.data_range, config.codebook_seed
    )
    predictor = build_predictor(pc, rng=config.seed)
    optimizer = torch.optim.Adam(predictor.parameters(), lr=config.learning_rate)
    noise_rng = torch.Generator().manual_seed(_derive_seed(config.seed, "noise"))
    data_rng = np.random.default_rng([config.seed, 77])
    ema_state = None
    if config.ema_decay > 0:
        ema_state = {k: v.detach().clone() for k, v in predictor.state_dict().items()}
    start_step = 0

    if resume_from is not None:
        prev = load_checkpoint(resume_from)
        if prev.config_hash != config_hash(config):
            raise ValueError("resume config differs from the checkpoint's config")
        predictor.load_state_dict(prev.model_state)
        optimizer.load_state_dict(prev.optimizer_state)
        noise_rng.set_state(prev.torch_rng_state)
        data_rng.bit_generator.state = prev.data_rng_state
        ema_state = prev.ema_state
        start_step = prev.step

    def snapshot(step):
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            config=config,
            config_hash=config_hash(config),
            step=step,
            model_state={k: v.detach().clone() for k, v in predictor.state_dict().items()},
            optimizer_state=optimizer.state_dict(),
            ema_state=None if ema_state is None else {k: v.clone() for k, v in ema_state.items()},
            schedule=schedule,
            codebook=codebook,
            torch_rng_state=noise_rng.get_state().clone(),
            data_rng_state=data_rng.bit_generator.state,
            code_version=__version__,
        )

    out_dir = config.out_dir
    metrics_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(
            os.path.join(out_dir, "config.json"),
            {
                "config": asdict(config),
                "config_hash": config_hash(config),
                "code_version": __version__,
                "seeds": {"seed": config.seed, "codebook_seed": config.codebook_seed},
            },
        )
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a")

    xs = torch.as_tensor(dataset.train_x)
    ys = dataset.train_y
    history = []
    try:
        for step in range(start_step, config.train_steps):
            idx = data_rng.integers(0, xs.shape[0], size=config.batch_size)
            xb = xs[idx]
            yb = ys[idx]
            if config.augment:
                flip = data_rng.random(config.batch_size) < 0.5
                if flip.any():
                    xb = xb.clone()
                    xb[np.where(flip)[0]] = torch.flip(xb[np.where(flip)[0]], dims=[-1])
            a = alpha_at(config, step)
            loss_intra, loss_inter, margin = classification_loss_terms(
                schedule, predictor, xb, yb, codebook, noise_rng,
                inter_hinge=config.inter_hinge,
            )
            loss = loss_intra if loss_inter is None else loss_intra + a * loss_inter
            if not torch.isfinite(loss):
                if out_dir:
                    abort_path = os.path.join(out_dir, "checkpoint_aborted.pt")
                    save_checkpoint(snapshot(step), abort_path)
                    raise RuntimeError(
                        f"non-finite loss at step {step}; last-good state in {abort_path}"
                    )
                raise RuntimeError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if ema_state is not None:
                with torch.no_grad():
                    for k, v in predictor.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema_state[k].mul_(config.ema_decay).add_(
                                v, alpha=1 - config.ema_decay
                            )
                        else:
                            ema_state[k].copy_(v)
            if config.log_every and (
                step % config.log_every == 0 or step == config.train_steps - 1
            ):
                row = {
                    "step": step,
                    "loss": float(loss.detach()),
                    "loss_intra": float(loss_intra.detach()),
                    "loss_inter": None if loss_inter is None else float(loss_inter.detach()),
                    "alpha": a,
                    "margin": margin,
                }
                history.append(row)
                if metrics_fh:
                    metrics_fh.write(json.dumps(row) + "\n")
                    metrics_fh.flush()
            if (
                out_dir
                and config.checkpoint_every
                and (step + 1) % config.checkpoint_every == 0
                and step + 1 < config.train_steps
            ):
                save_checkpoint(
                    snapshot(step + 1), os.path.join(out_dir, f"checkpoint_{step + 1:06d}.pt")
                )
    finally:
        if metrics_fh:
            metrics_fh.close()

    final = snapshot(config.train_steps)
    if out_dir:
        save_checkpoint(final, os.path.join(out_dir, "checkpoint.pt"))
    final.history = history  # convenience for callers; not part of the file format
    return final
