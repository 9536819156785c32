"""Noise predictor: a small U-Net with three pruning knobs.

The knobs are the base channel width (model_channels), the per-level channel
multipliers, and the residual-block count per level.  Topology is otherwise
fixed: group normalization, SiLU, sinusoidal time embedding widened to
4*model_channels, self-attention at the lowest-resolution level only, one
downsample between levels, and a mirrored expansive path with skip
concatenation.  The final projection is zero-initialized so an untrained
predictor outputs zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class PredictorConfig:
    model_channels: int = 64
    channel_multipliers: tuple = (1, 4)
    res_blocks: int = 1
    in_channels: int = 3
    out_channels: int = 3
    base_resolution: int = 32
    time_embed_dim: int = 0  # 0 means the default 4*model_channels
    attention_levels: tuple = ()  # empty means the default: lowest level only

    def __post_init__(self):
        self.channel_multipliers = tuple(int(u) for u in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if self.time_embed_dim == 0:
            self.time_embed_dim = 4 * self.model_channels
        if not self.attention_levels:
            self.attention_levels = (len(self.channel_multipliers) - 1,)

    def validate(self):
        u = self.channel_multipliers
        if self.model_channels < 1 or self.res_blocks < 1:
            raise ValueError("model_channels and res_blocks must be >= 1")
        if len(u) < 1 or any(m < 1 for m in u) or list(u) != sorted(u):
            raise ValueError(f"channel_multipliers must be non-decreasing positives, got {u}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        factor = 2 ** (len(u) - 1)
        if self.base_resolution % factor != 0:
            raise ValueError(
                f"base_resolution {self.base_resolution} not divisible by {factor} "
                f"(one downsample per level after the first)"
            )
        if any(a < 0 or a >= len(u) for a in self.attention_levels):
            raise ValueError(f"attention_levels out of range: {self.attention_levels}")


def _norm_groups(channels):
    # at least 4 channels per group: 1-channel groups behave like instance
    # norm and erase per-channel means, which cripples small models
    g = min(32, max(1, channels // 4))
    while channels % g != 0:
        g -= 1
    return g


def _norm(channels):
    return nn.GroupNorm(_norm_groups(channels), channels)


def timestep_embedding(t, dim):
    # standard sinusoidal features; t is a (B,) float tensor
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        # blocks start as (projected) identity: much better early optimization
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(torch.nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class UNetPredictor(nn.Module):
    """Maps (y_t, t) -> eps prediction of the same shape as y_t."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.calls = 0  # forward-invocation counter, read by the eval harness

        cm = config.model_channels
        tdim = config.time_embed_dim
        u = config.channel_multipliers
        n_r = config.res_blocks
        attn_at = set(config.attention_levels)

        self.time_mlp = nn.Sequential(nn.Linear(cm, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(config.in_channels, cm, 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [cm]
        ch = cm
        for level, mult in enumerate(u):
            out = cm * mult
            for _ in range(n_r):
                block = nn.ModuleDict({"res": ResBlock(ch, out, tdim)})
                if level in attn_at:
                    block["attn"] = SelfAttention2d(out)
                self.down.append(block)
                ch = out
                skip_chs.append(ch)
            if level != len(u) - 1:
                self.down.append(nn.ModuleDict({"down": Downsample(ch)}))
                skip_chs.append(ch)

        self.mid_res1 = ResBlock(ch, ch, tdim)
        self.mid_attn = SelfAttention2d(ch)
        self.mid_res2 = ResBlock(ch, ch, tdim)

        self.up = nn.ModuleList()
        for level in reversed(range(len(u))):
            out = cm * u[level]
            for _ in range(n_r + 1):
                block = nn.ModuleDict({"res": ResBlock(ch + skip_chs.pop(), out, tdim)})
                if level in attn_at:
                    block["attn"] = SelfAttention2d(out)
                self.up.append(block)
                ch = out
            if level != 0:
                self.up.append(nn.ModuleDict({"up": Upsample(ch)}))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, config.out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, y, t):
        self.calls += 1
        if y.ndim != 4:
            raise ValueError(f"expected (B,C,H,W) input, got shape {tuple(y.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((y.shape[0],), int(t), device=y.device)
        t = t.to(device=y.device).reshape(-1)
        if t.numel() == 1 and y.shape[0] != 1:
            t = t.expand(y.shape[0])
        if int(t.min()) < 1:
            raise ValueError("timesteps must be >= 1")

        emb = self.time_mlp(timestep_embedding(t.to(y.dtype), self.config.model_channels))
        h = self.conv_in(y)
        skips = [h]
        for block in self.down:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["res"](h, emb)
                if "attn" in block:
                    h = block["attn"](h)
            skips.append(h)  # every contracting entry contributes one skip
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, emb)), emb)
        for block in self.up:
            if "up" in block:
                h = block["up"](h)
            else:
                h = block["res"](torch.cat([h, skips.pop()], dim=1), emb)
                if "attn" in block:
                    h = block["attn"](h)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


class OraclePredictor(nn.Module):
    """Cheating predictor that knows the true label: returns y_t - y0.

    With it the one-step estimate recovers y0 exactly at every t and the full
    chain classifies perfectly; used as the reference in tests and demos.
    """

    def __init__(self, y0):
        super().__init__()
        self.y0 = y0 if torch.is_tensor(y0) else torch.as_tensor(y0)
        self.calls = 0

    def forward(self, y, t):
        self.calls += 1
        y0 = self.y0.to(dtype=y.dtype, device=y.device)
        if y0.ndim == y.ndim - 1:
            y0 = y0[None]
        return y - y0


def build_predictor(config, rng=0):
    """Construct a UNetPredictor with deterministic initialization.

    rng is an integer seed or a torch.Generator (one value is drawn from it,
    so successive builds from the same generator differ deterministically).
    The global torch RNG is forked and seeded for the duration of module
    construction, so two builds with the same (config, seed) have identical
    parameters and the caller's global RNG stream is untouched.
    """
    if isinstance(rng, torch.Generator):
        seed = int(torch.randint(0, 2**62, (1,), generator=rng).item())
    else:
        seed = int(rng)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = UNetPredictor(config)
    return model


def predict_eps(predictor, y_t, t):
    """Evaluate the predictor; accepts (C,H,W) or (B,C,H,W) input.

    t is a positive int (shared by the batch) or a per-sample vector.
    Differentiable w.r.t. both y_t and the parameters.
    """
    if y_t.ndim == 3:
        return predictor(y_t[None], t)[0]
    return predictor(y_t, t)


def param_count(config):
    """Exact trainable-parameter count, computed arithmetically.

    Independent of module construction on purpose: the tests compare this
    number against brute-force enumeration of a built network's parameters.
    """
    config.validate()
    cm = config.model_channels
    tdim = config.time_embed_dim
    u = config.channel_multipliers
    n_r = config.res_blocks
    attn_at = set(config.attention_levels)

    def conv(cin, cout, k):
        return k * k * cin * cout + cout

    def lin(cin, cout):
        return cin * cout + cout

    def gn(c):
        return 2 * c

    def res(cin, cout):
        n = gn(cin) + conv(cin, cout, 3) + lin(tdim, cout) + gn(cout) + conv(cout, cout, 3)
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    def attn(c):
        return gn(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    total = lin(cm, tdim) + lin(tdim, tdim)  # time MLP
    total += conv(config.in_channels, cm, 3)

    skip_chs = [cm]
    ch = cm
    for level, mult in enumerate(u):
        out = cm * mult
        for _ in range(n_r):
            total += res(ch, out)
            if level in attn_at:
                total += attn(out)
            ch = out
            skip_chs.append(ch)
        if level != len(u) - 1:
            total += conv(ch, ch, 3)  # strided downsample
            skip_chs.append(ch)

    total += 2 * res(ch, ch) + attn(ch)  # middle

    for level in reversed(range(len(u))):
        out = cm * u[level]
        for _ in range(n_r + 1):
            total += res(ch + skip_chs.pop(), out)
            if level in attn_at:
                total += attn(out)
            ch = out
        if level != 0:
            total += conv(ch, ch, 3)  # post-upsample conv

    total += gn(ch) + conv(ch, config.out_channels, 3)
    return total
