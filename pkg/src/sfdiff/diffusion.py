"""Conditional denoising diffusion over per-point flow and uncertainty residuals.

The denoiser predicts the clean residual pair directly (x0 parameterization) and
reverse sampling is deterministic DDIM over an evenly spaced timestep subsequence.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgumentError

Tensor = torch.Tensor

DENOISER_VARIANTS = ("gru", "mlp", "transformer")


@dataclass
class DiffusionSchedule:
    """Noise-schedule coefficients for T steps plus the Gaussian noise scale sigma."""

    betas: Tensor  # (T,) float64
    sigma: float

    def __post_init__(self):
        if self.betas.ndim != 1 or self.betas.shape[0] < 1:
            raise InvalidArgumentError("betas must be a non-empty 1-D array")
        if (self.betas <= 0).any() or (self.betas >= 1).any():
            raise InvalidArgumentError("every beta must lie in (0,1)")
        self.betas = self.betas.to(torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative product ᾱ_t, with ᾱ_0 defined as 1."""
        if t < 0 or t > self.T:
            raise InvalidArgumentError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   sigma: float = 1.0) -> DiffusionSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps."""
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidArgumentError("need 0 < beta_start <= beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return DiffusionSchedule(betas=betas, sigma=sigma)


def q_sample(s0: Tensor, t: int, noise: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Closed-form forward marginal: sqrt(ᾱ_t)·s0 + sqrt(1−ᾱ_t)·σ·noise."""
    if noise.shape != s0.shape:
        raise InvalidArgumentError("noise shape must match s0")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * s0 + math.sqrt(1.0 - ab) * sched.sigma * noise


def ddim_step(s_t: Tensor, s0_hat: Tensor, t: int, t_prev: int,
              sched: DiffusionSchedule) -> Tensor:
    """Deterministic (eta=0) reverse update from step t to t_prev in x0 form."""
    if not (0 <= t_prev < t <= sched.T):
        raise InvalidArgumentError(f"require 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    eps = (s_t - math.sqrt(ab_t) * s0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_p) * s0_hat + math.sqrt(1.0 - ab_p) * eps


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timestep sequence from T down to 0 (steps+1 values)."""
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    taus = torch.linspace(T, 0, steps + 1).round().long().tolist()
    out = [taus[0]]
    for t in taus[1:]:
        if t < out[-1]:
            out.append(t)
    if out[-1] != 0:
        out.append(0)
    return out


@dataclass
class ConditionBundle:
    """Per-point condition: geometry feature, cost volume, coarse-flow embedding, concatenated."""

    values: Tensor  # (..., N, d)
    widths: Tuple[int, int, int]

    def __post_init__(self):
        if sum(self.widths) != self.values.shape[-1]:
            raise InvalidArgumentError(
                f"segment widths {self.widths} do not sum to bundle width {self.values.shape[-1]}"
            )

    @property
    def n(self) -> int:
        return self.values.shape[-2]

    def split(self) -> Tuple[Tensor, Tensor, Tensor]:
        """Recover the (geometry, cost volume, flow embedding) segments."""
        wp, wcv, we = self.widths
        v = self.values
        return v[..., :wp], v[..., wp:wp + wcv], v[..., wp + wcv:]


@dataclass
class ResidualState:
    """Noisy flow/uncertainty residual pair at timestep t."""

    s_t: Tensor  # (..., N, 3)
    u_t: Tensor  # (..., N, 1)
    t: int

    def __post_init__(self):
        if self.s_t.shape[-1] != 3 or self.u_t.shape[-1] != 1:
            raise InvalidArgumentError("expected s_t (...,N,3) and u_t (...,N,1)")
        if self.s_t.shape[:-1] != self.u_t.shape[:-1]:
            raise InvalidArgumentError("s_t and u_t rows misaligned")


def timestep_embedding(t: int, dim: int, dtype: torch.dtype = torch.float32,
                       device: Optional[torch.device] = None) -> Tensor:
    """Sinusoidal embedding of an integer timestep, shape (dim,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / max(half - 1, 1))
    ang = t * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb


class _ChannelGroupAttention(nn.Module):
    """Single-head self-attention over channel-group tokens of one point (no cross-point mixing)."""

    def __init__(self, hidden: int, n_tokens: int = 4):
        super().__init__()
        if hidden % n_tokens:
            raise InvalidArgumentError("hidden width must divide into channel tokens")
        self.n_tokens = n_tokens
        self.tw = hidden // n_tokens
        self.norm1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(self.tw, 3 * self.tw)
        self.norm2 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, hidden), nn.LeakyReLU(0.1), nn.Linear(hidden, hidden))

    def forward(self, x: Tensor) -> Tensor:
        rows = x.shape[:-1]
        tok = self.norm1(x).reshape(*rows, self.n_tokens, self.tw)
        q, k, v = self.qkv(tok).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.tw), dim=-1)
        x = x + (att @ v).reshape(*rows, -1)
        return x + self.ffn(self.norm2(x))


class DenoiserNet(nn.Module):
    """Predicts the clean residual pair (s0, u0) from (s_t, u_t, t, condition).

    All variants process points independently with shared weights; the gru variant
    additionally carries a per-point hidden state across reverse-sampling steps.
    """

    def __init__(self, cond_width: int, hidden: int = 96, time_width: int = 64,
                 variant: str = "gru"):
        super().__init__()
        if variant not in DENOISER_VARIANTS:
            raise InvalidArgumentError(f"unknown denoiser variant {variant!r}")
        self.cond_width = cond_width
        self.time_width = time_width
        self.hidden = hidden
        self.variant = variant
        in_width = 3 + 1 + time_width + cond_width
        self.proj = nn.Sequential(nn.Linear(in_width, hidden), nn.LeakyReLU(0.1))
        if variant == "gru":
            self.core = nn.GRUCell(hidden, hidden)
        elif variant == "mlp":
            self.core = nn.Sequential(nn.Linear(hidden, hidden), nn.LeakyReLU(0.1),
                                      nn.Linear(hidden, hidden), nn.LeakyReLU(0.1))
        else:
            self.core = _ChannelGroupAttention(hidden)
        self.head = nn.Linear(hidden, 4)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, s_t: Tensor, u_t: Tensor, t: int, cond: Tensor,
                hidden: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        if s_t.shape[:-1] != u_t.shape[:-1] or s_t.shape[:-1] != cond.shape[:-1]:
            raise InvalidArgumentError("s_t, u_t and cond rows misaligned")
        if cond.shape[-1] != self.cond_width:
            raise InvalidArgumentError(f"cond width {cond.shape[-1]} != expected {self.cond_width}")
        emb = timestep_embedding(t, self.time_width, dtype=s_t.dtype, device=s_t.device)
        emb = emb.expand(*s_t.shape[:-1], self.time_width)
        x = self.proj(torch.cat([s_t, u_t, emb, cond], dim=-1))
        next_hidden = None
        if self.variant == "gru":
            rows = x.shape[:-1]
            flat = x.reshape(-1, self.hidden)
            h = hidden.reshape(-1, self.hidden) if hidden is not None else None
            h = self.core(flat, h)
            next_hidden = h.reshape(*rows, self.hidden)
            out = self.head(next_hidden)
        else:
            out = self.head(self.core(x))
        return out[..., :3], out[..., 3:4], next_hidden


def denoise(net, state: ResidualState, cond: ConditionBundle) -> Tuple[Tensor, Tensor]:
    """One forward pass predicting the clean residual pair from a noisy state."""
    if state.s_t.shape[:-1] != cond.values.shape[:-1]:
        raise InvalidArgumentError("state and condition rows misaligned")
    s0_hat, u0_hat, _ = net(state.s_t, state.u_t, state.t, cond.values)
    return s0_hat, u0_hat


def sample_residual(net, cond: ConditionBundle, steps: int, sched: DiffusionSchedule,
                    noise_flow: Tensor, noise_u: Tensor) -> Tuple[Tensor, Tensor]:
    """DDIM chain from pure noise down to the clean residual pair.

    noise_flow (...,N,3) and noise_u (...,N,1) seed s_T and u_T; the caller owns
    the randomness so the chain is deterministic given (weights, cond, noise).
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    taus = ddim_timesteps(sched.T, steps)
    s = sched.sigma * noise_flow
    u = sched.sigma * noise_u
    hidden = None
    for t, t_prev in zip(taus[:-1], taus[1:]):
        s0_hat, u0_hat, hidden = net(s, u, t, cond.values, hidden)
        s = ddim_step(s, s0_hat, t, t_prev, sched)
        u = ddim_step(u, u0_hat, t, t_prev, sched)
    return s, u


def residual_loss(s0_gt: Tensor, s0_hat: Tensor) -> Tensor:
    """Mean squared error over all points and coordinates."""
    if s0_gt.shape != s0_hat.shape:
        raise InvalidArgumentError("residual shapes differ")
    d = s0_gt - s0_hat
    return (d * d).mean()


# ---------------------------------------------------------------------------
# checkpoint archive: zip of meta.json + weights.npz (keys = state_dict names)


def save_checkpoint(path, weights: dict, meta: dict) -> None:
    arrays = {k: np.asarray(v.detach().cpu().numpy() if torch.is_tensor(v) else v)
              for k, v in weights.items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr("weights.npz", buf.getvalue())


def load_checkpoint(path) -> Tuple[dict, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        with np.load(io.BytesIO(zf.read("weights.npz"))) as npz:
            weights = {k: npz[k].copy() for k in npz.files}
    return weights, meta
