"""Multi-stage transformer generator with accumulated output taps.

The generator runs a fixed token grid through `depth` transformer blocks and
emits K+1 images, all at the native resolution: at each tap layer an output
head projects the current features to patches, and stage k is the running sum
of head outputs up to tap k, so later stages strictly extend earlier ones.

Blocks are RMSNorm + self-attention (2D rotary embedding, RMS query/key
normalization) + SwiGLU, modulated per block by a style vector (scale, shift
and residual gate for both branches). The style vector comes from a two-layer
mapping network over concat(noise, class embedding).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, ContractError, NumericFault
from .pyramid import StageOutputs


def truncate_latent(z: torch.Tensor, psi: float) -> torch.Tensor:
    """Interpolate the latent toward the zero vector (the mean of p_z)."""
    psi = float(psi)
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi must lie in [0, 1], got {psi}")
    return z * psi


def swiglu_hidden_width(dim: int, ratio: float) -> int:
    """Parameter-matched gated FFN width, rounded to a multiple of 8."""
    return max(8, int(round(2.0 * ratio * dim / 3.0 / 8.0)) * 8)


def sincos_grid_tokens(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine tokens for a square grid, shape [grid*grid, dim]."""
    if dim % 4 != 0:
        raise ConfigError(f"token dim must be divisible by 4 for 2D sin-cos, got {dim}")
    coords = torch.arange(grid, dtype=torch.float64)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")

    def embed_axis(pos, d):
        omega = torch.arange(d // 2, dtype=torch.float64) / (d / 2)
        omega = 1.0 / 10000.0 ** omega
        ang = pos.reshape(-1)[:, None] * omega[None, :]
        return torch.cat([ang.sin(), ang.cos()], dim=1)

    return torch.cat([embed_axis(yy, dim // 2), embed_axis(xx, dim // 2)], dim=1)


def rope_angles(rows: torch.Tensor, cols: torch.Tensor, head_dim: int) -> torch.Tensor:
    """Axial rotary angles for 2D positions, shape [S, head_dim//2].

    Half the rotary pairs encode the row coordinate, half the column; a token
    at (0, 0) gets zero angles, i.e. the identity rotation.
    """
    if head_dim % 4 != 0:
        raise ConfigError(f"head_dim must be divisible by 4 for 2D rotary, got {head_dim}")
    quarter = head_dim // 4
    freqs = 1.0 / 10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ang_r = rows.to(torch.float64).reshape(-1)[:, None] * freqs[None, :]
    ang_c = cols.to(torch.float64).reshape(-1)[:, None] * freqs[None, :]
    return torch.cat([ang_r, ang_c], dim=1)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs of [B, heads, S, head_dim] by angles."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    rot1 = x1 * cos - x2 * sin
    rot2 = x1 * sin + x2 * cos
    return torch.stack((rot1, rot2), dim=-1).flatten(-2)


class SelfAttention(nn.Module):
    """Multi-head attention with RMS qk-normalization and rotary positions."""

    def __init__(self, dim: int, num_heads: int, head_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = head_dim
        inner = num_heads * head_dim
        self.qkv = nn.Linear(dim, 3 * inner, bias=False)
        self.proj = nn.Linear(inner, dim, bias=False)
        self.q_norm = nn.RMSNorm(head_dim, eps=1e-6)
        self.k_norm = nn.RMSNorm(head_dim, eps=1e-6)
        self.scale = 1.0 / math.sqrt(head_dim)

    def forward(self, x, angles=None, mask=None, keep_attn=False):
        b, s, _ = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        q = self.q_norm(q)
        k = self.k_norm(k)
        if angles is not None:
            cos, sin = angles.cos(), angles.sin()
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            # additive -inf: exactly zero weight outside the allowed block
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, self.num_heads * self.head_dim)
        return self.proj(out), (attn if keep_attn else None)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.value = nn.Linear(dim, hidden, bias=False)
        self.out = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.out(F.silu(self.gate(x)) * self.value(x))


class GeneratorBlock(nn.Module):
    """Pre-norm transformer block with style modulation on both branches."""

    def __init__(self, dim, num_heads, head_dim, mlp_hidden, style_dim):
        super().__init__()
        self.norm1 = nn.RMSNorm(dim, eps=1e-6, elementwise_affine=False)
        self.attn = SelfAttention(dim, num_heads, head_dim)
        self.norm2 = nn.RMSNorm(dim, eps=1e-6, elementwise_affine=False)
        self.mlp = SwiGLU(dim, mlp_hidden)
        self.modulation = nn.Linear(style_dim, 6 * dim)
        # start as a plain residual block: scales/shifts zero, gates one
        nn.init.zeros_(self.modulation.weight)
        with torch.no_grad():
            bias = torch.zeros(6 * dim)
            bias[2 * dim:3 * dim] = 1.0
            bias[5 * dim:6 * dim] = 1.0
            self.modulation.bias.copy_(bias)

    def forward(self, x, style, angles):
        mod = self.modulation(F.silu(style)).unsqueeze(1)
        sa_shift, sa_scale, sa_gate, ml_shift, ml_scale, ml_gate = mod.chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sa_scale) + sa_shift
        attn_out, _ = self.attn(h, angles=angles)
        x = x + sa_gate * attn_out
        h = self.norm2(x) * (1 + ml_scale) + ml_shift
        return x + ml_gate * self.mlp(h)


def unpatchify(tokens: torch.Tensor, grid: int, patch: int, channels: int) -> torch.Tensor:
    """[B, grid*grid, patch*patch*C] -> [B, grid*patch, grid*patch, C]."""
    b = tokens.shape[0]
    x = tokens.reshape(b, grid, grid, patch, patch, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid * patch, grid * patch, channels)


class OutputHead(nn.Module):
    """Per-tap projection from tokens to a native-resolution image."""

    def __init__(self, dim, grid, patch, channels):
        super().__init__()
        self.grid = grid
        self.patch = patch
        self.channels = channels
        self.norm = nn.RMSNorm(dim, eps=1e-6)
        self.proj = nn.Linear(dim, patch * patch * channels)

    def forward(self, f):
        return unpatchify(self.proj(self.norm(f)), self.grid, self.patch, self.channels)


@dataclass
class LatentBatch:
    """Noise, class labels, and the truncation factor for one call."""

    z: torch.Tensor
    c: torch.Tensor
    psi: float = 1.0


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int):
        super().__init__()
        cfg.validate()
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        self.cfg = cfg
        self.num_classes = num_classes
        grid = cfg.grid
        coords = torch.arange(grid)
        yy, xx = torch.meshgrid(coords, coords, indexing="ij")
        self.register_buffer(
            "pos_tokens", sincos_grid_tokens(grid, cfg.hidden_dim).float(), persistent=False)
        self.register_buffer(
            "rot_angles", rope_angles(yy, xx, cfg.head_dim).float(), persistent=False)

        self.class_embed = nn.Embedding(num_classes, cfg.latent_dim)
        self.mapping = nn.Sequential(
            nn.Linear(2 * cfg.latent_dim, cfg.style_dim),
            nn.SiLU(),
            nn.Linear(cfg.style_dim, cfg.style_dim),
        )
        hidden = swiglu_hidden_width(cfg.hidden_dim, cfg.mlp_ratio)
        self.blocks = nn.ModuleList(
            GeneratorBlock(cfg.hidden_dim, cfg.num_heads, cfg.head_dim, hidden, cfg.style_dim)
            for _ in range(cfg.depth))
        self.heads = nn.ModuleList(
            OutputHead(cfg.hidden_dim, grid, cfg.patch_size, cfg.channels_in)
            for _ in cfg.output_layers)

    def _check_inputs(self, z, c):
        if not torch.is_tensor(z) or z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ContractError(
                f"z must be [batch, {self.cfg.latent_dim}], got "
                f"{tuple(z.shape) if torch.is_tensor(z) else type(z).__name__}")
        if not torch.is_tensor(c) or c.ndim != 1 or c.shape[0] != z.shape[0]:
            raise ContractError("c must be a 1D label tensor matching the batch")
        if c.dtype not in (torch.int32, torch.int64):
            raise ContractError(f"labels must be integer, got {c.dtype}")
        if z.shape[0] == 0:
            raise ContractError("empty batch")
        if int(c.min()) < 0 or int(c.max()) >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def forward(self, z, c, psi: float = 1.0, keep_hidden: bool = False) -> StageOutputs:
        self._check_inputs(z, c)
        z = truncate_latent(z, psi)
        style = self.mapping(torch.cat([z, self.class_embed(c)], dim=-1))
        f = self.pos_tokens.unsqueeze(0).expand(z.shape[0], -1, -1)
        tap_to_head = {layer: i for i, layer in enumerate(self.cfg.output_layers)}
        h, hidden, acc = [], [], None
        for layer_idx, block in enumerate(self.blocks, start=1):
            f = block(f, style, self.rot_angles)
            if not torch.isfinite(f).all():
                raise NumericFault(
                    f"non-finite activations in generator block {layer_idx}", layer=layer_idx)
            head_idx = tap_to_head.get(layer_idx)
            if head_idx is not None:
                out = self.heads[head_idx](f)
                acc = out if acc is None else acc + out
                h.append(acc)
                if keep_hidden:
                    hidden.append(f)
        return StageOutputs(h=h, hidden=hidden if keep_hidden else None)

    def generate(self, batch: LatentBatch, keep_hidden: bool = False) -> StageOutputs:
        return self.forward(batch.z, batch.c, psi=batch.psi, keep_hidden=keep_hidden)
