"""Shared transformer discriminator over the concatenated multi-scale sequence.

Every scale's image is patch-embedded into its own token block (spatial
tokens, then that scale's [cls] token), blocks are laid out native scale
first, and a single transformer runs over the whole sequence. In scale_wise
mode a block-diagonal attention mask confines attention to same-scale tokens,
so the scale-k logit is a function of x_k alone; aggregated mode drops the
mask and is the diagnostic baseline.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import DiscConfig
from .errors import ConfigError, ContractError, LayoutError, NumericFault
from .generator import SelfAttention, SwiGLU, rope_angles, swiglu_hidden_width
from .pyramid import ScalePyramid

_MODES = ("scale_wise", "aggregated")


@dataclass(frozen=True)
class ScaleTokenLayout:
    """Token geometry of the multi-scale sequence, native scale first.

    Each scale occupies one contiguous block of spatial tokens followed by
    its [cls] slot; blocks are disjoint and cover the whole sequence.
    """

    spatial: tuple[int, ...]
    bounds: tuple[tuple[int, int], ...]
    cls_index: tuple[int, ...]
    total: int

    @property
    def num_scales(self) -> int:
        return len(self.spatial)

    def validate(self):
        if not (len(self.spatial) == len(self.bounds) == len(self.cls_index)) or not self.spatial:
            raise LayoutError("layout needs one (spatial, bounds, cls) triple per scale")
        prev_end = 0
        for sp, (start, end), ci in zip(self.spatial, self.bounds, self.cls_index):
            if sp < 1:
                raise LayoutError("each scale needs at least one spatial token")
            if start != prev_end:
                raise LayoutError(f"blocks must be disjoint and contiguous, "
                                  f"got start {start} after end {prev_end}")
            if end - start != sp + 1:
                raise LayoutError("each block is its spatial tokens plus exactly one cls slot")
            if ci != end - 1:
                raise LayoutError("cls slot must sit at the end of its block")
            prev_end = end
        if prev_end != self.total:
            raise LayoutError(f"blocks cover {prev_end} tokens but total is {self.total}")

    def block_ids(self) -> torch.Tensor:
        """Per-position block index, shape [total]."""
        ids = torch.empty(self.total, dtype=torch.int64)
        for j, (start, end) in enumerate(self.bounds):
            ids[start:end] = j
        return ids


def build_layout(scale_resolutions, patch_sizes) -> ScaleTokenLayout:
    if len(scale_resolutions) != len(patch_sizes):
        raise LayoutError("need one patch size per scale resolution")
    spatial, bounds, cls_index = [], [], []
    cursor = 0
    for res, patch in zip(scale_resolutions, patch_sizes):
        if patch < 1 or res % patch != 0:
            raise LayoutError(f"patch {patch} does not divide resolution {res}")
        count = (res // patch) ** 2
        spatial.append(count)
        bounds.append((cursor, cursor + count + 1))
        cls_index.append(cursor + count)
        cursor += count + 1
    layout = ScaleTokenLayout(spatial=tuple(spatial), bounds=tuple(bounds),
                              cls_index=tuple(cls_index), total=cursor)
    layout.validate()
    return layout


def build_scale_mask(layout: ScaleTokenLayout, mode: str) -> torch.Tensor:
    """Boolean [seq, seq] attention mask; True marks an allowed pair."""
    if mode not in _MODES:
        raise ConfigError(f"mode must be one of {_MODES}, got {mode!r}")
    layout.validate()
    if mode == "aggregated":
        return torch.ones(layout.total, layout.total, dtype=torch.bool)
    ids = layout.block_ids()
    return ids[:, None] == ids[None, :]


@dataclass
class DiscriminatorOutput:
    d: torch.Tensor  # [batch, K+1]; column k holds the scale-k logit
    attn: list | None = None


def patchify(img: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, H, W, C] -> [B, (H/patch)^2, patch*patch*C] in row-major patch order."""
    b, h, w, c = img.shape
    g = h // patch
    x = img.reshape(b, g, patch, g, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


class DiscBlock(nn.Module):
    def __init__(self, dim, num_heads, head_dim, mlp_hidden):
        super().__init__()
        self.norm1 = nn.RMSNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, num_heads, head_dim)
        self.norm2 = nn.RMSNorm(dim, eps=1e-6)
        self.mlp = SwiGLU(dim, mlp_hidden)

    def forward(self, x, angles, mask, keep_attn=False):
        out, attn = self.attn(self.norm1(x), angles=angles, mask=mask, keep_attn=keep_attn)
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, attn


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscConfig, num_classes: int, mode: str = "scale_wise",
                 keep_attention: bool = False):
        super().__init__()
        cfg.validate()
        if mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {mode!r}")
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        self.cfg = cfg
        self.mode = mode
        self.num_classes = num_classes
        self.keep_attention = keep_attention
        self.layout = build_layout(cfg.scale_resolutions, cfg.patch_sizes)
        self.register_buffer("mask", build_scale_mask(self.layout, mode), persistent=False)

        # rotary coordinates: each scale uses its own token-grid positions,
        # cls slots sit at (0, 0), i.e. the identity rotation
        rows, cols = [], []
        for res, patch in zip(cfg.scale_resolutions, cfg.patch_sizes):
            g = res // patch
            yy, xx = torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij")
            rows.append(yy.reshape(-1))
            cols.append(xx.reshape(-1))
            rows.append(torch.zeros(1, dtype=torch.int64))
            cols.append(torch.zeros(1, dtype=torch.int64))
        self.register_buffer(
            "rot_angles",
            rope_angles(torch.cat(rows), torch.cat(cols), cfg.head_dim).float(),
            persistent=False)

        dim = cfg.hidden_dim
        self.patch_embed = nn.ModuleList(
            nn.Linear(p * p * cfg.channels_in, dim) for p in cfg.patch_sizes)
        self.scale_embed = nn.Parameter(torch.randn(cfg.num_scales, dim) * 0.02)
        self.cls_tokens = nn.Parameter(torch.randn(cfg.num_scales, dim) * 0.02)
        hidden = swiglu_hidden_width(dim, cfg.mlp_ratio)
        self.blocks = nn.ModuleList(
            DiscBlock(dim, cfg.num_heads, cfg.head_dim, hidden) for _ in range(cfg.depth))
        self.out_norm = nn.RMSNorm(dim, eps=1e-6)
        self.head = nn.Linear(dim, 1)
        self.scale_bias = nn.Parameter(torch.zeros(cfg.num_scales))
        self.class_embed = nn.Embedding(num_classes, dim)

    def _scale_images(self, pyramid):
        xs = pyramid.x if isinstance(pyramid, ScalePyramid) else list(pyramid)
        n = self.cfg.num_scales
        if len(xs) != n:
            raise ContractError(f"pyramid has {len(xs)} scales, layout expects {n}")
        batch = None
        for j, res in enumerate(self.cfg.scale_resolutions):
            img = xs[n - 1 - j]  # block j holds scale k = n-1-j
            if not torch.is_tensor(img) or img.ndim != 4:
                raise ContractError(f"scale {n - 1 - j}: expected a [B,H,W,C] tensor")
            b, h, w, c = img.shape
            if h != res or w != res or c != self.cfg.channels_in:
                raise ContractError(
                    f"scale {n - 1 - j}: expected [B,{res},{res},{self.cfg.channels_in}], "
                    f"got {tuple(img.shape)}")
            if batch is None:
                batch = b
            elif b != batch:
                raise ContractError("all pyramid scales must share one batch size")
        return xs, batch

    def _check_labels(self, c, batch):
        if not torch.is_tensor(c) or c.ndim != 1 or c.shape[0] != batch:
            raise ContractError("c must be a 1D label tensor matching the batch")
        if c.dtype not in (torch.int32, torch.int64):
            raise ContractError(f"labels must be integer, got {c.dtype}")
        if int(c.min()) < 0 or int(c.max()) >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def forward(self, pyramid, c) -> DiscriminatorOutput:
        xs, batch = self._scale_images(pyramid)
        self._check_labels(c, batch)
        n = self.cfg.num_scales
        parts = []
        for j, patch in enumerate(self.cfg.patch_sizes):
            tokens = self.patch_embed[j](patchify(xs[n - 1 - j], patch))
            tokens = tokens + self.scale_embed[j]
            cls = self.cls_tokens[j].expand(batch, 1, -1)
            parts.append(torch.cat([tokens, cls], dim=1))
        seq = torch.cat(parts, dim=1)

        attn_maps = [] if self.keep_attention else None
        for block in self.blocks:
            seq, attn = block(seq, self.rot_angles, self.mask, keep_attn=self.keep_attention)
            if attn_maps is not None:
                attn_maps.append(attn)
        feats = self.out_norm(seq)

        cemb = self.class_embed(c)
        scale_logits = [None] * n
        for j in range(n):
            f_cls = feats[:, self.layout.cls_index[j]]
            logit = (self.head(f_cls).squeeze(-1)
                     + (cemb * f_cls).sum(-1) / math.sqrt(self.cfg.hidden_dim)
                     + self.scale_bias[j])
            scale_logits[n - 1 - j] = logit
        d = torch.stack(scale_logits, dim=1)
        if not torch.isfinite(d).all():
            raise NumericFault("non-finite discriminator logits")
        return DiscriminatorOutput(d=d, attn=attn_maps)

    def attention_maps(self, pyramid, c) -> list:
        """Row-normalized per-layer attention, each [B, heads, seq, seq]."""
        if not self.keep_attention:
            raise ContractError(
                "attention retention is disabled; construct with keep_attention=True")
        return self.forward(pyramid, c).attn


_DUMP_MAGIC = b"XSATTND1"
_DUMP_DTYPES = {0: np.float32, 1: np.float64}
_DUMP_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_attention_dump(path, attn) -> None:
    """Binary container: small header (layer count, dtype, dims), raw data."""
    if not attn:
        raise ContractError("no attention maps to write")
    arrays = [a.detach().cpu().numpy() if torch.is_tensor(a) else np.asarray(a) for a in attn]
    shape = arrays[0].shape
    dtype = arrays[0].dtype
    if any(a.shape != shape or a.dtype != dtype for a in arrays):
        raise ContractError("all attention layers must share shape and dtype")
    if dtype not in _DUMP_CODES:
        raise ContractError(f"unsupported dtype {dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sIBBH", _DUMP_MAGIC, len(arrays), _DUMP_CODES[dtype],
                             len(shape), 0))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def read_attention_dump(path) -> list:
    with open(path, "rb") as fh:
        magic, n_layers, dtype_code, ndim, _ = struct.unpack("<8sIBBH", fh.read(16))
        if magic != _DUMP_MAGIC:
            raise ContractError(f"not an attention dump: bad magic {magic!r}")
        if dtype_code not in _DUMP_DTYPES:
            raise ContractError(f"unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        dtype = np.dtype(_DUMP_DTYPES[dtype_code])
        count = int(np.prod(shape))
        out = []
        for _ in range(n_layers):
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ContractError("truncated attention dump")
            out.append(torch.from_numpy(
                np.frombuffer(buf, dtype=dtype).reshape(shape).copy()))
    return out
