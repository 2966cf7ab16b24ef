"""Resizing across the scale hierarchy and pyramid construction.

Image tensors are channels-last, ``[batch, height, width, channels]``.
The resize operator is linear and preserves constant images exactly:
area averaging (block mean) for integer downsizing, bilinear for upsizing.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, ContractError


@dataclass
class StageOutputs:
    """Accumulated generator outputs h_0..h_K, all at the native resolution.

    ``hidden`` optionally keeps the transformer features at each tap for
    inspection; it is None unless requested at generation time.
    """

    h: list
    hidden: list | None = None


@dataclass
class ScalePyramid:
    """Per-scale images; x[k] is the scale-k image, x[-1] the native one."""

    x: list
    source: str  # "generated" or "real"


def _check_image(img: torch.Tensor) -> int:
    if not torch.is_tensor(img) or img.ndim != 4:
        raise ContractError(f"expected a [B,H,W,C] image tensor, got {type(img).__name__} "
                            f"{tuple(img.shape) if torch.is_tensor(img) else ''}")
    _, h, w, _ = img.shape
    if h != w:
        raise ContractError(f"expected square images, got {h}x{w}")
    return h


def resize(img: torch.Tensor, out_side: int) -> torch.Tensor:
    """Resize [B,H,W,C] images to a square side of out_side."""
    side = _check_image(img)
    if out_side < 1:
        raise ConfigError(f"target side must be positive, got {out_side}")
    if out_side == side:
        return img
    nchw = img.permute(0, 3, 1, 2)
    if out_side < side:
        if side % out_side != 0:
            raise ConfigError(f"cannot downsize {side} -> {out_side}: non-integer factor")
        out = F.avg_pool2d(nchw, kernel_size=side // out_side)
    else:
        if out_side % side != 0:
            raise ConfigError(f"cannot upsize {side} -> {out_side}: non-integer factor")
        out = F.interpolate(nchw, size=(out_side, out_side), mode="bilinear",
                            align_corners=False)
    return out.permute(0, 2, 3, 1).contiguous()


def resize_to_scale(h: torch.Tensor, k: int, cfg: ModelConfig) -> torch.Tensor:
    """r_k: map a native-resolution image to the scale-k resolution."""
    scales = cfg.scale_resolutions
    if not 0 <= k < len(scales):
        raise ContractError(f"scale index {k} out of range for {len(scales)} scales")
    side = _check_image(h)
    if side != scales[0]:
        raise ContractError(f"input must be at the native resolution {scales[0]}, got {side}")
    # scales are listed native-first; scale index k counts from the coarsest
    return resize(h, scales[len(scales) - 1 - k])


def build_pyramids(g, cfg: ModelConfig) -> ScalePyramid:
    """Resize stage outputs (or a real batch) into the discriminator pyramid.

    Generated: scale k uses stage k's own output, x_k = r_k(h_k).
    Real: the single batch is resized to every scale.
    """
    n = len(cfg.scale_resolutions)
    if isinstance(g, StageOutputs):
        if len(g.h) != n:
            raise ContractError(f"expected {n} stage outputs, got {len(g.h)}")
        return ScalePyramid(x=[resize_to_scale(g.h[k], k, cfg) for k in range(n)],
                            source="generated")
    if torch.is_tensor(g):
        return ScalePyramid(x=[resize_to_scale(g, k, cfg) for k in range(n)], source="real")
    raise ContractError(f"expected StageOutputs or an image tensor, got {type(g).__name__}")


def upsample_to_native(x_k: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """r_K for diagnostics: bring a scale image back to the native side."""
    return resize(x_k, cfg.scale_resolutions[0])
