"""Analysis instruments: cross-scale trajectory metrics, attention-dependency
fractions, and a toy Gaussian distribution distance for desk-scale monitoring.
"""

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig
from .errors import ContractError, NumericFault
from .pyramid import ScalePyramid, resize

_EPS_NORM = 1e-12


@dataclass
class TrajectoryMetrics:
    """Per-stage trajectory statistics, k = 0..K-1, batch mean and std each.

    delta: distance of the upsampled stage image to the final image, relative
    to the final image norm. rewrite: relative magnitude of the stage-to-stage
    change. align: cosine between the stage-to-stage change and the remaining
    difference to the final image.
    """

    delta_mean: list
    delta_std: list
    rewrite_mean: list
    rewrite_std: list
    align_mean: list
    align_std: list
    degenerate: int = 0            # samples dropped for a vanishing final norm
    align_missing: list = field(default_factory=list)  # per-k zero-direction drops


def _mean_std(t: torch.Tensor) -> tuple[float, float]:
    if t.numel() == 0:
        return float("nan"), float("nan")
    if t.numel() == 1:
        return float(t[0]), 0.0
    return float(t.mean()), float(t.std(unbiased=False))


def trajectory_metrics(pyramid, cfg: ModelConfig) -> TrajectoryMetrics:
    """Per-sample metrics on the r_K-upsampled pyramid, then batch statistics.

    Samples whose final-image norm is below 1e-12 are excluded and counted;
    a sample's align entry is dropped when either difference vector vanishes.
    """
    xs = pyramid.x if isinstance(pyramid, ScalePyramid) else list(pyramid)
    n = len(cfg.scale_resolutions)
    if len(xs) != n:
        raise ContractError(f"expected a full pyramid of {n} scales, got {len(xs)}")
    native = cfg.scale_resolutions[0]
    up = [resize(x, native).flatten(1) for x in xs]
    final = up[-1]
    final_norm = final.norm(dim=1)
    valid = final_norm >= _EPS_NORM
    degenerate = int((~valid).sum())

    dm, ds, rm, rs, am, as_, miss = [], [], [], [], [], [], []
    for k in range(n - 1):
        remain = final - up[k]
        step = up[k + 1] - up[k]
        remain_norm = remain.norm(dim=1)
        step_norm = step.norm(dim=1)

        delta = (remain_norm / final_norm)[valid]
        rewrite = (step_norm / final_norm)[valid]
        defined = valid & (remain_norm >= _EPS_NORM) & (step_norm >= _EPS_NORM)
        cos = ((step * remain).sum(dim=1)[defined]
               / (step_norm[defined] * remain_norm[defined])).clamp(-1.0, 1.0)

        m, s = _mean_std(delta)
        dm.append(m); ds.append(s)
        m, s = _mean_std(rewrite)
        rm.append(m); rs.append(s)
        m, s = _mean_std(cos)
        am.append(m); as_.append(s)
        miss.append(int(valid.sum()) - int(defined.sum()))

    return TrajectoryMetrics(delta_mean=dm, delta_std=ds, rewrite_mean=rm, rewrite_std=rs,
                             align_mean=am, align_std=as_, degenerate=degenerate,
                             align_missing=miss)


@dataclass
class AttentionDependency:
    """Per-layer mean attention mass a token places outside its own scale."""

    per_layer: list

    @property
    def layer_mean(self) -> float:
        return float(np.mean(self.per_layer)) if self.per_layer else float("nan")


def cross_scale_attention_fraction(attn, layout) -> AttentionDependency:
    """Mean foreign-block attention mass per layer over heads/tokens/samples."""
    if not attn:
        raise ContractError("no attention maps given")
    ids = layout.block_ids()
    foreign = (ids[:, None] != ids[None, :])
    per_layer = []
    for i, a in enumerate(attn):
        if not torch.is_tensor(a) or a.ndim != 4 or a.shape[-1] != layout.total \
                or a.shape[-2] != layout.total:
            raise ContractError(
                f"layer {i}: expected [B, heads, {layout.total}, {layout.total}] attention, "
                f"got {tuple(a.shape) if torch.is_tensor(a) else type(a).__name__}")
        a = a.detach()
        row_sums = a.sum(dim=-1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4):
            raise ContractError(f"layer {i}: attention rows are not normalized")
        per_layer.append(float((a * foreign.to(a.dtype)).sum(dim=-1).mean()))
    return AttentionDependency(per_layer=per_layer)


def gaussian_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance (rows = samples) for the toy distribution distance."""
    arr = np.asarray(samples, dtype=np.float64)
    if torch.is_tensor(samples):
        arr = samples.detach().cpu().numpy().astype(np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ContractError(f"need a [N>=2, D] sample matrix, got shape {arr.shape}")
    return arr.mean(axis=0), np.cov(arr, rowvar=False).reshape(arr.shape[1], arr.shape[1])


def toy_frechet_distance(real_stats, fake_stats) -> float:
    """||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}) on given statistics."""
    from scipy import linalg

    mu_r, cov_r = (np.asarray(a, dtype=np.float64) for a in real_stats)
    mu_f, cov_f = (np.asarray(a, dtype=np.float64) for a in fake_stats)
    if mu_r.shape != mu_f.shape or cov_r.shape != cov_f.shape:
        raise ContractError("real and fake statistics must share dimensionality")

    def symmetrized(cov, name):
        cov = (cov + cov.T) / 2.0
        eigs = np.linalg.eigvalsh(cov)
        tol = 1e-6 * max(1.0, float(abs(eigs).max()))
        if eigs.min() < -tol:
            raise NumericFault(f"{name} covariance is not PSD (min eigenvalue {eigs.min():g})")
        return cov

    cov_r = symmetrized(cov_r, "real")
    cov_f = symmetrized(cov_f, "fake")
    covmean = linalg.sqrtm(cov_r @ cov_f)
    if np.iscomplexobj(covmean):
        # roundoff in sqrtm of a near-singular product leaks a tiny imaginary
        # part; only an O(1) imaginary component signals a genuinely bad input
        imag_max = float(abs(covmean.imag).max())
        if imag_max > 1e-3 * max(1.0, float(abs(covmean.real).max())):
            raise NumericFault(f"matrix square root has imaginary part {imag_max:g}")
        covmean = covmean.real
    value = float(((mu_r - mu_f) ** 2).sum() + np.trace(cov_r + cov_f - 2.0 * covmean))
    if value < 0:
        scale = max(1.0, float(np.trace(cov_r) + np.trace(cov_f)))
        if value < -1e-6 * scale:
            raise NumericFault(f"distance came out negative beyond tolerance: {value:g}")
        value = 0.0
    return value


_CSV_COLUMNS = ("iter", "k", "delta_mean", "delta_std", "rewrite_mean", "rewrite_std",
                "align_mean", "align_std")


def _series_items(series):
    if isinstance(series, Mapping):
        return sorted(series.items())
    return list(series)


def emit_metrics(series, path, plot_path=None) -> None:
    """Write one CSV row per (iteration, k); values at 9 significant digits."""
    items = _series_items(series)
    if not items:
        raise ValueError("empty metric series")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for iteration, tm in items:
            for k in range(len(tm.delta_mean)):
                writer.writerow([
                    iteration, k,
                    *(format(v, ".9g") for v in (
                        tm.delta_mean[k], tm.delta_std[k], tm.rewrite_mean[k],
                        tm.rewrite_std[k], tm.align_mean[k], tm.align_std[k])),
                ])
    if plot_path is not None:
        plot_metrics(items, plot_path)


def plot_metrics(series, path) -> None:
    """Three panels (delta, rewrite, align) vs iteration, one line per k."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    items = _series_items(series)
    if not items:
        raise ValueError("empty metric series")
    iters = [it for it, _ in items]
    num_k = len(items[0][1].delta_mean)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    panels = (("delta", "delta_mean"), ("rewrite", "rewrite_mean"), ("align", "align_mean"))
    for ax, (title, attr) in zip(axes, panels):
        for k in range(num_k):
            ax.plot(iters, [getattr(tm, attr)[k] for _, tm in items], label=f"k={k}")
        ax.set_title(title)
        ax.set_xlabel("iteration")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
