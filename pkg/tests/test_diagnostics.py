import csv
import math

import numpy as np
import pytest
import torch

from xsgan.config import ModelConfig
from xsgan.diagnostics import (cross_scale_attention_fraction, emit_metrics,
                               gaussian_stats, plot_metrics, toy_frechet_distance,
                               trajectory_metrics)
from xsgan.discriminator import build_layout
from xsgan.errors import ContractError, NumericFault
from xsgan.pyramid import ScalePyramid, build_pyramids, upsample_to_native


def _random_pyramid(cfg, batch=4, gen=None, dtype=torch.float64):
    xs = [torch.randn(batch, side, side, cfg.channels_in, generator=gen, dtype=dtype)
          for side in reversed(cfg.scale_resolutions)]
    return ScalePyramid(x=xs, source="generated")


def _brute_force(pyramid, cfg):
    """Direct per-sample transcription of the metric definitions."""
    xs = pyramid.x
    n = len(xs)
    ups = [upsample_to_native(x, cfg).flatten(1) for x in xs]
    final = ups[-1]
    out = {"delta": [], "rewrite": [], "align": []}
    for k in range(n - 1):
        deltas, rewrites, aligns = [], [], []
        for i in range(final.shape[0]):
            denom = float(final[i].norm())
            if denom < 1e-12:
                continue
            step = ups[k + 1][i] - ups[k][i]
            remaining = final[i] - ups[k][i]
            deltas.append(float(remaining.norm()) / denom)
            rewrites.append(float(step.norm()) / denom)
            if float(step.norm()) >= 1e-12 and float(remaining.norm()) >= 1e-12:
                cos = float(torch.dot(step, remaining) / (step.norm() * remaining.norm()))
                aligns.append(max(-1.0, min(1.0, cos)))
        out["delta"].append(deltas)
        out["rewrite"].append(rewrites)
        out["align"].append(aligns)
    return out


def test_oracle_equivalence_random_pyramids(tiny_model_cfg):
    gen = torch.Generator().manual_seed(0)
    for _ in range(25):
        pyr = _random_pyramid(tiny_model_cfg, batch=3, gen=gen)
        tm = trajectory_metrics(pyr, tiny_model_cfg)
        ref = _brute_force(pyr, tiny_model_cfg)
        for k in range(len(tm.delta_mean)):
            for got, ref_vals in ((tm.delta_mean[k], ref["delta"][k]),
                                  (tm.rewrite_mean[k], ref["rewrite"][k]),
                                  (tm.align_mean[k], ref["align"][k])):
                expect = float(np.mean(ref_vals))
                assert abs(got - expect) <= 1e-6 * max(1.0, abs(expect))


def test_perfect_alignment_gives_zero(tiny_model_cfg):
    # constant images survive resizing exactly, so every upsampled scale
    # equals the final image and both metrics collapse to zero
    const = torch.full((2, 8, 8, 3), 0.3, dtype=torch.float64)
    pyr = build_pyramids(const, tiny_model_cfg)
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    assert tm.delta_mean[0] == pytest.approx(0.0, abs=1e-12)
    assert tm.rewrite_mean[0] == pytest.approx(0.0, abs=1e-12)


def test_delta_half_worked_example():
    cfg = ModelConfig(depth=2, hidden_dim=32, num_heads=2, head_dim=16, patch_size=2,
                      grid=2, channels_in=1, mlp_ratio=2.0, output_layers=(1, 2),
                      scale_resolutions=(4, 2), latent_dim=8, style_dim=16)
    final = torch.ones(1, 4, 4, 1, dtype=torch.float64)
    coarse = torch.full((1, 2, 2, 1), 0.5, dtype=torch.float64)  # upsamples to all-0.5
    tm = trajectory_metrics(ScalePyramid(x=[coarse, final], source="real"), cfg)
    assert tm.delta_mean[0] == pytest.approx(0.5, abs=1e-9)


def test_align_one_worked_example():
    cfg = ModelConfig(depth=2, hidden_dim=32, num_heads=2, head_dim=16, patch_size=2,
                      grid=2, channels_in=1, mlp_ratio=2.0, output_layers=(1, 2),
                      scale_resolutions=(4, 2), latent_dim=8, style_dim=16)
    final = torch.randn(1, 4, 4, 1, dtype=torch.float64)
    # r_K(x_0) = 0 and x_1 = x_K: the step equals the remaining difference
    zero = torch.zeros(1, 2, 2, 1, dtype=torch.float64)
    tm = trajectory_metrics(ScalePyramid(x=[zero, final], source="real"), cfg)
    assert tm.align_mean[0] == pytest.approx(1.0, abs=1e-9)
    assert tm.delta_mean[0] == pytest.approx(1.0, abs=1e-9)


def test_scale_invariance(tiny_model_cfg):
    gen = torch.Generator().manual_seed(1)
    pyr = _random_pyramid(tiny_model_cfg, gen=gen)
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    scaled = ScalePyramid(x=[3.7 * x for x in pyr.x], source="generated")
    ts = trajectory_metrics(scaled, tiny_model_cfg)
    for k in range(len(tm.delta_mean)):
        assert ts.delta_mean[k] == pytest.approx(tm.delta_mean[k], rel=1e-9)
        assert ts.rewrite_mean[k] == pytest.approx(tm.rewrite_mean[k], rel=1e-9)
        assert ts.align_mean[k] == pytest.approx(tm.align_mean[k], rel=1e-9)


def test_translation_leaves_numerators_unchanged(tiny_model_cfg):
    """Adding a constant to every scale changes only the norm denominator."""
    gen = torch.Generator().manual_seed(2)
    pyr = _random_pyramid(tiny_model_cfg, batch=1, gen=gen)
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    shifted = ScalePyramid(x=[x + 5.0 for x in pyr.x], source="generated")
    ts = trajectory_metrics(shifted, tiny_model_cfg)
    norm0 = float(upsample_to_native(pyr.x[-1], tiny_model_cfg).flatten(1).norm())
    norm1 = float(upsample_to_native(shifted.x[-1], tiny_model_cfg).flatten(1).norm())
    for k in range(len(tm.delta_mean)):
        assert ts.delta_mean[k] * norm1 == pytest.approx(tm.delta_mean[k] * norm0, rel=1e-9)
        assert ts.rewrite_mean[k] * norm1 == pytest.approx(tm.rewrite_mean[k] * norm0,
                                                           rel=1e-9)


def test_degenerate_samples_excluded(tiny_model_cfg):
    gen = torch.Generator().manual_seed(3)
    pyr = _random_pyramid(tiny_model_cfg, batch=3, gen=gen)
    for x in pyr.x:
        x[1] = 0.0  # sample 1 has a vanishing final image
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    assert tm.degenerate == 1
    ref = trajectory_metrics(
        ScalePyramid(x=[x[[0, 2]] for x in pyr.x], source="generated"), tiny_model_cfg)
    for k in range(len(tm.delta_mean)):
        assert tm.delta_mean[k] == pytest.approx(ref.delta_mean[k], rel=1e-12)


def test_align_missing_when_step_vanishes(tiny_model_cfg):
    # a constant image zeroes both difference vectors, so the align entry
    # is recorded missing rather than fabricated
    const = torch.full((1, 8, 8, 3), 0.7, dtype=torch.float64)
    pyr = build_pyramids(const, tiny_model_cfg)
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    assert tm.align_missing[0] == 1
    assert math.isnan(tm.align_mean[0])


def test_population_std_single_sample_is_zero(tiny_model_cfg):
    pyr = _random_pyramid(tiny_model_cfg, batch=1,
                          gen=torch.Generator().manual_seed(4))
    tm = trajectory_metrics(pyr, tiny_model_cfg)
    for k in range(len(tm.delta_std)):
        assert tm.delta_std[k] == 0.0


def test_cross_fraction_uniform_two_blocks():
    layout = build_layout((4, 2), (2, 1))
    sizes = [end - start for start, end in layout.bounds]
    assert sizes == [5, 5]
    attn = [torch.full((2, 2, 10, 10), 0.1)]
    dep = cross_scale_attention_fraction(attn, layout)
    assert dep.per_layer[0] == pytest.approx(0.5, abs=1e-6)
    assert dep.layer_mean == pytest.approx(0.5, abs=1e-6)


def test_cross_fraction_single_scale_is_zero():
    layout = build_layout((4,), (2,))
    attn = [torch.full((1, 1, 5, 5), 0.2)]
    dep = cross_scale_attention_fraction(attn, layout)
    assert dep.per_layer[0] == 0.0


def test_cross_fraction_contract_checks():
    layout = build_layout((4, 2), (2, 1))
    with pytest.raises(ContractError):
        cross_scale_attention_fraction([torch.full((1, 1, 9, 9), 1 / 9)], layout)
    bad = torch.full((1, 1, 10, 10), 0.3)  # rows sum to 3
    with pytest.raises(ContractError):
        cross_scale_attention_fraction([bad], layout)
    with pytest.raises(ContractError):
        cross_scale_attention_fraction([], layout)


def test_frechet_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(64, 5))
    b = rng.normal(loc=0.3, size=(64, 5))
    sa, sb = gaussian_stats(a), gaussian_stats(b)
    assert toy_frechet_distance(sa, sa) == pytest.approx(0.0, abs=1e-6)
    assert toy_frechet_distance(sa, sb) == pytest.approx(toy_frechet_distance(sb, sa),
                                                         rel=1e-9)
    assert toy_frechet_distance(sa, sb) > 0.0


def test_frechet_one_dimensional_closed_form():
    """Unit-variance 1-D Gaussians with means 0 and 3 -> squared distance 9."""
    mean_r, cov_r = np.array([0.0]), np.array([[1.0]])
    mean_f, cov_f = np.array([3.0]), np.array([[1.0]])
    assert toy_frechet_distance((mean_r, cov_r), (mean_f, cov_f)) \
        == pytest.approx(9.0, abs=1e-9)


def test_frechet_rejects_non_psd():
    mean = np.zeros(2)
    bad = np.array([[1.0, 0.0], [0.0, -1.0]])
    good = np.eye(2)
    with pytest.raises(NumericFault):
        toy_frechet_distance((mean, bad), (mean, good))


def test_gaussian_stats_requires_two_samples():
    with pytest.raises(ContractError):
        gaussian_stats(np.zeros((1, 3)))


def _fake_series(tiny_model_cfg, iterations):
    gen = torch.Generator().manual_seed(5)
    series = []
    for it in iterations:
        pyr = _random_pyramid(tiny_model_cfg, batch=3, gen=gen)
        series.append((it, trajectory_metrics(pyr, tiny_model_cfg)))
    return series


def test_emit_metrics_rows_and_roundtrip(tmp_path, tiny_model_cfg):
    series = _fake_series(tiny_model_cfg, (100, 200))
    path = tmp_path / "metrics.csv"
    emit_metrics(series, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 1  # two checkpoints, K=1 for the tiny config
    assert list(rows[0].keys()) == ["iter", "k", "delta_mean", "delta_std",
                                    "rewrite_mean", "rewrite_std", "align_mean",
                                    "align_std"]
    for (it, tm), row_group in zip(series, [rows[:1], rows[1:]]):
        for k, row in enumerate(row_group):
            assert int(row["iter"]) == it and int(row["k"]) == k
            for name, values in (("delta_mean", tm.delta_mean),
                                 ("rewrite_std", tm.rewrite_std),
                                 ("align_mean", tm.align_mean)):
                parsed = float(row[name])
                assert parsed == pytest.approx(values[k], rel=1e-8)


def test_emit_metrics_row_count_k3(tmp_path):
    cfg = ModelConfig()  # K=3
    gen = torch.Generator().manual_seed(6)
    series = []
    for it in (10, 20):
        pyr = _random_pyramid(cfg, batch=2, gen=gen, dtype=torch.float32)
        series.append((it, trajectory_metrics(pyr, cfg)))
    path = tmp_path / "m.csv"
    emit_metrics(series, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 1 + 6  # header + two checkpoints x K=3


def test_emit_metrics_empty_series_creates_no_file(tmp_path):
    path = tmp_path / "empty.csv"
    with pytest.raises(ValueError):
        emit_metrics([], path)
    assert not path.exists()


def test_plot_metrics_writes_png(tmp_path, tiny_model_cfg):
    series = _fake_series(tiny_model_cfg, (1, 2, 3))
    path = tmp_path / "curves.png"
    plot_metrics(series, path)
    assert path.stat().st_size > 0
