import csv

import pytest
import torch
from hypothesis import given, strategies as st

from recoverflow.netblocks import ModelConfig, RecoverFlow
from recoverflow.profiler import (
    COMPONENTS,
    conv_flops,
    costvolume_cost,
    lookup_flops,
    measure,
    plot_reports,
    profile,
    write_report_csv,
)


def test_conv_flops_examples():
    assert conv_flops(1, 1, 1, 1, 1, 1) == 2
    assert conv_flops(3, 3, 64, 64, 8, 12) == 7_077_888
    assert conv_flops(3, 3, 64, 64, 16, 12) == 2 * conv_flops(3, 3, 64, 64, 8, 12)


def test_full_hd_level0_bytes():
    c = costvolume_cost(1920 // 8, 1080 // 8, 64)
    assert 1920 // 8 * (1080 // 8) == 32_400
    assert c.level0_bytes == 4_199_040_000
    assert costvolume_cost(3840 // 8, 2160 // 8, 64).level0_bytes == 16 * 4_199_040_000 == 67_184_640_000


def test_unit_grid():
    d, L = 16, 4
    c = costvolume_cost(1, 1, d, L)
    assert c.flops == 2 * d + 4 * (L - 1)
    assert c.bytes == 4 * L


def test_costvolume_flops_closed_form():
    h, w, d = 16, 24, 32
    n = h * w
    expected = 2 * d * n * n + sum(4 * n * n / 4**l for l in range(1, 4))
    assert costvolume_cost(h, w, d).flops == expected
    assert costvolume_cost(h, w, d).bytes == 4 * sum(n * n / 4**l for l in range(4))


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([2, 4]))
def test_power_of_two_scaling_is_quartic(a, b, s):
    h, w = 8 * a, 8 * b
    base, big = costvolume_cost(h, w, 32), costvolume_cost(s * h, s * w, 32)
    assert big.flops == s**4 * base.flops
    assert big.bytes == s**4 * base.bytes


def test_quadratic_growth_ratio():
    cfg = ModelConfig()
    hi, lo = profile(cfg, 1920, 1080), profile(cfg, 480, 320)
    assert costvolume_cost(240, 135, 64).flops / costvolume_cost(60, 40, 64).flops == 182.25
    assert costvolume_cost(240, 135, 64, levels=1).flops / costvolume_cost(60, 40, 64, levels=1).flops == 182.25
    assert hi.row("cost-volume").flops > 100 * lo.row("cost-volume").flops


def test_share_grows_with_resolution():
    cfg = ModelConfig()
    shares = [profile(cfg, s, s).share("cost-volume") for s in (256, 512, 1024, 2048)]
    assert all(a < b for a, b in zip(shares, shares[1:])), shares


def test_removed_report_zeroes_volume_rows():
    rep = profile(ModelConfig(mode="removed"), 256, 256)
    assert rep.row("cost-volume").flops == 0 and rep.row("cost-volume").activation_bytes == 0
    assert rep.row("feature-encoder").flops == 0 and rep.row("feature-encoder").parameter_bytes == 0
    act = profile(ModelConfig(), 256, 256)
    assert act.row("cost-volume").flops > 0 and act.total_flops > rep.total_flops


def test_report_totals_are_row_sums():
    rep = profile(ModelConfig(backbone="large"), 128, 192)
    assert [r.component for r in rep.rows] == list(COMPONENTS)
    assert rep.total_flops == sum(r.flops for r in rep.rows)
    assert rep.total_activation_bytes == sum(r.activation_bytes for r in rep.rows)
    assert all(r.flops >= 0 and r.activation_bytes >= 0 and r.parameter_bytes >= 0 for r in rep.rows)


def _frames(h, w):
    g = torch.Generator().manual_seed(0)
    return torch.rand(1, 3, h, w, generator=g), torch.rand(1, 3, h, w, generator=g)


@pytest.mark.parametrize("backbone", ["small", "medium", "large"])
@pytest.mark.parametrize("size", [(64, 64), (128, 192), (72, 120)])
def test_analytic_matches_measured(backbone, size):
    cfg = ModelConfig(backbone=backbone, iterations=3)
    model = RecoverFlow(cfg).eval()
    got = measure(model, *_frames(*size))
    rep = profile(cfg, *size)
    h, w = size[0] // 8, size[1] // 8
    assert got["correlate_flops"] == 2 * cfg.feature_dim * (h * w) ** 2
    assert got["lookup_flops"] == lookup_flops(h, w, cfg.levels, cfg.radius, 3)
    step = 2 ** (cfg.levels - 1)
    if h % step == 0 and w % step == 0:
        # every pyramid level halves exactly, so the whole cost-volume row is exact
        assert got["costvolume_flops"] == rep.row("cost-volume").flops
        assert got["correlate_flops"] + got["pool_flops"] == costvolume_cost(h, w, cfg.feature_dim).flops
    else:
        # odd levels drop a row or column when pooled; the analytic model keeps the fraction
        assert got["costvolume_flops"] == pytest.approx(rep.row("cost-volume").flops, rel=0.01)
    for comp in ("context-network", "feature-encoder", "refinement"):
        assert got[f"conv_flops/{comp}"] == pytest.approx(rep.row(comp).flops, rel=0.01)
    assert got["conv_flops/upsampler"] + got["convex_flops"] == pytest.approx(rep.row("upsampler").flops, rel=0.01)


def test_measure_removed_counters():
    model = RecoverFlow(ModelConfig(mode="removed")).eval()
    got = measure(model, *_frames(64, 64))
    assert got["correlate_calls"] == 0 and got["costvolume_flops"] == 0 and got["lookup_samples"] == 0


def test_removed_peak_bytes_lower():
    f1, f2 = _frames(64, 96)
    active = measure(RecoverFlow(ModelConfig()).eval(), f1, f2)
    removed = measure(RecoverFlow(ModelConfig(mode="removed")).eval(), f1, f2)
    assert removed["peak_bytes"] < active["peak_bytes"]
    assert removed["total_flops"] < active["total_flops"]


def test_csv_header_states_convention_and_plots(tmp_path):
    reps = [profile(ModelConfig(), s, s) for s in (64, 128)]
    write_report_csv(reps, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].startswith("#") and "multiply-accumulate as 2" in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 2 * (len(COMPONENTS) + 1)
    paths = plot_reports(reps, tmp_path)
    assert all(p.exists() for p in paths)
