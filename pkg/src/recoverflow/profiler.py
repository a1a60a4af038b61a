"""Analytic FLOP/byte model per model component, and measured runtime counters.

All FLOP figures count one multiply-accumulate as 2 FLOPs. Bytes assume
4-byte elements and cover tensor payloads only.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import torch
from torch import nn

from . import instrument
from .costvolume import FLOPS_PER_BILINEAR_SAMPLE, FLOPS_PER_POOLED_ENTRY
from .netblocks import CONVEX_FLOPS_PER_OUTPUT, N_MIXTURE, UPSAMPLE, ModelConfig, RecoverFlow, count_parameters

BYTES_PER_ELEMENT = instrument.BYTES_PER_ELEMENT
COMPONENTS = ("context-network", "feature-encoder", "cost-volume", "refinement", "upsampler")
CONVENTION = "FLOPs count one multiply-accumulate as 2; bytes are 4-byte tensor payloads"
PROBE_SIZE = (64, 64)


def conv_flops(k_h: int, k_w: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """Cost of a dense convolution; ``c_in`` is the per-group input width."""
    return 2 * k_h * k_w * c_in * c_out * h_out * w_out


class CostVolumeCost(NamedTuple):
    flops: float
    bytes: float
    level0_bytes: float


def _level_elems(h: int, w: int, level: int) -> float:
    # an axis already at one cell is not pooled further
    return max(1.0, h / 2**level) * max(1.0, w / 2**level)


def costvolume_cost(h: int, w: int, d: int, levels: int = 4) -> CostVolumeCost:
    """Correlation plus pooling cost of the all-pairs pyramid on an (h, w) feature grid."""
    if min(h, w, d, levels) < 1:
        raise ValueError("h, w, d and levels must be positive")
    n = h * w
    flops = 2 * d * n * n
    total_bytes = 0
    for lvl in range(levels):
        entries = n * _level_elems(h, w, lvl)
        total_bytes += BYTES_PER_ELEMENT * entries
        if lvl:
            flops += FLOPS_PER_POOLED_ENTRY * entries
    return CostVolumeCost(_exact(flops), _exact(total_bytes), BYTES_PER_ELEMENT * n * n)


def _exact(x: float):
    return int(x) if float(x).is_integer() else x


def lookup_flops(h: int, w: int, levels: int, radius: int, iterations: int) -> int:
    return FLOPS_PER_BILINEAR_SAMPLE * levels * (2 * radius + 1) ** 2 * h * w * iterations


# --- layer table -------------------------------------------------------------


@dataclass(frozen=True)
class ConvCall:
    component: str
    k_h: int
    k_w: int
    c_in: int
    c_out: int
    stride: int  # output grid is (H / stride, W / stride)
    batch: int


def _arch_key(cfg: ModelConfig) -> tuple:
    return (
        cfg.backbone, cfg.feature_dim, cfg.context_dim, cfg.hidden_dim,
        cfg.levels, cfg.radius, cfg.mode.uses_volume,
    )


@functools.lru_cache(maxsize=32)
def _layer_table(key: tuple) -> tuple[tuple[ConvCall, ...], dict[str, int]]:
    """Every convolution call of one single-iteration forward, from a small probe pass."""
    backbone, d, cd, hd, levels, radius, uses_volume = key
    mode = "active" if uses_volume else "removed"
    cfg = ModelConfig(backbone, d, cd, hd, iterations=1, levels=levels, radius=radius, mode=mode)
    model = RecoverFlow(cfg).eval()
    H, W = PROBE_SIZE
    calls: list[ConvCall] = []
    seen: set[int] = set()
    handles = []
    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            comp = instrument.component_of(name)

            def hook(mod, inputs, out, comp=comp):
                # per-iteration modules are recorded once and scaled by the iteration count
                if comp in ("refinement", "upsampler") and id(mod) in seen:
                    return
                seen.add(id(mod))
                b, cout, ho, wo = out.shape
                if H % ho or W % wo or H // ho != W // wo:
                    raise RuntimeError(f"probe output {ho}x{wo} is not an integer downscale of {H}x{W}")
                calls.append(ConvCall(comp, *mod.kernel_size, mod.in_channels // mod.groups, cout, H // ho, b))

            handles.append(module.register_forward_hook(hook))
    with torch.no_grad():
        model(torch.zeros(1, 3, H, W), torch.zeros(1, 3, H, W), iters=1)
    for h in handles:
        h.remove()
    params = {
        "context-network": count_parameters(model.context),
        "feature-encoder": count_parameters(model.encoder),
        "refinement": count_parameters(model.refine),
        "upsampler": count_parameters(model.upmask),
    }
    return tuple(calls), params


# --- reports -----------------------------------------------------------------


@dataclass
class ComponentRow:
    component: str
    flops: float = 0
    activation_bytes: float = 0
    parameter_bytes: int = 0


@dataclass
class ComplexityReport:
    resolution: tuple[int, int]
    config: dict
    rows: list[ComponentRow] = field(default_factory=list)

    def row(self, component: str) -> ComponentRow:
        for r in self.rows:
            if r.component == component:
                return r
        raise KeyError(component)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def total_activation_bytes(self):
        return sum(r.activation_bytes for r in self.rows)

    @property
    def total_parameter_bytes(self):
        return sum(r.parameter_bytes for r in self.rows)

    def share(self, component: str) -> float:
        total = self.total_flops
        return self.row(component).flops / total if total else 0.0


def profile(cfg: ModelConfig, H: int, W: int, iterations: int | None = None) -> ComplexityReport:
    """Analytic per-component cost of one forward pass at (H, W)."""
    if H % UPSAMPLE or W % UPSAMPLE:
        raise ValueError(f"resolution {H}x{W} must be divisible by {UPSAMPLE}")
    n_iter = cfg.iterations if iterations is None else iterations
    calls, params = _layer_table(_arch_key(cfg))
    rows = {c: ComponentRow(c) for c in COMPONENTS}
    for call in calls:
        ho, wo = H // call.stride, W // call.stride
        repeat = n_iter if call.component == "refinement" else 1
        if call.component == "upsampler":
            repeat = n_iter + 1
        row = rows[call.component]
        row.flops += repeat * call.batch * conv_flops(call.k_h, call.k_w, call.c_in, call.c_out, ho, wo)
        row.activation_bytes += repeat * call.batch * BYTES_PER_ELEMENT * call.c_out * ho * wo
    up = rows["upsampler"]
    up.flops += (n_iter + 1) * CONVEX_FLOPS_PER_OUTPUT * (2 + N_MIXTURE) * H * W
    up.activation_bytes += (n_iter + 1) * BYTES_PER_ELEMENT * (2 + N_MIXTURE) * H * W
    if cfg.mode.uses_volume:
        h, w = H // UPSAMPLE, W // UPSAMPLE
        cv = costvolume_cost(h, w, cfg.feature_dim, cfg.levels)
        rows["cost-volume"].flops = cv.flops + lookup_flops(h, w, cfg.levels, cfg.radius, n_iter)
        rows["cost-volume"].activation_bytes = cv.bytes
    else:
        rows["feature-encoder"] = ComponentRow("feature-encoder")
    for comp, n in params.items():
        rows[comp].parameter_bytes = BYTES_PER_ELEMENT * n
    return ComplexityReport((H, W), {**cfg.to_dict(), "iterations": n_iter}, [rows[c] for c in COMPONENTS])


def write_report_csv(reports: Sequence[ComplexityReport], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# {CONVENTION}\n")
        writer = csv.writer(f)
        writer.writerow(["height", "width", "mode", "component", "flops", "activation_bytes", "parameter_bytes"])
        for rep in reports:
            H, W = rep.resolution
            for r in rep.rows:
                writer.writerow([H, W, rep.config["mode"], r.component, r.flops, r.activation_bytes, r.parameter_bytes])
            writer.writerow([H, W, rep.config["mode"], "total", rep.total_flops,
                             rep.total_activation_bytes, rep.total_parameter_bytes])


def plot_reports(reports: Sequence[ComplexityReport], out_dir, tag: str = "") -> list[Path]:
    """Stacked FLOPs per component and activation bytes versus resolution."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pixels = [r.resolution[0] * r.resolution[1] for r in reports]
    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.stackplot(pixels, *[[r.row(c).flops for r in reports] for c in COMPONENTS], labels=COMPONENTS)
    ax.set_xlabel("input pixels")
    ax.set_ylabel("FLOPs (MAC = 2)")
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    paths.append(out / f"flops{tag}.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(pixels, [r.total_activation_bytes for r in reports], marker="o", label="all components")
    ax.plot(pixels, [r.row("cost-volume").activation_bytes for r in reports], marker="s", label="cost volume")
    ax.set_xscale("log")
    ax.set_yscale("symlog")
    ax.set_xlabel("input pixels")
    ax.set_ylabel("activation bytes")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(out / f"memory{tag}.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths


# --- measurement -------------------------------------------------------------


def measure(model: RecoverFlow, frame1: torch.Tensor, frame2: torch.Tensor, iters: int | None = None) -> dict:
    """Run one inference forward under instrumentation and return the counters.

    Keys include ``correlate_calls``, ``correlate_flops``, ``pool_flops``,
    ``lookup_samples``, ``lookup_flops``, ``costvolume_flops``, ``conv_flops``
    (and ``conv_flops/<component>``), ``convex_flops``, ``total_flops`` and
    ``peak_bytes``.
    """
    if frame1.dim() == 3:
        frame1, frame2 = frame1.unsqueeze(0), frame2.unsqueeze(0)
    with instrument.record() as rec, instrument.hooks(model), torch.no_grad():
        bundle = model(frame1, frame2, iters=iters)
        del bundle
    out = {k: 0 for k in ("correlate_calls", "correlate_flops", "pool_flops", "lookup_samples",
                          "lookup_flops", "costvolume_flops", "conv_flops", "convex_flops")}
    out.update(rec.snapshot())
    out["total_flops"] = out["conv_flops"] + out["costvolume_flops"] + out["convex_flops"]
    return out
