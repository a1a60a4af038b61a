"""Endpoint error, region-partitioned reports, iteration sweeps, downsampled evaluation."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .costvolume import ContractError
from .datasynth import Sample
from .flowio import FlowField, Frame, crop, pad_to_multiple
from .netblocks import UPSAMPLE

REGIONS = ("total", "matched", "unmatched", "rigid", "nonrigid", "s0_10", "s10_40", "s40p")
MAGNITUDE_EDGES = (10.0, 40.0)


def _uv(x) -> np.ndarray:
    if isinstance(x, FlowField):
        return x.uv
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def endpoint_errors(pred, gt: FlowField) -> np.ndarray:
    """Per-pixel Euclidean error (H, W) in float64."""
    p = _uv(pred).astype(np.float64)
    g = gt.uv.astype(np.float64)
    if p.shape != g.shape:
        raise ContractError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    return np.sqrt(((p - g) ** 2).sum(axis=0))


def epe(pred, gt: FlowField) -> float:
    """Mean endpoint error over ``gt.valid`` pixels."""
    if not gt.valid.any():
        raise ContractError("ground truth has no valid pixels")
    return float(endpoint_errors(pred, gt)[gt.valid].mean())


@dataclass
class RegionReport:
    """Mean EPE and pixel count per region; empty regions carry NaN."""

    epe_total: float
    epe_matched: float
    epe_unmatched: float
    epe_rigid: float
    epe_nonrigid: float
    epe_s0_10: float
    epe_s10_40: float
    epe_s40p: float
    count_total: int
    count_matched: int
    count_unmatched: int
    count_rigid: int
    count_nonrigid: int
    count_s0_10: int
    count_s10_40: int
    count_s40p: int

    def epe_of(self, region: str) -> float:
        return getattr(self, f"epe_{region}")

    def count_of(self, region: str) -> int:
        return getattr(self, f"count_{region}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def region_masks(sample: Sample) -> dict[str, np.ndarray]:
    valid = sample.gt_flow.valid
    mag = sample.gt_flow.magnitude().astype(np.float64)
    lo, hi = MAGNITUDE_EDGES
    occ = np.asarray(sample.occlusion, dtype=bool)
    rigid = np.asarray(sample.rigid, dtype=bool)
    return {
        "total": valid,
        "matched": valid & ~occ,
        "unmatched": valid & occ,
        "rigid": valid & rigid,
        "nonrigid": valid & ~rigid,
        # boundary magnitudes go to the upper bucket
        "s0_10": valid & (mag < lo),
        "s10_40": valid & (mag >= lo) & (mag < hi),
        "s40p": valid & (mag >= hi),
    }


def _report_from_sums(sums: dict[str, float], counts: dict[str, int]) -> RegionReport:
    fields = {}
    for r in REGIONS:
        n = counts[r]
        fields[f"epe_{r}"] = sums[r] / n if n else math.nan
        fields[f"count_{r}"] = int(n)
    return RegionReport(**fields)


def region_report(pred, sample: Sample) -> RegionReport:
    err = endpoint_errors(pred, sample.gt_flow)
    masks = region_masks(sample)
    if not masks["total"].any():
        raise ContractError("ground truth has no valid pixels")
    sums = {r: float(err[m].sum()) for r, m in masks.items()}
    counts = {r: int(m.sum()) for r, m in masks.items()}
    return _report_from_sums(sums, counts)


def aggregate(reports: Iterable[RegionReport]) -> RegionReport:
    """Pixel-weighted pooling of per-sample reports; empty regions are skipped."""
    sums = {r: 0.0 for r in REGIONS}
    counts = {r: 0 for r in REGIONS}
    for rep in reports:
        for r in REGIONS:
            n = rep.count_of(r)
            if n:
                sums[r] += rep.epe_of(r) * n
                counts[r] += n
    return _report_from_sums(sums, counts)


def write_report_csv(reports: Sequence[RegionReport], path, labels: Sequence[str] | None = None) -> None:
    """One row per sample plus a final ``aggregate`` row."""
    labels = list(labels) if labels is not None else [str(i) for i in range(len(reports))]
    names = [f.name for f in dataclasses.fields(RegionReport)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample", *names])
        for label, rep in zip(labels, reports):
            writer.writerow([label, *(getattr(rep, n) for n in names)])
        agg = aggregate(reports)
        writer.writerow(["aggregate", *(getattr(agg, n) for n in names)])


# --- model-driven evaluation -------------------------------------------------

Predictor = Callable[[Sample], FlowField]


def _to_batch(frame: Frame) -> torch.Tensor:
    return torch.from_numpy(frame.data).unsqueeze(0)


@torch.no_grad()
def predict(model, frame1: Frame, frame2: Frame, iters: int | None = None) -> FlowField:
    """Pad to a multiple of 8, run the model, crop back to the input size."""
    p1, pad = pad_to_multiple(frame1, UPSAMPLE)
    p2, _ = pad_to_multiple(frame2, UPSAMPLE)
    bundle = model(_to_batch(p1), _to_batch(p2), iters=iters)
    uv = bundle.final_flow[0].cpu().numpy()
    return FlowField(crop(uv, pad))


def model_predictor(model, iters: int | None = None) -> Predictor:
    return lambda s: predict(model, s.frame1, s.frame2, iters)


def oracle_predictor(sample: Sample) -> FlowField:
    """Returns the ground truth; a test hook for the evaluation plumbing."""
    return FlowField(sample.gt_flow.uv.copy(), sample.gt_flow.valid.copy())


def evaluate(predictor: Predictor, samples: Iterable[Sample]) -> list[RegionReport]:
    return [region_report(predictor(s), s) for s in samples]


def mean_epe(predictor: Predictor, samples: Iterable[Sample]) -> float:
    """Pixel-weighted EPE over a set of samples."""
    return aggregate(evaluate(predictor, samples)).epe_total


def iteration_sweep(
    model, samples: Sequence[Sample], counts: Sequence[int], out_dir=None
) -> list[tuple[int, float]]:
    """EPE for each refinement-iteration count, re-running the frozen model per count."""
    was_training = model.training
    model.eval()
    rows = [(int(n), mean_epe(model_predictor(model, int(n)), samples)) for n in counts]
    model.train(was_training)
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: Sequence[tuple[int, float]], out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iterations", "epe"])
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o")
    ax.set_xlabel("refinement iterations")
    ax.set_ylabel("EPE (px)")
    fig.tight_layout()
    fig.savefig(out / "sweep.png", dpi=120)
    plt.close(fig)


def resize_flow(uv: torch.Tensor, size: tuple[int, int], factor: float) -> torch.Tensor:
    """Bilinearly resample a (B, 2, h, w) flow to ``size`` and scale its vectors by ``factor``."""
    return factor * F.interpolate(uv, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def eval_downsampled(
    model, frame1: Frame, frame2: Frame, factor: int = 2, iters: int | None = None
) -> FlowField:
    """Run the model on bilinearly downsampled frames and upsample the flow back."""
    H, W = frame1.shape
    if H % factor or W % factor:
        raise ContractError(f"factor {factor} does not divide frame size {H}x{W}")
    small = (H // factor, W // factor)
    f1 = F.interpolate(_to_batch(frame1), size=small, mode="bilinear", align_corners=False)
    f2 = F.interpolate(_to_batch(frame2), size=small, mode="bilinear", align_corners=False)
    low = predict(model, Frame(f1[0].clamp(0, 1).numpy()), Frame(f2[0].clamp(0, 1).numpy()), iters)
    up = resize_flow(torch.from_numpy(low.uv).unsqueeze(0), (H, W), float(factor))
    return FlowField(up[0].numpy())


def downsampled_predictor(model, factor: int = 2, iters: int | None = None) -> Predictor:
    return lambda s: eval_downsampled(model, s.frame1, s.frame2, factor, iters)
