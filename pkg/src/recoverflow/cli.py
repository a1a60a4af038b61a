"""Command-line entry point: train, eval, sweep, profile, predict, export-data.

Exit status: 0 success, 2 invalid arguments/config, 3 checkpoint incompatibility,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import torch

from . import evaluator, flowio, instrument, profiler
from .costvolume import ContractError, CostVolumeMode
from .datasynth import generate, recipe_by_name
from .flowio import FlowFormatError
from .netblocks import DEFAULT_ITERS, UPSAMPLE, ConfigError, ModelConfig
from .seeding import derive_seed
from .trainer import (
    CheckpointError,
    PlanError,
    StagePlan,
    apply_overrides,
    default_plan,
    load_model,
    load_plan,
    read_manifest,
    train,
)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CHECKPOINT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_run(out: Path, args: argparse.Namespace) -> None:
    record = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str))


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _parse_resolutions(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            h, w = item.lower().split("x")
            out.append((int(h), int(w)))
        except ValueError:
            raise UsageError(f"resolution {item!r} is not of the form HxW") from None
    return out


def _recipe(name: str):
    try:
        return recipe_by_name(name)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _test_samples(recipe_name: str, n: int, seed: int):
    held = _recipe(recipe_name).heldout()
    return [generate(held, derive_seed(seed, "test", i) % 2**31) for i in range(n)]


def _load(checkpoint: str, expect_removed: bool = False):
    if not Path(checkpoint).exists():
        raise UsageError(f"checkpoint {checkpoint} does not exist")
    expected = None
    if expect_removed:
        cfg = ModelConfig.from_dict(read_manifest(checkpoint)["config"])
        expected = cfg.replace(mode=CostVolumeMode.removed())
    return load_model(checkpoint, expected).eval()


def _iters(model, iters: int | None) -> int:
    return DEFAULT_ITERS[model.cfg.backbone] if iters is None else iters


# --- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    _log_run(out, args)
    torch.manual_seed(args.seed)
    if args.plan:
        plan = load_plan(args.plan, args.set)
    else:
        plan = default_plan()
        if args.set:
            plan = StagePlan.from_dict(apply_overrides(plan.to_dict(), args.set)).validate()

    def show(row):
        if row["val_epe"] is not None:
            print(f"step {row['step']} stage {row['stage']} {row['mode']} loss {row['loss']:.4f} "
                  f"val_epe {row['val_epe']:.4f}", flush=True)

    train(plan, args.seed, out, resume=args.resume, progress=show)
    print(f"finished; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def _predictor(args, model):
    if args.oracle:
        return evaluator.oracle_predictor
    if args.downsample > 1:
        return evaluator.downsampled_predictor(model, args.downsample, _iters(model, args.iters))
    return evaluator.model_predictor(model, _iters(model, args.iters))


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    _log_run(out, args)
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --oracle")
    model = None if args.oracle else _load(args.checkpoint)
    samples = _test_samples(args.recipe, args.samples, args.seed)
    reports = evaluator.evaluate(_predictor(args, model), samples)
    evaluator.write_report_csv(reports, out / "report.csv")
    agg = evaluator.aggregate(reports).as_dict()
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2))
    print(json.dumps({k: v for k, v in agg.items() if k.startswith("epe_")}, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _out_dir(args.out)
    _log_run(out, args)
    model = _load(args.checkpoint)
    samples = _test_samples(args.recipe, args.samples, args.seed)
    rows = evaluator.iteration_sweep(model, samples, _parse_ints(args.iters_list), out)
    for n, e in rows:
        print(f"N={n}\tepe={e:.4f}")
    return EXIT_OK


def cmd_profile(args) -> int:
    out = _out_dir(args.out)
    _log_run(out, args)
    base = {"backbone": args.backbone}
    if args.iters is not None:
        base["iterations"] = args.iters
    try:
        base = apply_overrides(base, args.set)
        resolutions = _parse_resolutions(args.resolutions)
        for mode in args.modes:
            cfg = ModelConfig.from_dict({**base, "mode": mode})
            reports = [profiler.profile(cfg, h, w) for h, w in resolutions]
            profiler.write_report_csv(reports, out / f"profile_{cfg.mode}.csv")
            profiler.plot_reports(reports, out, tag=f"_{cfg.mode}")
            for rep in reports:
                print(f"{cfg.mode} {rep.resolution[0]}x{rep.resolution[1]} total {rep.total_flops:.4g} FLOPs, "
                      f"cost-volume share {rep.share('cost-volume'):.1%}")
    except (PlanError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def cmd_predict(args) -> int:
    out_flo = Path(args.out)
    out_flo.parent.mkdir(parents=True, exist_ok=True)
    model = _load(args.checkpoint, expect_removed=args.verify_removed)
    f1, f2 = flowio.load_png(args.frame1), flowio.load_png(args.frame2)
    if f1.shape != f2.shape:
        raise UsageError(f"frame sizes differ: {f1.shape} vs {f2.shape}")
    iters = _iters(model, args.iters)
    factor = max(1, args.downsample)
    p1, pad = flowio.pad_to_multiple(f1, UPSAMPLE * factor)
    p2, _ = flowio.pad_to_multiple(f2, UPSAMPLE * factor)
    with instrument.record() as rec, instrument.hooks(model):
        if factor > 1:
            flow = evaluator.eval_downsampled(model, p1, p2, factor, iters)
        else:
            flow = evaluator.predict(model, p1, p2, iters)
    flow = flowio.crop(flow, pad)
    flowio.write_flo(flow, out_flo)
    flowio.save_png(flowio.flow_to_color(flow), out_flo.with_suffix(".png"))
    counters = rec.snapshot()
    counters["total_flops"] = sum(counters.get(k, 0) for k in ("conv_flops", "costvolume_flops", "convex_flops"))
    out_flo.with_suffix(".counters.json").write_text(json.dumps(counters, indent=2, sort_keys=True))
    if args.verify_removed:
        calls = counters.get("correlate_calls", 0)
        if calls:
            print(f"correlate was invoked {calls} times", file=sys.stderr)
            return EXIT_CHECKPOINT
        print("verified: correlate_calls = 0")
    print(f"wrote {out_flo} ({iters} iterations, {counters['total_flops']} FLOPs)")
    return EXIT_OK


def cmd_export_data(args) -> int:
    out = _out_dir(args.out)
    _log_run(out, args)
    recipe = _recipe(args.recipe)
    if args.heldout:
        recipe = recipe.heldout()
    for i in range(args.start, args.start + args.count):
        s = generate(recipe, i)
        d = out / f"{args.recipe}_{i:06d}"
        d.mkdir(exist_ok=True)
        flowio.save_png(s.frame1, d / "frame1.png")
        flowio.save_png(s.frame2, d / "frame2.png")
        flowio.write_flo(s.gt_flow, d / "flow.flo")
        flowio.save_mask_png(s.occlusion, d / "occlusion.png")
        flowio.save_mask_png(s.rigid, d / "rigid.png")
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recoverflow", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("train", help="run a staged training plan"), "runs/train")
    p.add_argument("--plan", help="YAML stage plan (default: built-in four-stage plan, cut-off at stage 3)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a plan entry, e.g. stages.2.mode_transition=begin_fade")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="region-partitioned EPE on a seeded synthetic test set"), "runs/eval")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="predict the ground truth (plumbing check)")
    p.add_argument("--recipe", default="mixed")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--iters", type=int)
    p.add_argument("--downsample", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("sweep", help="EPE versus refinement iterations"), "runs/sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iters-list", default="0,1,2,4,8,16")
    p.add_argument("--recipe", default="mixed")
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("profile", help="analytic FLOP/byte breakdown across resolutions"), "runs/profile")
    p.add_argument("--backbone", default="medium")
    p.add_argument("--modes", nargs="+", default=["active", "removed"])
    p.add_argument("--resolutions", default="256x256,512x512,1024x1024,2048x2048")
    p.add_argument("--iters", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="model config override")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("predict", help="flow for one PNG frame pair")
    p.add_argument("checkpoint")
    p.add_argument("frame1")
    p.add_argument("frame2")
    p.add_argument("out", help="output .flo path; a colour PNG and counters JSON are written beside it")
    p.add_argument("--iters", type=int, help="refinement iterations (default depends on the backbone)")
    p.add_argument("--downsample", type=int, nargs="?", const=2, default=1,
                   help="run at 1/factor resolution and upsample the flow (default factor 2)")
    p.add_argument("--verify-removed", action="store_true",
                   help="require a cost-volume-free checkpoint and check that no correlation ran")
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("export-data", help="write synthetic samples as PNG/.flo files"), "runs/data")
    p.add_argument("--recipe", default="rigid")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--heldout", action="store_true")
    p.set_defaults(func=cmd_export_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (UsageError, PlanError, ConfigError, ContractError, FlowFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
