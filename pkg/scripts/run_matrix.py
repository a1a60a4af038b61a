"""Train the cost-volume removal matrix and record held-out EPE per variant and seed.

Variants (all on the medium backbone, 64x96, four synthetic stages):
  never   no cost volume at any point
  cut3    cost volume cut off at the start of stage 3
  fade3   cost volume faded out across stage 3 (pruned when the ramp ends)
  always  cost volume kept throughout

``cut3``, ``fade3`` and ``always`` share stages 1-2, so those are trained once
per seed and branched from the stage-2 checkpoint. A cut-off at stage 1 is
the same run as ``never`` (the encoder is dropped before the first update).

Re-running skips finished work; results accumulate in ``results.json``.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import torch

from recoverflow.datasynth import generate, recipe_by_name
from recoverflow.trainer import batched_epe, default_plan, load_checkpoint, load_model, train

VARIANTS = ("never", "cut3", "fade3", "always")
TEST_RECIPE = "mixed"
TEST_OFFSET = 100_000


def test_set(n: int, recipe: str = TEST_RECIPE):
    held = recipe_by_name(recipe).heldout()
    return [generate(held, TEST_OFFSET + i) for i in range(n)]


def plan_for(variant: str, total_steps: int):
    if variant == "never":
        return default_plan(total_steps, cut_off_stage=0)
    if variant == "cut3":
        return default_plan(total_steps, cut_off_stage=2)
    if variant == "fade3":
        return default_plan(total_steps, cut_off_stage=2, fade=True)
    return default_plan(total_steps, cut_off_stage=None)


def progress_printer(tag: str, every: int = 250):
    t0 = time.time()

    def show(row):
        if row["step"] % every == 0 or row["val_epe"] is not None:
            val = "" if row["val_epe"] is None else f" val_epe {row['val_epe']:.3f}"
            print(f"[{tag}] step {row['step']} stage {row['stage']} {row['mode']} "
                  f"loss {row['loss']:.3f}{val} ({time.time() - t0:.0f}s)", flush=True)

    return show


def run_seed(root: Path, seed: int, total_steps: int, variants, results: dict, n_test: int, save) -> None:
    tests = None
    shared_ckpt = root / f"seed{seed}" / "shared" / "checkpoints" / "stage1.ckpt"
    for variant in variants:
        out = root / f"seed{seed}" / variant
        final = out / "checkpoints" / "final.ckpt"
        if not final.exists():
            plan = plan_for(variant, total_steps)
            state = None
            if variant != "never":
                if not shared_ckpt.exists():
                    train(plan_for("always", total_steps), seed, shared_ckpt.parents[1],
                          stop_after_stage=1, progress=progress_printer(f"s{seed} shared"))
                state = load_checkpoint(shared_ckpt)
            train(plan, seed, out, state=state, progress=progress_printer(f"s{seed} {variant}"))
        key = f"{variant}/{seed}"
        if key not in results:
            tests = tests if tests is not None else test_set(n_test)
            model = load_model(final).eval()
            results[key] = {
                "variant": variant,
                "seed": seed,
                "epe": batched_epe(model, tests),
                "checkpoint": str(final.relative_to(root)),
            }
            save()
            print(f"[s{seed} {variant}] test EPE {results[key]['epe']:.4f}", flush=True)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/matrix")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--total-steps", type=int, default=15_000)
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--test-samples", type=int, default=128)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    torch.set_num_threads(args.threads)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    results_path = root / "results.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    meta = {"total_steps": args.total_steps, "test_recipe": TEST_RECIPE, "test_samples": args.test_samples}
    if results.get("_meta", meta) != meta:
        raise SystemExit(f"{results_path} was produced with different settings: {results['_meta']}")
    results["_meta"] = meta

    def save():
        tmp = results_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(results, indent=2, sort_keys=True))
        tmp.replace(results_path)

    save()
    for seed in args.seeds:
        run_seed(root, seed, args.total_steps, args.variants, results, args.test_samples, save)


if __name__ == "__main__":
    main()
