import csv
import json

import numpy as np
import pytest
import torch
import yaml

from recoverflow import flowio
from recoverflow.cli import main
from recoverflow.datasynth import generate, stage_recipes
from recoverflow.netblocks import ModelConfig, convex_upsample
from recoverflow.profiler import profile
from recoverflow.trainer import (
    Stage,
    StagePlan,
    cut_off,
    dump_plan,
    load_model,
    new_train_state,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    plan = StagePlan([Stage("rigid", 1)], ModelConfig(iterations=2))
    active = new_train_state(plan, 0)
    removed = new_train_state(plan, 0)
    cut_off(removed)
    return save_checkpoint(active, root / "active.ckpt"), save_checkpoint(removed, root / "removed.ckpt")


@pytest.fixture(scope="module")
def frame_pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("frames")
    s = generate(stage_recipes((128, 192))[1], 0)
    flowio.save_png(s.frame1, root / "a.png")
    flowio.save_png(s.frame2, root / "b.png")
    odd = flowio.Frame(s.frame1.data[:, :120, :180])
    flowio.save_png(odd, root / "odd.png")
    return root


def _smoke_plan(path):
    plan = StagePlan([Stage("rigid", 50, batch_size=2, crop=(32, 48), val_every=25)], ModelConfig(iterations=1),
                     val_samples=2)
    dump_plan(plan, path)
    return path


def test_train_smoke_and_replay(tmp_path):
    plan = _smoke_plan(tmp_path / "plan.yaml")
    assert main(["train", "--plan", str(plan), "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["train", "--plan", str(plan), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    rows_a = list(csv.DictReader(open(tmp_path / "a" / "train_log.csv")))
    rows_b = list(csv.DictReader(open(tmp_path / "b" / "train_log.csv")))
    assert len(rows_a) == 50
    assert list(rows_a[0]) == ["step", "stage", "mode", "p", "lr", "loss", "val_epe"]
    assert [r["loss"] for r in rows_a] == [r["loss"] for r in rows_b]
    assert (tmp_path / "a" / "checkpoints" / "final.ckpt").exists()
    assert json.loads((tmp_path / "a" / "run.json").read_text())["seed"] == 4


def test_invalid_plan_exits_2_citing_irreversibility(tmp_path, capsys):
    plan = StagePlan([Stage("rigid", 5), Stage("chairs", 5), Stage("things", 5)])
    d = plan.to_dict()
    d["stages"][1]["mode_transition"] = "cut_off"
    d["stages"][2]["mode_transition"] = "cut_off"
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(d))
    assert main(["train", "--plan", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert "irreversible" in capsys.readouterr().err


def test_unknown_recipe_and_missing_checkpoint_exit_2(tmp_path):
    assert main(["eval", "--oracle", "--recipe", "nope", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 2


def test_eval_oracle_is_all_zero(tmp_path):
    assert main(["eval", "--oracle", "--samples", "3", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert len(rows) == 4
    for row in rows:
        for key, value in row.items():
            if key.startswith("epe_") and value != "nan":
                assert float(value) == 0.0


def test_eval_checkpoint_runs(tmp_path, checkpoints):
    assert main(["eval", "--checkpoint", str(checkpoints[1]), "--samples", "2", "--out", str(tmp_path)]) == 0
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    assert agg["count_total"] == 2 * 64 * 96 and agg["epe_total"] > 0


def test_sweep_writes_five_rows(tmp_path, checkpoints):
    args = ["sweep", "--checkpoint", str(checkpoints[0]), "--iters-list", "0,1,2,4,8", "--samples", "2"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [int(r["iterations"]) for r in rows] == [0, 1, 2, 4, 8]
    assert (tmp_path / "sweep.png").exists()


def test_profile_two_csvs(tmp_path):
    assert main(["profile", "--resolutions", "256x256,512x512", "--out", str(tmp_path)]) == 0
    for mode, nonzero in (("active", True), ("removed", False)):
        rows = [r for r in csv.reader(open(tmp_path / f"profile_{mode}.csv")) if r and not r[0].startswith("#")]
        cv = [float(r[4]) for r in rows[1:] if r[3] == "cost-volume"]
        assert len(cv) == 2 and all((v > 0) == nonzero for v in cv)


def test_profile_bad_resolution_exits_2(tmp_path):
    assert main(["profile", "--resolutions", "100x100", "--out", str(tmp_path)]) == 2


def test_predict_removed_with_verification(tmp_path, checkpoints, frame_pair):
    out = tmp_path / "f.flo"
    args = ["predict", str(checkpoints[1]), str(frame_pair / "a.png"), str(frame_pair / "b.png"), str(out)]
    assert main(args + ["--verify-removed"]) == 0
    counters = json.loads(out.with_suffix(".counters.json").read_text())
    assert counters.get("correlate_calls", 0) == 0
    assert flowio.read_flo(out).shape == (128, 192)
    assert out.with_suffix(".png").exists()


def test_verify_removed_rejects_active_checkpoint(tmp_path, checkpoints, frame_pair):
    args = ["predict", str(checkpoints[0]), str(frame_pair / "a.png"), str(frame_pair / "b.png"),
            str(tmp_path / "f.flo"), "--verify-removed"]
    assert main(args) == 3


def test_predict_zero_iterations_is_initial_flow(tmp_path, checkpoints, frame_pair):
    out = tmp_path / "f.flo"
    args = ["predict", str(checkpoints[0]), str(frame_pair / "a.png"), str(frame_pair / "b.png"), str(out)]
    assert main(args + ["--iters", "0"]) == 0
    model = load_model(checkpoints[0]).eval()
    f1 = torch.from_numpy(flowio.load_png(frame_pair / "a.png").data)[None]
    f2 = torch.from_numpy(flowio.load_png(frame_pair / "b.png").data)[None]
    with torch.no_grad():
        ctx = model.context(f1, f2)
        expected = convex_upsample(ctx.flow0, model.upmask(ctx.hidden0))[0].numpy()
    np.testing.assert_allclose(flowio.read_flo(out).uv, expected, atol=1e-5)


def test_predict_downsample_cuts_flops_by_predicted_factor(tmp_path, checkpoints, frame_pair):
    base = ["predict", str(checkpoints[0]), str(frame_pair / "a.png"), str(frame_pair / "b.png")]
    assert main(base + [str(tmp_path / "full.flo")]) == 0
    assert main(base + [str(tmp_path / "half.flo"), "--downsample"]) == 0
    full = json.loads((tmp_path / "full.counters.json").read_text())["total_flops"]
    half = json.loads((tmp_path / "half.counters.json").read_text())["total_flops"]
    cfg = ModelConfig(iterations=8)  # medium backbone default
    predicted = profile(cfg, 128, 192).total_flops / profile(cfg, 64, 96).total_flops
    assert full / half >= predicted
    assert flowio.read_flo(tmp_path / "half.flo").shape == (128, 192)


def test_predict_size_mismatch_exits_2(tmp_path, checkpoints, frame_pair):
    args = ["predict", str(checkpoints[0]), str(frame_pair / "a.png"), str(frame_pair / "odd.png"),
            str(tmp_path / "f.flo")]
    assert main(args) == 2


def test_predict_odd_size_is_padded_and_cropped(tmp_path, checkpoints, frame_pair):
    out = tmp_path / "f.flo"
    args = ["predict", str(checkpoints[1]), str(frame_pair / "odd.png"), str(frame_pair / "odd.png"), str(out)]
    assert main(args + ["--iters", "1"]) == 0
    assert flowio.read_flo(out).shape == (120, 180)


def test_export_data(tmp_path):
    assert main(["export-data", "--recipe", "chairs", "--count", "2", "--out", str(tmp_path)]) == 0
    d = tmp_path / "chairs_000001"
    s = generate(stage_recipes()[1], 1)
    assert np.array_equal(flowio.read_flo(d / "flow.flo").uv, s.gt_flow.uv)
    assert (d / "frame1.png").exists() and (d / "occlusion.png").exists()
