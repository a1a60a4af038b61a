"""Losses, the one-cycle schedule, staged training with cost-volume removal, and checkpoints."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .costvolume import ContractError, CostVolumeMode
from .datasynth import AugmentPolicy, Sample, SceneRecipe, augment, generate, recipe_by_name
from .flowio import FlowField, Frame
from .netblocks import ModelConfig, PredictionBundle, RecoverFlow
from .seeding import derive_seed

TRANSITIONS = ("keep", "begin_fade", "cut_off")
LOG_COLUMNS = ("step", "stage", "mode", "p", "lr", "loss", "val_epe")
WARMUP_FRACTION = 0.05
CLIP_NORM = 1.0
CHECKPOINT_FORMAT = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class PlanError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# --- losses ------------------------------------------------------------------


def _as_batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def laplace_mixture_loss(pred, params, gt, valid=None) -> torch.Tensor:
    """Mean negative log-likelihood of a two-component Laplace mixture.

    ``params`` carries (alpha logit, log b1, log b2) along its channel axis.
    ``gt`` is a flow tensor or a :class:`FlowField` (whose mask is then used).
    The mean runs over valid pixels and both flow channels.
    """
    if isinstance(gt, FlowField):
        valid = torch.from_numpy(gt.valid) if valid is None else valid
        gt = torch.from_numpy(gt.uv).to(pred.dtype)
    pred, params, gt = _as_batched(pred), _as_batched(params), _as_batched(gt)
    if valid is None:
        valid = torch.ones(gt.shape[0], *gt.shape[-2:], dtype=torch.bool)
    valid = valid.reshape(gt.shape[0], 1, *gt.shape[-2:]).to(torch.bool)
    n = int(valid.sum()) * gt.shape[1]
    if n == 0:
        raise ContractError("loss needs at least one valid pixel")
    err = (pred - gt).abs()
    logit, s1, s2 = params[:, 0:1], params[:, 1:2], params[:, 2:3]
    log_half = math.log(0.5)
    t1 = F.logsigmoid(logit) + log_half - s1 - err * torch.exp(-s1)
    t2 = F.logsigmoid(-logit) + log_half - s2 - err * torch.exp(-s2)
    nll = -torch.logaddexp(t1, t2)
    return torch.where(valid, nll, torch.zeros_like(nll)).sum() / n


def sequence_weights(n_iter: int, gamma: float) -> list[float]:
    """Weight of term i is gamma^(N - i) for i = 0..N."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return [gamma ** (n_iter - i) for i in range(n_iter + 1)]


def sequence_loss(bundle: PredictionBundle, gt, valid=None, gamma: float = 0.8) -> torch.Tensor:
    flows, params = bundle.per_iteration_flows, bundle.per_iteration_params
    weights = sequence_weights(len(flows) - 1, gamma)
    return sum(w * laplace_mixture_loss(f, p, gt, valid) for w, f, p in zip(weights, flows, params))


def make_schedule(total_steps: int, warmup_steps: int, peak_lr: float) -> Callable[[int], float]:
    """Linear one-cycle: 0 -> peak over warmup, then linearly down to 0 at ``total_steps``."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")

    def lr(step: int) -> float:
        if step < warmup_steps:
            return peak_lr * step / warmup_steps
        return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))

    return lr


# --- plans -------------------------------------------------------------------


@dataclass
class Stage:
    recipe: str
    steps: int
    batch_size: int = 4
    peak_lr: float = 4e-4
    weight_decay: float = 1e-4
    crop: tuple[int, int] = (64, 96)
    mode_transition: str = "keep"
    gamma: float = 0.8
    val_every: int = 500
    # training draws sample indices from [0, pool_size); None means unbounded
    pool_size: int | None = 4096

    def __post_init__(self) -> None:
        self.crop = tuple(int(c) for c in self.crop)

    @property
    def warmup_steps(self) -> int:
        return int(round(WARMUP_FRACTION * self.steps))


@dataclass
class StagePlan:
    stages: list[Stage]
    model: ModelConfig = field(default_factory=ModelConfig)
    resolution: tuple[int, int] = (64, 96)
    val_samples: int = 64
    augment: bool = True

    def __post_init__(self) -> None:
        self.resolution = tuple(int(r) for r in self.resolution)
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    def validate(self) -> "StagePlan":
        if not self.stages:
            raise PlanError("plan has no stages")
        for i, s in enumerate(self.stages):
            try:
                recipe_by_name(s.recipe, self.resolution)
            except KeyError as exc:
                raise PlanError(f"stage {i}: {exc.args[0]}") from None
            if s.mode_transition not in TRANSITIONS:
                raise PlanError(f"stage {i}: unknown mode_transition {s.mode_transition!r}")
            if s.steps < 1 or s.batch_size < 1:
                raise PlanError(f"stage {i}: steps and batch_size must be >= 1")
            ch, cw = s.crop
            if ch % 8 or cw % 8 or ch < 8 or cw < 8:
                raise PlanError(f"stage {i}: crop {s.crop} must be positive multiples of 8")
            if ch > self.resolution[0] or cw > self.resolution[1]:
                raise PlanError(f"stage {i}: crop {s.crop} exceeds resolution {self.resolution}")
        moves = [i for i, s in enumerate(self.stages) if s.mode_transition != "keep"]
        if len(moves) > 1:
            listed = ", ".join(f"{self.stages[i].mode_transition} at stage {i}" for i in moves)
            raise PlanError(
                f"plan has {len(moves)} cost-volume transitions ({listed}); removal is "
                "irreversible, so at most one begin_fade or cut_off is allowed"
            )
        if self.model.mode.kind == "fading":
            raise PlanError("initial model mode must be active or removed; fading is set by begin_fade")
        if moves and not self.model.mode.uses_volume:
            raise PlanError(
                f"stage {moves[0]} requests {self.stages[moves[0]].mode_transition} but the model "
                "starts without a cost volume; removal is irreversible"
            )
        return self

    def mode_trace(self) -> list[tuple[CostVolumeMode, CostVolumeMode]]:
        """(mode at the first step, mode at the last step) per stage."""
        mode = self.model.mode
        trace = []
        for s in self.stages:
            if s.mode_transition == "cut_off":
                mode = CostVolumeMode.removed()
            if s.mode_transition == "begin_fade":
                trace.append((CostVolumeMode.fading(0.0), CostVolumeMode.fading(1.0)))
                mode = CostVolumeMode.removed()
            else:
                trace.append((mode, mode))
        return trace

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "resolution": list(self.resolution),
            "val_samples": self.val_samples,
            "augment": self.augment,
            "stages": [{**dataclasses.asdict(s), "crop": list(s.crop)} for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise PlanError(str(exc)) from None


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; integer path parts index lists and ``*`` maps over them."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise PlanError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        _assign(tree, key.split("."), _parse_scalar(value), item)
    return tree


def _assign(node, path: list[str], value, item: str) -> None:
    head, rest = path[0], path[1:]
    if isinstance(node, list):
        targets = range(len(node)) if head == "*" else [_list_index(node, head, item)]
        for i in targets:
            if rest:
                _assign(node[i], rest, value, item)
            else:
                node[i] = value
        return
    if not isinstance(node, dict):
        raise PlanError(f"override {item!r}: cannot descend into {node!r}")
    if rest:
        node.setdefault(head, {})
        _assign(node[head], rest, value, item)
    else:
        node[head] = value


def _list_index(node: list, head: str, item: str) -> int:
    try:
        i = int(head)
    except ValueError:
        raise PlanError(f"override {item!r}: {head!r} is not a list index") from None
    if not 0 <= i < len(node):
        raise PlanError(f"override {item!r}: index {i} out of range")
    return i


def load_plan(path, overrides: Sequence[str] = ()) -> StagePlan:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise PlanError(f"{path}: {exc}") from None
    if not isinstance(tree, dict):
        raise PlanError(f"{path}: expected a mapping at top level")
    return StagePlan.from_dict(apply_overrides(tree, overrides)).validate()


def dump_plan(plan: StagePlan, path) -> None:
    Path(path).write_text(yaml.safe_dump(plan.to_dict(), sort_keys=False))


def default_plan(total_steps: int = 15_000, cut_off_stage: int | None = 2, fade: bool = False) -> StagePlan:
    """Four-stage plan; the cost volume is cut (or faded) at ``cut_off_stage`` (0-based)."""
    fractions = (0.15, 0.2, 0.325, 0.325)
    names = ("rigid", "chairs", "things", "mixed")
    stages = [Stage(n, max(1, int(round(f * total_steps)))) for n, f in zip(names, fractions)]
    model = ModelConfig()
    if cut_off_stage == 0 and not fade:
        model = model.replace(mode=CostVolumeMode.removed())
    elif cut_off_stage is not None:
        stages[cut_off_stage].mode_transition = "begin_fade" if fade else "cut_off"
    return StagePlan(stages, model).validate()


# --- data --------------------------------------------------------------------


def crop_sample(sample: Sample, top: int, left: int, size: tuple[int, int]) -> Sample:
    h, w = size
    rows, cols = slice(top, top + h), slice(left, left + w)
    return Sample(
        Frame(sample.frame1.data[:, rows, cols]),
        Frame(sample.frame2.data[:, rows, cols]),
        FlowField(sample.gt_flow.uv[:, rows, cols], sample.gt_flow.valid[rows, cols]),
        sample.occlusion[rows, cols],
        sample.rigid[rows, cols],
    )


def stack_samples(samples: Sequence[Sample]):
    f1 = torch.from_numpy(np.stack([s.frame1.data for s in samples]))
    f2 = torch.from_numpy(np.stack([s.frame2.data for s in samples]))
    flow = torch.from_numpy(np.stack([s.gt_flow.uv for s in samples]))
    valid = torch.from_numpy(np.stack([s.gt_flow.valid for s in samples]))
    return f1, f2, flow, valid


class SampleStream:
    """Training batches as a pure function of (seed, stage, step).

    Sample indices, augmentation draws, and crop offsets are all derived by
    hashing, so any step can be replayed without iterating the ones before it.
    Rendered samples are memoised per index.
    """

    def __init__(
        self,
        recipe: SceneRecipe,
        seed: int,
        stage_index: int,
        crop: tuple[int, int],
        policy: AugmentPolicy,
        pool_size: int | None = 4096,
    ):
        self.recipe = recipe
        self.seed = seed
        self.stage_index = stage_index
        self.crop = tuple(crop)
        self.policy = policy
        self.pool_size = pool_size
        self._cache: dict[int, Sample] = {}

    def sample_index(self, step: int, slot: int) -> int:
        h = derive_seed(self.seed, "data", self.stage_index, step, slot)
        return h % self.pool_size if self.pool_size else h % (2**31)

    def sample(self, index: int) -> Sample:
        if self.pool_size is None:
            return generate(self.recipe, index)
        if index not in self._cache:
            self._cache[index] = generate(self.recipe, index)
        return self._cache[index]

    def item(self, step: int, slot: int) -> Sample:
        s = self.sample(self.sample_index(step, slot))
        s = augment(s, self.policy, derive_seed(self.seed, "augment", self.stage_index, step, slot))
        H, W = self.recipe.resolution
        ch, cw = self.crop
        if (ch, cw) != (H, W):
            rng = np.random.default_rng(derive_seed(self.seed, "crop", self.stage_index, step, slot))
            s = crop_sample(s, int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1)), (ch, cw))
        return s

    def batch(self, step: int, batch_size: int):
        return stack_samples([self.item(step, i) for i in range(batch_size)])


def validation_set(recipe: SceneRecipe, n: int = 64) -> list[Sample]:
    """Fixed held-out samples of ``recipe`` (disjoint from the training stream)."""
    held = recipe.heldout()
    return [generate(held, i) for i in range(n)]


@torch.no_grad()
def batched_epe(model, samples: Sequence[Sample], iters=None, chunk: int = 16, generator=None) -> float:
    """Mean EPE over all valid pixels of equally sized samples."""
    total, count = 0.0, 0
    for i in range(0, len(samples), chunk):
        f1, f2, flow, valid = stack_samples(samples[i : i + chunk])
        pred = model(f1, f2, iters=iters, generator=generator).final_flow
        err = torch.linalg.vector_norm((pred - flow).double(), dim=1)
        total += float(err[valid].sum())
        count += int(valid.sum())
    return total / count


# --- training state ----------------------------------------------------------


@dataclass
class TrainState:
    model: RecoverFlow
    optimizer: torch.optim.AdamW
    seed: int
    global_step: int = 0
    stage_index: int = 0
    step_in_stage: int = 0

    @property
    def mode(self) -> CostVolumeMode:
        return self.model.mode

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def make_optimizer(model: RecoverFlow, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=weight_decay)


def new_train_state(plan: StagePlan, seed: int) -> TrainState:
    model = RecoverFlow(plan.model.replace(seed=seed))
    return TrainState(model, make_optimizer(model, plan.stages[0].weight_decay), seed)


def cut_off(state: TrainState) -> list[str]:
    """Remove the feature encoder and its optimizer moments; other moments are kept."""
    encoder = state.model.encoder
    dropped = {id(p) for p in encoder.parameters()} if encoder is not None else set()
    names = state.model.prune_feature_network()
    opt = state.optimizer
    for group in opt.param_groups:
        kept = []
        for p in group["params"]:
            if id(p) in dropped:
                opt.state.pop(p, None)
            else:
                kept.append(p)
        group["params"] = kept
    return names


def fade_probability(step: int, steps: int) -> float:
    """Linear ramp with p = 0 at the first step and p = 1 at the last."""
    return 1.0 if steps <= 1 else step / (steps - 1)


def _fade_generator(seed: int, *parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, "fade", *parts))


def run_stage(
    state: TrainState,
    plan: StagePlan,
    stream: SampleStream | None = None,
    val_set: Sequence[Sample] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run (or resume) stage ``state.stage_index`` of ``plan`` and advance to the next stage."""
    idx = state.stage_index
    stage = plan.stages[idx]
    model, opt = state.model, state.optimizer
    if stage.mode_transition != "keep" and not model.mode.uses_volume and state.step_in_stage == 0:
        raise PlanError(f"stage {idx}: {stage.mode_transition} on a model without a cost volume; removal is irreversible")
    if stage.mode_transition == "cut_off" and state.step_in_stage == 0:
        cut_off(state)
    if stream is None:
        recipe = recipe_by_name(stage.recipe, plan.resolution)
        policy = AugmentPolicy.training() if plan.augment else AugmentPolicy.none()
        stream = SampleStream(recipe, state.seed, idx, stage.crop, policy, stage.pool_size)
    for group in opt.param_groups:
        group["weight_decay"] = stage.weight_decay
    schedule = make_schedule(stage.steps, stage.warmup_steps, stage.peak_lr)
    fading = stage.mode_transition == "begin_fade"
    model.train()
    for k in range(state.step_in_stage, stage.steps):
        generator = None
        if fading:
            model.set_mode(CostVolumeMode.fading(fade_probability(k, stage.steps)))
            generator = _fade_generator(state.seed, idx, k)
        lr = schedule(k)
        for group in opt.param_groups:
            group["lr"] = lr
        f1, f2, flow, valid = stream.batch(k, stage.batch_size)
        bundle = model(f1, f2, generator=generator)
        loss = sequence_loss(bundle, flow, valid, stage.gamma)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), CLIP_NORM)
        opt.step()

        val = None
        if val_set is not None and ((k + 1) % stage.val_every == 0 or k == stage.steps - 1):
            val = batched_epe(model, val_set, generator=_fade_generator(state.seed, "val"))
            model.train()
        mode = model.mode
        row = {
            "step": state.global_step,
            "stage": idx,
            "mode": str(mode),
            "p": mode.p if mode.kind == "fading" else (1.0 if mode.kind == "removed" else 0.0),
            "lr": lr,
            "loss": float(loss.detach()),
            "val_epe": val,
        }
        state.global_step += 1
        state.step_in_stage = k + 1
        if on_step is not None:
            on_step(row)
    if fading:
        # the ramp ended at p = 1; the encoder is now inert and is dropped
        cut_off(state)
    state.stage_index = idx + 1
    state.step_in_stage = 0
    return state


class CsvLog:
    def __init__(self, path, resume_step: int | None = None):
        self.path = Path(path)
        rows = []
        if resume_step is not None and self.path.exists():
            with open(self.path, newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) < resume_step]
        self._f = open(self.path, "w", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=LOG_COLUMNS)
        self._w.writeheader()
        self._w.writerows(rows)

    def __call__(self, row: dict) -> None:
        row = dict(row)
        row["val_epe"] = "" if row["val_epe"] is None else f"{row['val_epe']:.6f}"
        row["lr"] = f"{row['lr']:.8g}"
        row["loss"] = repr(row["loss"])
        self._w.writerow(row)

    def close(self) -> None:
        self._f.close()


def train(
    plan: StagePlan,
    seed: int,
    out_dir,
    resume: bool = False,
    state: TrainState | None = None,
    stop_after_stage: int | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run every remaining stage of ``plan``; checkpoints land in ``out_dir/checkpoints``."""
    plan.validate()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume and state is None:
        latest = latest_checkpoint(ckpt_dir)
        if latest is not None:
            state = load_checkpoint(latest)
    if state is None:
        state = new_train_state(plan, seed)
    dump_plan(plan, out / "plan.yaml")
    log = CsvLog(out / "train_log.csv", resume_step=state.global_step)

    def on_step(row):
        log(row)
        if progress is not None:
            progress(row)

    try:
        last = len(plan.stages) - 1 if stop_after_stage is None else stop_after_stage
        while state.stage_index <= last:
            stage = plan.stages[state.stage_index]
            val_set = validation_set(recipe_by_name(stage.recipe, plan.resolution), plan.val_samples)
            run_stage(state, plan, val_set=val_set, on_step=on_step)
            save_checkpoint(state, ckpt_dir / f"stage{state.stage_index - 1}.ckpt")
        if state.stage_index == len(plan.stages):
            save_checkpoint(state, ckpt_dir / "final.ckpt")
    finally:
        log.close()
    return state


# --- checkpoints -------------------------------------------------------------


def _torch_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(state: TrainState, path) -> Path:
    """Single zip file: ``manifest.json`` plus serialised parameters and optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = state.model.state_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "mode": str(state.mode),
        "seed": state.seed,
        "stage_index": state.stage_index,
        "step_in_stage": state.step_in_stage,
        "global_step": state.global_step,
        "tensors": {k: list(v.shape) for k, v in params.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        _write_entry(zf, "model.pt", _torch_bytes(params))
        _write_entry(zf, "optimizer.pt", _torch_bytes(state.optimizer.state_dict()))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None


_ARCH_FIELDS = ("backbone", "feature_dim", "context_dim", "hidden_dim", "levels", "radius")


def _check_compatible(manifest: dict, expected: ModelConfig, path) -> None:
    saved = ModelConfig.from_dict(manifest["config"])
    if saved.mode.uses_volume != expected.mode.uses_volume:
        raise CheckpointError(
            f"{path}: checkpoint mode {saved.mode} is incompatible with requested mode {expected.mode}"
        )
    for name in _ARCH_FIELDS:
        if getattr(saved, name) != getattr(expected, name):
            raise CheckpointError(
                f"{path}: {name} is {getattr(saved, name)!r} in the checkpoint "
                f"but {getattr(expected, name)!r} was requested"
            )


def load_model(path, expected: ModelConfig | None = None) -> RecoverFlow:
    """Rebuild the model recorded in a checkpoint. A removed-mode checkpoint never builds an encoder."""
    manifest = read_manifest(path)
    if expected is not None:
        _check_compatible(manifest, expected, path)
    cfg = ModelConfig.from_dict(manifest["config"])
    model = RecoverFlow(cfg)
    with zipfile.ZipFile(path) as zf:
        params = torch.load(io.BytesIO(zf.read("model.pt")), weights_only=True)
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the recorded architecture: {exc}") from None
    return model


def load_checkpoint(path, expected: ModelConfig | None = None) -> TrainState:
    manifest = read_manifest(path)
    model = load_model(path, expected)
    opt = make_optimizer(model)
    with zipfile.ZipFile(path) as zf:
        opt.load_state_dict(torch.load(io.BytesIO(zf.read("optimizer.pt")), weights_only=True))
    return TrainState(
        model,
        opt,
        int(manifest["seed"]),
        int(manifest["global_step"]),
        int(manifest["stage_index"]),
        int(manifest["step_in_stage"]),
    )


def latest_checkpoint(directory) -> Path | None:
    best, best_step = None, -1
    for p in sorted(Path(directory).glob("*.ckpt")):
        step = read_manifest(p)["global_step"]
        if step > best_step:
            best, best_step = p, step
    return best
