"""Model assembly: context network, feature encoder, recurrent refinement, convex upsampling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from . import instrument
from .backbones import TRUNKS, FeatureEncoder
from .costvolume import ContractError, CostVolumeMode, apply_mode, correlate, lookup
from .seeding import derive_seed

UPSAMPLE = 8
N_MIXTURE = 3  # alpha logit, log-scale 1, log-scale 2
CONVEX_FLOPS_PER_OUTPUT = 2 * 9  # nine multiply-accumulates per upsampled value
DEFAULT_ITERS = {"small": 4, "medium": 8, "large": 4}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "medium"
    feature_dim: int = 64
    context_dim: int = 64
    hidden_dim: int = 64
    iterations: int = 4
    levels: int = 4
    radius: int = 4
    mode: CostVolumeMode = field(default_factory=CostVolumeMode.active)
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.mode, str):
            self.mode = CostVolumeMode.parse(self.mode)
        if self.backbone not in TRUNKS:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {sorted(TRUNKS)}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("feature_dim", "context_dim", "hidden_dim"):
            if getattr(self, name) < 8:
                raise ConfigError(f"{name} must be >= 8")
        if self.levels < 1 or self.radius < 0:
            raise ConfigError("levels must be >= 1 and radius >= 0")

    @property
    def motion_channels(self) -> int:
        return self.levels * (2 * self.radius + 1) ** 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = str(self.mode)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ContextOutput:
    context: torch.Tensor
    hidden0: torch.Tensor
    flow0: torch.Tensor
    params0: torch.Tensor


@dataclass
class RefinementState:
    hidden: torch.Tensor
    flow: torch.Tensor
    iteration: int = 0


@dataclass
class PredictionBundle:
    """Full-resolution flows, one per refinement state (index 0 is the context prediction)."""

    per_iteration_flows: list[torch.Tensor]
    per_iteration_params: list[torch.Tensor]
    coarse_flows: list[torch.Tensor]

    @property
    def final_flow(self) -> torch.Tensor:
        return self.per_iteration_flows[-1]

    @property
    def uncertainty(self) -> torch.Tensor:
        return self.per_iteration_params[-1]


class ContextNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = TRUNKS[cfg.backbone](cin=6)
        self.split = (cfg.context_dim, cfg.hidden_dim, 2, N_MIXTURE)
        self.head = nn.Conv2d(self.trunk.out_channels, sum(self.split), 1)

    def forward(self, frame1, frame2) -> ContextOutput:
        x = torch.cat([2 * frame1 - 1, 2 * frame2 - 1], dim=1)
        ctx, hid, flow0, params0 = torch.split(self.head(self.trunk(x)), self.split, dim=1)
        return ContextOutput(F.relu(ctx), torch.tanh(hid), flow0, bound_mixture(params0))


def bound_mixture(raw: torch.Tensor) -> torch.Tensor:
    # keep the log-scales in a trainable range; the alpha logit is left free
    logit, s1, s2 = raw.split(1, dim=1)
    return torch.cat([logit, s1.clamp(-3.0, 3.0), s2.clamp(0.0, 8.0)], dim=1)


class RefinementUnit(nn.Module):
    """Convolutional GRU over context, encoded motion features, and the current flow."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hd, cd = cfg.hidden_dim, cfg.context_dim
        # first layer touching the cost volume; zeroed inputs make its weights inert
        self.motion_in = nn.Conv2d(cfg.motion_channels, 64, 1)
        self.motion_mix = nn.Conv2d(64, 48, 3, padding=1)
        self.flow_in = nn.Conv2d(2, 16, 3, padding=1)
        self.flow_mix = nn.Conv2d(16, 16, 3, padding=1)
        self.encode = nn.Conv2d(48 + 16, 46, 3, padding=1)
        gru_in = hd + cd + 48
        self.convz = nn.Conv2d(gru_in, hd, 1)
        self.convr = nn.Conv2d(gru_in, hd, 1)
        self.convq = nn.Conv2d(gru_in, hd, 3, padding=1)
        self.head1 = nn.Conv2d(hd, 32, 3, padding=1)
        self.head2 = nn.Conv2d(32, 2 + N_MIXTURE, 3, padding=1)
        nn.init.zeros_(self.head2.weight)
        nn.init.zeros_(self.head2.bias)

    def forward(self, hidden, flow, context, motion_features):
        m = F.relu(self.motion_in(motion_features))
        m = F.relu(self.motion_mix(m))
        f = F.relu(self.flow_mix(F.relu(self.flow_in(flow))))
        motion = torch.cat([F.relu(self.encode(torch.cat([m, f], 1))), flow], 1)
        x = torch.cat([context, motion], 1)
        hx = torch.cat([hidden, x], 1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * hidden, x], 1)))
        hidden = (1 - z) * hidden + z * q
        out = self.head2(F.relu(self.head1(hidden)))
        return hidden, out[:, :2], bound_mixture(out[:, 2:])


class UpsampleMask(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(cfg.hidden_dim, 64, 3, padding=1)
        self.conv2 = nn.Conv2d(64, 9 * UPSAMPLE * UPSAMPLE, 1)

    def forward(self, hidden):
        return 0.25 * self.conv2(F.relu(self.conv1(hidden)))


def convex_upsample(x: torch.Tensor, weights: torch.Tensor, scale: float = UPSAMPLE) -> torch.Tensor:
    """8x upsampling: every fine pixel is a softmax-weighted mix of its parent's 3x3 neighbourhood.

    ``weights`` channel ``t*64 + sy*8 + sx`` scores tap ``t = (dy+1)*3 + (dx+1)`` for
    sub-pixel ``(sy, sx)``. Borders replicate, so constant fields stay constant.
    Values are multiplied by ``scale`` (8 converts grid units to pixels).
    """
    unbatched = x.dim() == 3
    if unbatched:
        x, weights = x.unsqueeze(0), weights.unsqueeze(0)
    b, c, h, w = x.shape
    u = UPSAMPLE
    mask = torch.softmax(weights.reshape(b, 9, u * u, h * w), dim=1).permute(0, 3, 2, 1)
    neigh = F.unfold(F.pad(scale * x, (1, 1, 1, 1), mode="replicate"), 3)
    neigh = neigh.reshape(b, c, 9, h * w).permute(0, 3, 2, 1)
    up = torch.matmul(mask, neigh)  # b, hw, u*u, c
    up = up.reshape(b, h, w, u, u, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, u * h, u * w)
    instrument.count("convex_flops", CONVEX_FLOPS_PER_OUTPUT * up.numel())
    return up[0] if unbatched else up


def build_context_network(cfg: ModelConfig) -> ContextNetwork:
    torch.manual_seed(derive_seed(cfg.seed, "context"))
    return ContextNetwork(cfg)


def build_feature_encoder(cfg: ModelConfig) -> FeatureEncoder:
    if not cfg.mode.uses_volume:
        raise ConfigError("the feature encoder cannot be constructed in removed mode")
    torch.manual_seed(derive_seed(cfg.seed, "encoder"))
    return FeatureEncoder(cfg.feature_dim)


def refinement_step(unit: RefinementUnit, state: RefinementState, context, motion_features):
    """One recurrent update; returns the new state and the step's mixture parameters."""
    hidden, delta, params = unit(state.hidden, state.flow, context, motion_features)
    return RefinementState(hidden, state.flow + delta, state.iteration + 1), params


class RecoverFlow(nn.Module):
    """Context, (optional) feature, and refinement branches wired for cost-volume removal."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.context = build_context_network(cfg)
        self.encoder = build_feature_encoder(cfg) if cfg.mode.uses_volume else None
        torch.manual_seed(derive_seed(cfg.seed, "refine"))
        self.refine = RefinementUnit(cfg)
        torch.manual_seed(derive_seed(cfg.seed, "upmask"))
        self.upmask = UpsampleMask(cfg)

    @property
    def mode(self) -> CostVolumeMode:
        return self.cfg.mode

    def set_mode(self, mode: CostVolumeMode) -> None:
        if not mode.uses_volume:
            self.prune_feature_network()
            return
        if self.encoder is None:
            raise ConfigError(f"cannot switch a pruned model back to {mode}")
        self.cfg = self.cfg.replace(mode=mode)

    def prune_feature_network(self) -> list[str]:
        """Drop the feature encoder for good; returns the removed parameter names."""
        names = [f"encoder.{n}" for n, _ in self.encoder.named_parameters()] if self.encoder else []
        self.encoder = None
        self.cfg = self.cfg.replace(mode=CostVolumeMode.removed())
        return names

    def forward(
        self,
        frame1: torch.Tensor,
        frame2: torch.Tensor,
        iters: int | None = None,
        generator: torch.Generator | None = None,
    ) -> PredictionBundle:
        if frame1.shape != frame2.shape:
            raise ContractError(f"frames differ in shape: {tuple(frame1.shape)} vs {tuple(frame2.shape)}")
        H, W = frame1.shape[-2:]
        if H % UPSAMPLE or W % UPSAMPLE:
            raise ContractError(f"frame size {H}x{W} is not divisible by {UPSAMPLE}")
        n_iter = self.cfg.iterations if iters is None else iters
        instrument.track(frame1)
        instrument.track(frame2)

        ctx = self.context(frame1, frame2)
        mode = self.cfg.mode
        pyramid = None
        if mode.uses_volume:
            if self.encoder is None:
                raise ConfigError("model has no feature encoder but mode requires one")
            fmap1, fmap2 = self.encoder(torch.cat([2 * frame1 - 1, 2 * frame2 - 1])).chunk(2)
            pyramid = correlate(fmap1, fmap2, self.cfg.levels, self.cfg.radius)
            del fmap1, fmap2

        b, _, h, w = ctx.flow0.shape
        state = RefinementState(ctx.hidden0, ctx.flow0, 0)
        flows, params, coarse = [], [], []

        def emit(hidden, flow, mixture):
            # one shared softmax pass upsamples flow (x8) and mixture parameters (x1)
            up = convex_upsample(torch.cat([UPSAMPLE * flow, mixture], 1), self.upmask(hidden), scale=1.0)
            flows.append(up[:, :2])
            params.append(up[:, 2:])
            coarse.append(flow)

        emit(state.hidden, state.flow, ctx.params0)
        zeros = None
        for _ in range(n_iter):
            flow_in = state.flow.detach()
            if pyramid is not None:
                motion = apply_mode(lookup(pyramid, flow_in), mode, generator)
            else:
                if zeros is None:
                    zeros = instrument.track(
                        frame1.new_zeros(b, self.cfg.motion_channels, h, w)
                    )
                motion = zeros
            state, step_params = refinement_step(
                self.refine, RefinementState(state.hidden, flow_in, state.iteration), ctx.context, motion
            )
            emit(state.hidden, state.flow, step_params)
        return PredictionBundle(flows, params, coarse)


def count_parameters(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())
