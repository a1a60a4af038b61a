"""Context-network trunks and the per-frame feature encoder.

Every trunk maps an input at (H, W) to features at (H/8, W/8). The three
families are reduced in depth and width so they train on a CPU, but keep the
block types and stride placement of their full-size counterparts.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(channels), channels)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with an identity shortcut (1x1 projection when the shape changes)."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm_fn=norm):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = norm_fn(cout)
        self.norm2 = norm_fn(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride), norm_fn(cout))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(skip + y)


class ResNetTrunk(nn.Module):
    """Stem plus the first three residual stages; the third keeps stride 1."""

    def __init__(self, cin: int = 6, widths=(16, 32, 48, 80)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Sequential(nn.Conv2d(cin, w0, 3, stride=2, padding=1), norm(w0), nn.ReLU())
        self.layer1 = nn.Sequential(ResidualBlock(w0, w1, 2), ResidualBlock(w1, w1))
        self.layer2 = nn.Sequential(ResidualBlock(w1, w2, 2), ResidualBlock(w2, w2))
        self.layer3 = nn.Sequential(ResidualBlock(w2, w3, 1), ResidualBlock(w3, w3))
        self.out_channels = w3

    def forward(self, x):
        return self.layer3(self.layer2(self.layer1(self.stem(x))))


class InvertedResidual(nn.Module):
    """Expand (1x1), depthwise (k x k), project (1x1); residual when shapes allow."""

    def __init__(self, cin: int, expand: int, cout: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            nn.Conv2d(cin, expand, 1),
            norm(expand),
            nn.Hardswish(),
            nn.Conv2d(expand, expand, kernel, stride=stride, padding=kernel // 2, groups=expand),
            norm(expand),
            nn.Hardswish(),
            nn.Conv2d(expand, cout, 1),
            norm(cout),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class MobileTrunk(nn.Module):
    # (expand, out, kernel, stride); the last downsampling block is kept at stride 1
    SETTINGS = (
        (32, 16, 3, 1),
        (48, 24, 3, 2),
        (72, 24, 3, 1),
        (72, 40, 5, 2),
        (120, 40, 5, 1),
        (160, 56, 3, 1),
        (224, 56, 3, 1),
    )

    def __init__(self, cin: int = 6):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(cin, 16, 3, stride=2, padding=1), norm(16), nn.Hardswish())
        blocks, c = [], 16
        for expand, out, k, s in self.SETTINGS:
            blocks.append(InvertedResidual(c, expand, out, k, s))
            c = out
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = c

    def forward(self, x):
        return self.blocks(self.stem(x))


class LayerNorm2d(nn.Module):
    """Per-pixel normalization over channels with a learned per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, expansion: int = 4, layer_scale: float = 1e-1):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = LayerNorm2d(dim)
        self.pw1 = nn.Conv2d(dim, expansion * dim, 1)
        self.pw2 = nn.Conv2d(expansion * dim, dim, 1)
        self.gamma = nn.Parameter(torch.full((dim,), layer_scale))

    def forward(self, x):
        y = self.pw2(F.gelu(self.pw1(self.norm(self.dwconv(x)))))
        return x + self.gamma[:, None, None] * y


class ConvNeXtTrunk(nn.Module):
    """Patchify stem (stride 4), one stride-2 downsample, then a stride-1 transition."""

    def __init__(self, cin: int = 6, dims=(48, 96, 128), depths=(2, 2, 2)):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(cin, dims[0], 4, stride=4), LayerNorm2d(dims[0]))
        self.stage1 = nn.Sequential(*[ConvNeXtBlock(dims[0]) for _ in range(depths[0])])
        self.down1 = nn.Sequential(LayerNorm2d(dims[0]), nn.Conv2d(dims[0], dims[1], 2, stride=2))
        self.stage2 = nn.Sequential(*[ConvNeXtBlock(dims[1]) for _ in range(depths[1])])
        self.down2 = nn.Sequential(LayerNorm2d(dims[1]), nn.Conv2d(dims[1], dims[2], 3, padding=1))
        self.stage3 = nn.Sequential(*[ConvNeXtBlock(dims[2]) for _ in range(depths[2])])
        self.out_channels = dims[2]

    def forward(self, x):
        x = self.stage1(self.stem(x))
        x = self.stage2(self.down1(x))
        return self.stage3(self.down2(x))


TRUNKS = {"small": MobileTrunk, "medium": ResNetTrunk, "large": ConvNeXtTrunk}


class FeatureEncoder(nn.Module):
    """Per-frame encoder feeding the correlation; weights shared between the two frames."""

    def __init__(self, out_dim: int = 64, widths=(16, 24, 40)):
        super().__init__()
        w0, w1, w2 = widths
        inorm = lambda c: nn.InstanceNorm2d(c)  # noqa: E731
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, stride=2, padding=1), inorm(w0), nn.ReLU())
        self.layer1 = ResidualBlock(w0, w1, 2, norm_fn=inorm)
        self.layer2 = ResidualBlock(w1, w2, 2, norm_fn=inorm)
        self.proj = nn.Conv2d(w2, out_dim, 1)

    def forward(self, x):
        return self.proj(self.layer2(self.layer1(self.stem(x))))
