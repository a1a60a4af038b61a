"""Deterministic layered synthetic scenes with exact forward flow.

A scene is a textured background plus ``n_layers`` textured shapes, each with
its own motion. Frame 1 is the reference: every surface is parameterised by
its frame-1 position, so a surface point at ``x`` in frame 1 lands at
``motion(x)`` in frame 2 and the ground-truth flow is ``motion(x) - x``,
evaluated analytically. Frame 2 is rendered by inverting each motion.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .flowio import FlowField, Frame

MOTION_MODELS = ("global-rigid", "per-layer-affine", "per-layer-deforming")
TEXTURE_CUTOFF = {"smooth": 0.04, "mid": 0.07, "fine": 0.10}  # cycles per pixel
HELDOUT_OFFSET = 7_777_777


@dataclass(frozen=True)
class SceneRecipe:
    name: str
    resolution: tuple[int, int] = (64, 96)
    n_layers: int = 1
    motion_model: str = "global-rigid"
    max_displacement: float = 8.0
    texture_spectrum: str = "mid"
    occlusion_allowed: bool = True
    seed_base: int = 0
    max_rotation_deg: float = 3.0
    max_scale_change: float = 0.04
    # translations are drawn from [floor, 1] x their budget
    displacement_floor: float = 0.0
    # non-empty: each index draws one component recipe (a mixture distribution)
    components: tuple["SceneRecipe", ...] = field(default=())

    def __post_init__(self) -> None:
        h, w = self.resolution
        if h % 8 or w % 8 or h <= 0 or w <= 0:
            raise ValueError(f"resolution {self.resolution} must be positive multiples of 8")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.motion_model not in MOTION_MODELS:
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if self.texture_spectrum not in TEXTURE_CUTOFF:
            raise ValueError(f"unknown texture spectrum {self.texture_spectrum!r}")

    def heldout(self) -> "SceneRecipe":
        """Same distribution, disjoint random stream (for validation/test sets)."""
        return dataclasses.replace(self, seed_base=self.seed_base + HELDOUT_OFFSET)

    def with_resolution(self, resolution: tuple[int, int]) -> "SceneRecipe":
        comps = tuple(c.with_resolution(resolution) for c in self.components)
        return dataclasses.replace(self, resolution=tuple(resolution), components=comps)


@dataclass
class Sample:
    frame1: Frame
    frame2: Frame
    gt_flow: FlowField
    occlusion: np.ndarray
    rigid: np.ndarray


class Motion:
    """x' = c + A (x - c) + t + amp * sin(2 pi (k . x) + phase), per output axis."""

    def __init__(self, center, matrix, translation, amp=(0.0, 0.0), wavevec=None, phase=(0.0, 0.0)):
        self.c = np.asarray(center, dtype=np.float64)
        self.A = np.asarray(matrix, dtype=np.float64)
        self.Ainv = np.linalg.inv(self.A)
        self.t = np.asarray(translation, dtype=np.float64)
        self.amp = np.asarray(amp, dtype=np.float64)
        self.k = np.zeros((2, 2)) if wavevec is None else np.asarray(wavevec, dtype=np.float64)
        self.phase = np.asarray(phase, dtype=np.float64)

    @classmethod
    def identity(cls) -> "Motion":
        return cls((0.0, 0.0), np.eye(2), (0.0, 0.0))

    def _warp(self, x, y):
        if not self.amp.any():
            return 0.0, 0.0
        a0 = 2 * np.pi * (self.k[0, 0] * x + self.k[0, 1] * y) + self.phase[0]
        a1 = 2 * np.pi * (self.k[1, 0] * x + self.k[1, 1] * y) + self.phase[1]
        return self.amp[0] * np.sin(a0), self.amp[1] * np.sin(a1)

    def forward(self, x, y):
        dx, dy = x - self.c[0], y - self.c[1]
        wx, wy = self._warp(x, y)
        xo = self.c[0] + self.A[0, 0] * dx + self.A[0, 1] * dy + self.t[0] + wx
        yo = self.c[1] + self.A[1, 0] * dx + self.A[1, 1] * dy + self.t[1] + wy
        return xo, yo

    def inverse(self, xp, yp, iters: int = 12):
        def affine_inv(u, v):
            du, dv = u - self.c[0] - self.t[0], v - self.c[1] - self.t[1]
            return (
                self.c[0] + self.Ainv[0, 0] * du + self.Ainv[0, 1] * dv,
                self.c[1] + self.Ainv[1, 0] * du + self.Ainv[1, 1] * dv,
            )

        x, y = affine_inv(xp, yp)
        if not self.amp.any():
            return x, y
        # contraction: the sinusoidal term's Lipschitz constant is kept well below 1
        for _ in range(iters):
            wx, wy = self._warp(x, y)
            x, y = affine_inv(xp - wx, yp - wy)
        return x, y


class Shape:
    """Star-convex region: radius as a smooth function of angle around a centre."""

    def __init__(self, center, radius, harmonics, angle):
        self.c = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.harmonics = harmonics  # list of (order, amplitude, phase)
        self.angle = angle

    def contains(self, x, y):
        dx, dy = x - self.c[0], y - self.c[1]
        theta = np.arctan2(dy, dx) - self.angle
        r = np.full_like(theta, self.radius)
        for order, amp, phase in self.harmonics:
            r = r + self.radius * amp * np.cos(order * theta + phase)
        return dx * dx + dy * dy <= r * r


class Texture:
    """Periodic band-limited colour noise, sampled bilinearly with wrap-around."""

    def __init__(self, rng: np.random.Generator, shape, spectrum: str):
        h, w = shape
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        cutoff = TEXTURE_CUTOFF[spectrum]
        filt = np.exp(-0.5 * (fx**2 + fy**2) / cutoff**2)
        filt[0, 0] = 0.0
        lum = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((h, w))) * filt))
        lum /= lum.std() + 1e-12
        chroma = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((3, h, w))) * filt))
        chroma /= chroma.std() + 1e-12
        base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
        self.grid = np.clip(base + 0.16 * lum[None] + 0.05 * chroma, 0.0, 1.0)
        self.h, self.w = h, w

    def sample(self, x, y):
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx, fy = x - x0, y - y0
        x0 = x0.astype(np.int64) % self.w
        y0 = y0.astype(np.int64) % self.h
        x1 = (x0 + 1) % self.w
        y1 = (y0 + 1) % self.h
        g = self.grid
        return (
            g[:, y0, x0] * (1 - fx) * (1 - fy)
            + g[:, y0, x1] * fx * (1 - fy)
            + g[:, y1, x0] * (1 - fx) * fy
            + g[:, y1, x1] * fx * fy
        )


@dataclass
class _Layer:
    motion: Motion
    texture: Texture
    shape: Shape | None  # None for the background

    def covers_frame1(self, x, y):
        return np.ones_like(x, dtype=bool) if self.shape is None else self.shape.contains(x, y)

    def __post_init__(self) -> None:
        self.bbox2 = None
        if self.shape is not None:
            # frame-2 bounding box of the moved shape, padded for the warp amplitude
            reach = self.shape.radius * (1 + sum(a for _, a, _ in self.shape.harmonics))
            ang = np.linspace(0, 2 * np.pi, 64)
            bx, by = self.motion.forward(self.shape.c[0] + reach * np.cos(ang), self.shape.c[1] + reach * np.sin(ang))
            pad = 1.0 + np.abs(self.motion.amp).max(initial=0.0) * 2
            self.bbox2 = (bx.min() - pad, bx.max() + pad, by.min() - pad, by.max() + pad)

    def covers_frame2(self, xp, yp):
        if self.shape is None:
            return np.ones_like(xp, dtype=bool)
        x0, x1, y0, y1 = self.bbox2
        near = (xp >= x0) & (xp <= x1) & (yp >= y0) & (yp <= y1)
        out = np.zeros_like(xp, dtype=bool)
        if near.any():
            x, y = self.motion.inverse(xp[near], yp[near])
            out[near] = self.shape.contains(x, y)
        return out


def _linear_part(rng, recipe: SceneRecipe, extent: float, budget: float) -> np.ndarray:
    # rotation/scale are limited so they add at most ~20% of the displacement budget at ``extent``
    lim = 0.2 * budget / max(extent, 1.0)
    rot = np.radians(recipe.max_rotation_deg)
    theta = rng.uniform(-1, 1) * min(rot, lim)
    scale = 1.0 + rng.uniform(-1, 1) * min(recipe.max_scale_change, lim)
    c, s = np.cos(theta), np.sin(theta)
    return scale * np.array([[c, -s], [s, c]])


def _translation(rng, recipe: SceneRecipe, budget: float) -> np.ndarray:
    mag = budget * rng.uniform(recipe.displacement_floor, 1.0)
    ang = rng.uniform(0, 2 * np.pi)
    return mag * np.array([np.cos(ang), np.sin(ang)])


def _sample_motion(rng, recipe: SceneRecipe, center, extent: float, deforming: bool) -> Motion:
    budget = 0.8 * recipe.max_displacement
    A = _linear_part(rng, recipe, extent, recipe.max_displacement)
    t = _translation(rng, recipe, budget)
    if not deforming or recipe.max_displacement == 0:
        return Motion(center, A, t)
    wavelength = rng.uniform(24.0, 48.0)
    direction = rng.uniform(0, 2 * np.pi, size=2)
    k = np.stack([np.cos(direction), np.sin(direction)], axis=1) / wavelength
    # Lipschitz of the warp: 2*pi*amp/wavelength <= 0.25
    amp_cap = min(0.1 * recipe.max_displacement, 0.25 * wavelength / (2 * np.pi))
    amp = rng.uniform(0.3, 1.0, size=2) * amp_cap
    return Motion(center, A, t, amp, k, rng.uniform(0, 2 * np.pi, size=2))


def _sample_shape(rng, h: int, w: int) -> Shape:
    radius = rng.uniform(0.12, 0.28) * min(h, w)
    center = (rng.uniform(0, w - 1), rng.uniform(0, h - 1))
    n = rng.integers(0, 3)
    harmonics = [
        (int(rng.integers(2, 6)), rng.uniform(0.05, 0.25), rng.uniform(0, 2 * np.pi))
        for _ in range(n)
    ]
    return Shape(center, radius, harmonics, rng.uniform(0, 2 * np.pi))


def _pick_component(recipe: SceneRecipe, index: int) -> SceneRecipe:
    rng = np.random.default_rng([recipe.seed_base, index, 1])
    comp = recipe.components[int(rng.integers(len(recipe.components)))]
    return dataclasses.replace(comp, resolution=recipe.resolution, seed_base=recipe.seed_base)


def _build_scene(recipe: SceneRecipe, rng: np.random.Generator) -> list[_Layer]:
    h, w = recipe.resolution
    center = ((w - 1) / 2, (h - 1) / 2)
    half_diag = 0.5 * np.hypot(h, w)
    bg_texture = Texture(rng, (h, w), recipe.texture_spectrum)
    if recipe.motion_model == "global-rigid":
        # layers are painted onto the background and share its motion
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        for _ in range(recipe.n_layers):
            shape = _sample_shape(rng, h, w)
            tex = Texture(rng, (h, w), recipe.texture_spectrum)
            inside = shape.contains(xs, ys)
            bg_texture.grid[:, inside] = tex.grid[:, inside]
        motion = _sample_motion(rng, recipe, center, half_diag, deforming=False)
        return [_Layer(motion, bg_texture, None)]

    deforming = recipe.motion_model == "per-layer-deforming"
    background = _Layer(_sample_motion(rng, recipe, center, half_diag, False), bg_texture, None)
    layers = [background]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    taken1 = np.zeros((h, w), dtype=bool)
    taken2 = np.zeros((h, w), dtype=bool)
    for _ in range(recipe.n_layers):
        for _attempt in range(20):
            shape = _sample_shape(rng, h, w)
            motion = _sample_motion(rng, recipe, shape.c, shape.radius * 1.5, deforming)
            layer = _Layer(motion, Texture(rng, (h, w), recipe.texture_spectrum), shape)
            if recipe.occlusion_allowed:
                break
            m1 = layer.covers_frame1(xs, ys)
            m2 = layer.covers_frame2(xs, ys)
            if not (m1 & (taken1 | taken2)).any() and not (m2 & (taken1 | taken2)).any():
                taken1 |= m1
                taken2 |= m2
                break
        else:
            continue
        layers.append(layer)
    return layers


def generate(recipe: SceneRecipe, index: int) -> Sample:
    """Render sample ``index`` of ``recipe``; a pure function of its arguments."""
    if index < 0:
        raise ValueError("index must be >= 0")
    if recipe.components:
        recipe = _pick_component(recipe, index)
    rng = np.random.default_rng([recipe.seed_base, index])
    h, w = recipe.resolution
    layers = _build_scene(recipe, rng)

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    owner1 = np.zeros((h, w), dtype=np.int64)
    for k, layer in enumerate(layers[1:], start=1):
        owner1[layer.covers_frame1(xs, ys)] = k

    img1 = np.empty((3, h, w))
    flow = np.empty((2, h, w))
    occluded = np.zeros((h, w), dtype=bool)
    for k, layer in enumerate(layers):
        sel = owner1 == k
        if not sel.any():
            continue
        x, y = xs[sel], ys[sel]
        img1[:, sel] = layer.texture.sample(x, y)
        xp, yp = layer.motion.forward(x, y)
        flow[0, sel] = xp - x
        flow[1, sel] = yp - y
        occ = (xp < 0) | (xp > w - 1) | (yp < 0) | (yp > h - 1)
        for front in layers[k + 1 :]:
            occ |= front.covers_frame2(xp, yp)
        occluded[sel] = occ

    img2 = np.empty((3, h, w))
    todo = np.ones((h, w), dtype=bool)
    for layer in reversed(layers):
        if not todo.any():
            break
        xp, yp = xs[todo], ys[todo]
        hit = layer.covers_frame2(xp, yp)
        idx = np.flatnonzero(todo)[hit]
        x, y = layer.motion.inverse(xp[hit], yp[hit])
        img2.reshape(3, -1)[:, idx] = layer.texture.sample(x, y)
        todo.reshape(-1)[idx] = False

    return Sample(
        frame1=Frame(np.clip(img1, 0, 1)),
        frame2=Frame(np.clip(img2, 0, 1)),
        gt_flow=FlowField(flow.astype(np.float32)),
        occlusion=occluded,
        rigid=owner1 == 0,
    )


def stage_recipes(resolution: tuple[int, int] = (64, 96)) -> list[SceneRecipe]:
    """Four recipes of increasing difficulty, standing in for the staged training datasets."""
    rigid = SceneRecipe(
        "rigid", resolution, n_layers=3, motion_model="global-rigid",
        max_displacement=6.0, texture_spectrum="smooth", occlusion_allowed=False, seed_base=1_000,
    )
    chairs = SceneRecipe(
        "chairs", resolution, n_layers=3, motion_model="per-layer-affine",
        max_displacement=14.0, texture_spectrum="mid", occlusion_allowed=False, seed_base=2_000,
    )
    things = SceneRecipe(
        "things", resolution, n_layers=6, motion_model="per-layer-deforming",
        max_displacement=24.0, texture_spectrum="fine", occlusion_allowed=True, seed_base=3_000,
    )
    large = SceneRecipe(
        "large", resolution, n_layers=4, motion_model="per-layer-deforming",
        max_displacement=60.0, texture_spectrum="mid", occlusion_allowed=True, seed_base=4_000,
        displacement_floor=0.55,
    )
    mixed = SceneRecipe(
        "mixed", resolution, n_layers=6, motion_model="per-layer-deforming",
        max_displacement=60.0, texture_spectrum="fine", occlusion_allowed=True, seed_base=4_000,
        components=(chairs, things, large),
    )
    return [rigid, chairs, things, mixed]


def recipe_by_name(name: str, resolution: tuple[int, int] = (64, 96)) -> SceneRecipe:
    recipes = {r.name: r for r in stage_recipes(resolution)}
    recipes["large"] = recipes["mixed"].components[2]
    if name not in recipes:
        raise KeyError(f"unknown recipe {name!r}; known: {sorted(recipes)}")
    return recipes[name]


@dataclass(frozen=True)
class AugmentPolicy:
    """Photometric jitter ranges (shared by both frames) and flip probabilities."""

    photometric: bool = False
    brightness: float = 0.15
    contrast: float = 0.15
    saturation: float = 0.15
    gamma: float = 0.1
    hflip: float = 0.0
    vflip: float = 0.0

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def flip(cls, horizontal: bool = True, vertical: bool = False) -> "AugmentPolicy":
        return cls(hflip=float(horizontal), vflip=float(vertical))

    @classmethod
    def training(cls) -> "AugmentPolicy":
        return cls(photometric=True, hflip=0.5, vflip=0.1)


def _photometric(img: np.ndarray, b: float, c: float, s: float, g: float) -> np.ndarray:
    gray = img.mean(axis=0, keepdims=True)
    img = gray + s * (img - gray)
    img = (img - 0.5) * c + 0.5 + b
    return np.clip(img, 0.0, 1.0) ** g


def augment(sample: Sample, policy: AugmentPolicy, seed: int) -> Sample:
    """Apply ``policy`` deterministically in ``seed``. Flips keep the flow consistent."""
    rng = np.random.default_rng([seed, 17])
    f1, f2 = sample.frame1.data, sample.frame2.data
    uv, valid = sample.gt_flow.uv, sample.gt_flow.valid
    occ, rigid = sample.occlusion, sample.rigid
    if policy.photometric:
        b = rng.uniform(-policy.brightness, policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        g = rng.uniform(1 - policy.gamma, 1 + policy.gamma)
        f1, f2 = _photometric(f1, b, c, s, g), _photometric(f2, b, c, s, g)
    if policy.hflip > 0 and rng.uniform() < policy.hflip:
        f1, f2, valid, occ, rigid = (a[..., ::-1] for a in (f1, f2, valid, occ, rigid))
        uv = uv[..., ::-1] * np.array([-1.0, 1.0], dtype=np.float32)[:, None, None]
    if policy.vflip > 0 and rng.uniform() < policy.vflip:
        f1, f2, valid, occ, rigid = (a[..., ::-1, :] for a in (f1, f2, valid, occ, rigid))
        uv = uv[..., ::-1, :] * np.array([1.0, -1.0], dtype=np.float32)[:, None, None]
    return Sample(
        Frame(np.ascontiguousarray(f1)),
        Frame(np.ascontiguousarray(f2)),
        FlowField(np.ascontiguousarray(uv), np.ascontiguousarray(valid)),
        np.ascontiguousarray(occ),
        np.ascontiguousarray(rigid),
    )
