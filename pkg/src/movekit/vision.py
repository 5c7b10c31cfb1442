"""Toy frozen vision experts and the per-expert token-reduction preprocessors.

Each expert is a patch-embedding ViT with two pre-norm attention blocks. The
expert geometry lives in :class:`EncoderSpec`; two profiles are provided:

* ``desk``  - 32x32 inputs, widths <= 64, 16 visual tokens per expert after
  reduction. Cheap enough to pre-fit and train on a CPU in minutes.
* ``paper-geometry`` - raw grids 32x32 / 14x14 / 30x30 (1024 / 196 / 900
  tokens) reduced to 256 / 196 / 576 tokens.

Batched helpers (``*_batch``) work on plain arrays shaped ``(B, T, D)`` or
``(B, h, w, D)``; the :class:`FeatureMap` API wraps a single map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError, TrainingDivergence

GENERAL, FORMULA, CHART = 0, 1, 2
EXPERT_NAMES = ("general", "formula", "chart")
N_BLOCKS = 2


@dataclass
class FeatureMap:
    data: np.ndarray  # (T, D)
    grid: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise DimensionError(f"FeatureMap data must be (T, D), got {self.data.shape}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.data.shape[0]:
            raise DimensionError(f"grid {self.grid} does not hold {self.data.shape[0]} tokens")

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def as_grid(self) -> np.ndarray:
        if self.grid is None:
            raise ConfigurationError("feature map has no grid layout")
        return self.data.reshape(*self.grid, self.width)


@dataclass(frozen=True)
class Reduction:
    kind: str = "none"  # none | pixel_unshuffle | bilinear
    factor: int = 1
    target: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.kind not in {"none", "pixel_unshuffle", "bilinear"}:
            raise ConfigurationError(f"unknown reduction {self.kind!r}")

    def apply_grid(self, grid: tuple[int, int], width: int) -> tuple[tuple[int, int], int]:
        h, w = grid
        if self.kind == "pixel_unshuffle":
            r = self.factor
            if r < 1 or h % r or w % r:
                raise ConfigurationError(f"pixel_unshuffle factor {r} does not divide grid {grid}")
            return (h // r, w // r), width * r * r
        if self.kind == "bilinear":
            if min(self.target) < 1:
                raise ConfigurationError(f"bilinear target {self.target} must be positive")
            return tuple(self.target), width
        return grid, width

    def describe(self) -> str:
        if self.kind == "pixel_unshuffle":
            return f"pixel_unshuffle:{self.factor}"
        if self.kind == "bilinear":
            return f"bilinear:{self.target[0]}x{self.target[1]}"
        return "none"

    @classmethod
    def parse(cls, text: str) -> "Reduction":
        kind, _, arg = text.partition(":")
        if kind == "pixel_unshuffle":
            return cls(kind, factor=int(arg))
        if kind == "bilinear":
            h, w = arg.split("x")
            return cls(kind, target=(int(h), int(w)))
        if kind == "none":
            return cls()
        raise ConfigurationError(f"cannot parse reduction {text!r}")


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    expert: int
    patch: int
    resolution: int
    width: int
    reduction: Reduction = field(default_factory=Reduction)
    channels: int = 3

    def __post_init__(self) -> None:
        if self.patch < 1 or self.resolution % self.patch:
            raise ConfigurationError(
                f"{self.name}: resolution {self.resolution} not divisible by patch {self.patch}"
            )
        # validates the reduction against the raw grid
        self.reduction.apply_grid(self.raw_grid, self.width)

    @property
    def raw_grid(self) -> tuple[int, int]:
        n = self.resolution // self.patch
        return (n, n)

    @property
    def raw_tokens(self) -> int:
        h, w = self.raw_grid
        return h * w

    @property
    def grid(self) -> tuple[int, int]:
        return self.reduction.apply_grid(self.raw_grid, self.width)[0]

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def out_width(self) -> int:
        return self.reduction.apply_grid(self.raw_grid, self.width)[1]

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def desk_specs() -> list[EncoderSpec]:
    return [
        EncoderSpec("general", GENERAL, patch=4, resolution=32, width=16,
                    reduction=Reduction("pixel_unshuffle", factor=2)),
        EncoderSpec("formula", FORMULA, patch=8, resolution=32, width=32),
        EncoderSpec("chart", CHART, patch=3, resolution=30, width=32,
                    reduction=Reduction("bilinear", target=(8, 8))),
    ]


def paper_specs(widths: tuple[int, int, int] = (1024, 1024, 1024)) -> list[EncoderSpec]:
    """448/14 -> 32x32 grid, 420/30 -> 14x14, 960/32 -> 30x30."""
    return [
        EncoderSpec("general", GENERAL, patch=14, resolution=448, width=widths[0],
                    reduction=Reduction("pixel_unshuffle", factor=2)),
        EncoderSpec("formula", FORMULA, patch=30, resolution=420, width=widths[1]),
        EncoderSpec("chart", CHART, patch=32, resolution=960, width=widths[2],
                    reduction=Reduction("bilinear", target=(24, 24))),
    ]


PROFILES = {"desk": desk_specs, "paper-geometry": paper_specs}


def profile_specs(profile: str) -> list[EncoderSpec]:
    try:
        return PROFILES[profile]()
    except KeyError:
        raise ConfigurationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------
# Token reduction
# ---------------------------------------------------------------------------


def pixel_unshuffle_grid(x: np.ndarray, r: int) -> np.ndarray:
    """Space-to-depth on ``(..., h, w, D)``.

    Each r x r block contributes its D-vectors in row-major block order, the
    original channels varying fastest.
    """
    *lead, h, w, d = x.shape
    if r < 1 or h % r or w % r:
        raise ConfigurationError(f"pixel_unshuffle: factor {r} does not divide grid {h}x{w}")
    y = x.reshape(*lead, h // r, r, w // r, r, d)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return y.reshape(*lead, h // r, w // r, r * r * d)


def pixel_shuffle_grid(x: np.ndarray, r: int) -> np.ndarray:
    """Depth-to-space; exact inverse of :func:`pixel_unshuffle_grid`."""
    *lead, h, w, c = x.shape
    if r < 1 or c % (r * r):
        raise ConfigurationError(f"pixel_shuffle: width {c} not divisible by {r * r}")
    d = c // (r * r)
    y = x.reshape(*lead, h, w, r, r, d)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return y.reshape(*lead, h * r, w * r, d)


def pixel_unshuffle(fmap: FeatureMap, r: int) -> FeatureMap:
    g = pixel_unshuffle_grid(fmap.as_grid(), r)
    return FeatureMap(g.reshape(-1, g.shape[-1]), grid=g.shape[:2])


def pixel_shuffle(fmap: FeatureMap, r: int) -> FeatureMap:
    g = pixel_shuffle_grid(fmap.as_grid(), r)
    return FeatureMap(g.reshape(-1, g.shape[-1]), grid=g.shape[:2])


def align_corners_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix for 1-D linear resampling, align-corners."""
    if n_out < 1 or n_in < 1:
        raise ConfigurationError(f"bilinear_resize: extents must be positive, got {n_in}->{n_out}")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        lo = min(int(np.floor(src)), n_in - 2)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    return m


def bilinear_resize_grid(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Channel-independent bilinear resize of ``(..., h, w, D)`` to ``target``."""
    h, w = x.shape[-3], x.shape[-2]
    th, tw = target
    if th < 1 or tw < 1:
        raise ConfigurationError(f"bilinear_resize: target {target} must be positive")
    if (th, tw) == (h, w):
        return x.copy()
    mh = align_corners_weights(h, th).astype(x.dtype)
    mw = align_corners_weights(w, tw).astype(x.dtype)
    y = np.einsum("ia,...abc->...ibc", mh, x, optimize=True)
    return np.einsum("jb,...ibc->...ijc", mw, y, optimize=True)


def bilinear_resize(fmap: FeatureMap, target: tuple[int, int]) -> FeatureMap:
    g = bilinear_resize_grid(fmap.as_grid(), target)
    return FeatureMap(g.reshape(-1, g.shape[-1]), grid=tuple(target))


def reduce_batch(spec: EncoderSpec, feats: np.ndarray) -> np.ndarray:
    """Apply ``spec.reduction`` to raw features ``(B, T_raw, D)``."""
    b, t, d = feats.shape
    if t != spec.raw_tokens:
        raise DimensionError(f"{spec.name}: expected {spec.raw_tokens} raw tokens, got {t}")
    red = spec.reduction
    if red.kind == "none":
        return feats
    g = feats.reshape(b, *spec.raw_grid, d)
    if red.kind == "pixel_unshuffle":
        g = pixel_unshuffle_grid(g, red.factor)
    else:
        g = bilinear_resize_grid(g, red.target)
    return g.reshape(b, -1, g.shape[-1])


def reduce(spec: EncoderSpec, fmap: FeatureMap) -> FeatureMap:
    if fmap.grid is None:
        raise ConfigurationError(f"{spec.name}: reduction needs a grid-shaped feature map")
    red = spec.reduction
    if red.kind == "pixel_unshuffle":
        return pixel_unshuffle(fmap, red.factor)
    if red.kind == "bilinear":
        return bilinear_resize(fmap, red.target)
    return fmap


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def init_encoder(spec: EncoderSpec, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    d = spec.width
    p = {
        "patch.w": nx.glorot(rng, spec.patch_dim, d, dtype=dtype),
        "patch.b": np.zeros(d, dtype=dtype),
        "pos": (0.02 * rng.standard_normal((spec.raw_tokens, d))).astype(dtype),
    }
    for i in range(N_BLOCKS):
        for k, v in nx.init_attention(rng, d, dtype=dtype).items():
            p[f"blocks.{i}.{k}"] = v
    return p


def block_params(params: dict[str, np.ndarray], i: int) -> dict[str, np.ndarray]:
    prefix = f"blocks.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def to_resolution(spec: EncoderSpec, images: np.ndarray) -> np.ndarray:
    """Resample ``(B, H, W, C)`` images to the encoder's input resolution."""
    if images.shape[-1] != spec.channels:
        raise ConfigurationError(f"{spec.name}: expected {spec.channels} channels, got {images.shape[-1]}")
    target = (spec.resolution, spec.resolution)
    if images.shape[1:3] == target:
        return images
    return bilinear_resize_grid(images, target)


def extract_patches(spec: EncoderSpec, images: np.ndarray) -> np.ndarray:
    """``(B, R, R, C)`` -> ``(B, T_raw, p*p*C)``, patches row-major, pixels (y, x, c)."""
    b, hh, ww, c = images.shape
    if (hh, ww) != (spec.resolution, spec.resolution):
        raise ConfigurationError(
            f"{spec.name}: image {hh}x{ww} does not match input resolution {spec.resolution}"
        )
    p = spec.patch
    g = images.reshape(b, hh // p, p, ww // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(b, (hh // p) * (ww // p), p * p * c)


def encoder_forward(spec, params, patches, keep_cache=False):
    x, lin_cache = nx.linear_layer(patches, params["patch.w"], params["patch.b"])
    x = x + params["pos"]
    caches = []
    for i in range(N_BLOCKS):
        x, c = nx.attention_block(x, block_params(params, i))
        caches.append(c)
    return (x, (lin_cache, caches)) if keep_cache else (x, None)


def encoder_backward(dx, cache):
    lin_cache, caches = cache
    grads = {}
    for i in reversed(range(N_BLOCKS)):
        dx, g = nx.attention_block_backward(dx, caches[i])
        for k, v in g.items():
            grads[f"blocks.{i}.{k}"] = v
    grads["pos"] = dx.reshape(-1, *dx.shape[-2:]).sum(axis=0)
    _, grads["patch.w"], grads["patch.b"] = nx.linear_layer_backward(dx, lin_cache)
    return grads


def encode_batch(spec: EncoderSpec, params: dict[str, np.ndarray], images: np.ndarray) -> np.ndarray:
    """Raw (unreduced) features ``(B, T_raw, D)`` for images at any resolution."""
    imgs = to_resolution(spec, np.asarray(images, dtype=params["patch.w"].dtype))
    feats, _ = encoder_forward(spec, params, extract_patches(spec, imgs))
    return feats


def encode(spec: EncoderSpec, image: np.ndarray, params: dict[str, np.ndarray]) -> FeatureMap:
    """Raw grid feature map of one ``(H, W, C)`` image; no reduction applied.

    The image must already be at the encoder's input resolution.
    """
    image = np.asarray(image)
    if image.shape != (spec.resolution, spec.resolution, spec.channels):
        raise ConfigurationError(
            f"{spec.name}: image shape {image.shape} does not match "
            f"{(spec.resolution, spec.resolution, spec.channels)}"
        )
    feats = encode_batch(spec, params, image[None])[0]
    return FeatureMap(feats, grid=spec.raw_grid)


# ---------------------------------------------------------------------------
# Offline pre-fit (masked-patch reconstruction)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrefitConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 2e-3
    mask_ratio: float = 0.5


def prefit_encoder(
    spec: EncoderSpec,
    params: dict[str, np.ndarray],
    images: np.ndarray,
    cfg: PrefitConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Fit ``params`` in place by reconstructing masked patches of ``images``.

    A throwaway linear head maps token features back to pixels; the loss is
    the mean squared error on masked patches only. Returns the loss trace.
    """
    dtype = params["patch.w"].dtype
    pixels = extract_patches(spec, to_resolution(spec, images.astype(dtype)))
    head = {"head.w": nx.glorot(rng, spec.width, spec.patch_dim, dtype=dtype),
            "head.b": np.zeros(spec.patch_dim, dtype=dtype)}
    opt = nx.AdamW({**params, **head}, nx.OptimizerConfig(cfg.learning_rate))
    n_tok = spec.raw_tokens
    n_mask = max(1, int(round(cfg.mask_ratio * n_tok)))
    trace = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(pixels), size=cfg.batch_size)
        target = pixels[idx]
        mask = np.zeros((cfg.batch_size, n_tok), dtype=bool)
        for row in mask:
            row[rng.choice(n_tok, size=n_mask, replace=False)] = True
        inp = np.where(mask[..., None], 0.0, target).astype(dtype)
        feats, cache = encoder_forward(spec, params, inp, keep_cache=True)
        recon, head_cache = nx.linear_layer(feats, head["head.w"], head["head.b"])
        diff = (recon - target) * mask[..., None]
        denom = mask.sum() * spec.patch_dim
        loss = float((diff * diff).sum() / denom)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"{spec.name} pre-fit diverged", step=len(trace))
        trace.append(loss)
        drecon = (2.0 / denom) * diff
        dfeats, g_hw, g_hb = nx.linear_layer_backward(drecon, head_cache)
        grads = encoder_backward(dfeats, cache)
        grads["head.w"], grads["head.b"] = g_hw, g_hb
        opt.step(grads)
    return trace


def with_width(specs: list[EncoderSpec], widths: tuple[int, ...]) -> list[EncoderSpec]:
    return [replace(s, width=w) for s, w in zip(specs, widths)]
