"""Patch rasterization under sampled placements, masks, and pasting.

The placement transform is translate+rotate with an optional shear; the
patch is rendered by inverse-mapping each frame pixel center to its one
source texel (nearest neighbor), so the placement mask stays binary and
gradients w.r.t. the patch route exactly through the recorded
pixel-to-texel correspondence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Var, add, as_var, mul, reshape, scatter_rows, take

__all__ = [
    "PatchTexture",
    "TransformLimits",
    "TransformSample",
    "PlacementMask",
    "Correspondence",
    "RasterResult",
    "sample_transform",
    "rasterize",
    "paste",
    "token_mask",
    "area",
]


@dataclass
class PatchTexture:
    """The universal patch: an h x w x 3 texture with values in [0, 1]."""

    texels: np.ndarray

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        if self.texels.ndim != 3 or self.texels.shape[2] != 3:
            raise ValueError(f"texels must be h x w x 3, got {self.texels.shape}")
        if not np.all(np.isfinite(self.texels)):
            raise ValueError("texels must be finite")
        if self.texels.min() < 0.0 or self.texels.max() > 1.0:
            raise ValueError("texels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, height: int, width: int) -> "PatchTexture":
        return cls(rng.uniform(0.0, 1.0, size=(height, width, 3)))

    @classmethod
    def solid(cls, height: int, width: int, value: float = 0.5) -> "PatchTexture":
        return cls(np.full((height, width, 3), value))


@dataclass(frozen=True)
class TransformLimits:
    theta_max: float = 0.0
    skew_max: float = 0.0


@dataclass(frozen=True)
class TransformSample:
    """One placement draw: integer translation, rotation, optional shear."""

    dx: int  # row offset of the (pre-rotation) patch top edge
    dy: int  # col offset of the patch left edge
    theta: float
    skew: float = 0.0


@dataclass
class PlacementMask:
    """Binary pixel mask plus its token-level box-filter downsample."""

    pixels: np.ndarray
    token_weights: np.ndarray | None = None


@dataclass
class Correspondence:
    """Which frame pixel reads which texel (flat indices, in-footprint only)."""

    pixel_flat: np.ndarray
    texel_flat: np.ndarray
    frame: tuple[int, int]
    patch: tuple[int, int]


@dataclass
class RasterResult:
    rendered: np.ndarray
    mask: PlacementMask
    correspondence: Correspondence


def _half_extents(h: int, w: int, theta: float, skew: float) -> tuple[float, float]:
    """Footprint half-height/half-width around the patch center."""
    corners = np.array(
        [[-h / 2, -w / 2], [-h / 2, w / 2], [h / 2, -w / 2], [h / 2, w / 2]]
    )
    sheared_c = corners[:, 1] + skew * corners[:, 0]
    rows = math.cos(theta) * corners[:, 0] - math.sin(theta) * sheared_c
    cols = math.sin(theta) * corners[:, 0] + math.cos(theta) * sheared_c
    return float(np.max(np.abs(rows))), float(np.max(np.abs(cols)))


def _translation_range(extent: float, half: float, frame_len: int) -> tuple[int, int]:
    lo = math.ceil(extent - half)
    hi = math.floor(frame_len - half - extent)
    return lo, hi


def sample_transform(
    rng: np.random.Generator,
    frame: tuple[int, int],
    patch: tuple[int, int],
    limits: TransformLimits,
) -> TransformSample:
    """Draw a placement uniform over rotations, shears, and feasible offsets.

    The footprint is kept fully inside the frame by sampling the integer
    translation after the rotation/shear draw; an empty feasible range is
    rejected.
    """
    height, width = frame
    ph, pw = patch
    theta = float(rng.uniform(-limits.theta_max, limits.theta_max))
    skew = float(rng.uniform(-limits.skew_max, limits.skew_max))
    hr, hc = _half_extents(ph, pw, theta, skew)
    lo_r, hi_r = _translation_range(hr, ph / 2, height)
    lo_c, hi_c = _translation_range(hc, pw / 2, width)
    if lo_r > hi_r or lo_c > hi_c:
        raise ValueError(
            f"patch {ph}x{pw} has no feasible placement in {height}x{width} "
            f"frame at theta={theta:.3f}, skew={skew:.3f}"
        )
    dx = int(rng.integers(lo_r, hi_r + 1))
    dy = int(rng.integers(lo_c, hi_c + 1))
    return TransformSample(dx=dx, dy=dy, theta=theta, skew=skew)


def _inverse_map(transform: TransformSample, frame: tuple[int, int], patch: tuple[int, int]):
    """Map every frame pixel center back into patch coordinates."""
    height, width = frame
    ph, pw = patch
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64) + 0.5,
        np.arange(width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    rr = rows - ph / 2 - transform.dx
    cc = cols - pw / 2 - transform.dy
    cos_t, sin_t = math.cos(transform.theta), math.sin(transform.theta)
    u_rot = cos_t * rr + sin_t * cc
    v_rot = -sin_t * rr + cos_t * cc
    u = u_rot + ph / 2
    v = (v_rot - transform.skew * u_rot) + pw / 2
    return u, v


def rasterize(
    delta,
    transform: TransformSample,
    frame: tuple[int, int],
    grid: int | None = None,
) -> RasterResult:
    """Render the patch into the frame and record the texel correspondence."""
    texels = delta.texels if isinstance(delta, PatchTexture) else np.asarray(delta, dtype=np.float64)
    ph, pw = texels.shape[0], texels.shape[1]
    height, width = frame
    u, v = _inverse_map(transform, frame, (ph, pw))
    inside = (u >= 0.0) & (u < ph) & (v >= 0.0) & (v < pw)
    if not inside.any():
        raise ValueError("transform places the patch footprint outside the frame")
    iu = np.floor(u[inside]).astype(np.intp)
    iv = np.floor(v[inside]).astype(np.intp)
    pix_r, pix_c = np.nonzero(inside)
    correspondence = Correspondence(
        pixel_flat=(pix_r * width + pix_c).astype(np.intp),
        texel_flat=(iu * pw + iv).astype(np.intp),
        frame=(height, width),
        patch=(ph, pw),
    )
    rendered = np.zeros((height, width, 3))
    rendered[pix_r, pix_c] = texels[iu, iv]
    pixels = inside.astype(np.float64)
    weights = token_mask(pixels, grid) if grid is not None else None
    return RasterResult(
        rendered=rendered,
        mask=PlacementMask(pixels=pixels, token_weights=weights),
        correspondence=correspondence,
    )


def render_graph(delta, correspondence: Correspondence) -> Var:
    """Differentiable rendered frame: gather texels, scatter to pixels."""
    delta = as_var(delta)
    ph, pw = correspondence.patch
    height, width = correspondence.frame
    flat = reshape(delta, (ph * pw, 3))
    gathered = take(flat, correspondence.texel_flat, axis=0)
    placed = scatter_rows(gathered, correspondence.pixel_flat, height * width)
    return reshape(placed, (height, width, 3))


def paste(
    x,
    delta,
    transform: TransformSample,
    *,
    raster: RasterResult | None = None,
    mask_override: np.ndarray | None = None,
) -> tuple[Var, PlacementMask]:
    """Composite the rendered patch over the frame: (1-M) * x + M * R.

    Returns the pasted frame as a graph node (differentiable w.r.t. both
    the frame and the patch) along with the placement mask. ``raster``
    lets callers reuse a precomputed correspondence; ``mask_override`` is
    a test hook and bypasses mask validation.
    """
    x = as_var(x)
    delta_values = delta.texels if isinstance(delta, PatchTexture) else delta
    delta_var = as_var(delta_values)
    if x.value.ndim != 3 or x.value.shape[2] != 3:
        raise ValueError(f"frame must be H x W x 3, got {x.value.shape}")
    if delta_var.value.ndim != 3 or delta_var.value.shape[2] != 3:
        raise ValueError(f"patch must be h x w x 3, got {delta_var.value.shape}")
    frame = (x.value.shape[0], x.value.shape[1])
    if raster is None:
        raster = rasterize(delta_var.value, transform, frame)
    if raster.correspondence.frame != frame:
        raise ValueError("raster frame does not match input frame")
    pixels = raster.mask.pixels if mask_override is None else np.asarray(mask_override, dtype=np.float64)
    mask3 = pixels[:, :, None]
    rendered = render_graph(delta_var, raster.correspondence)
    out = add(mul(x, 1.0 - mask3), mul(rendered, mask3))
    return out, PlacementMask(pixels=pixels, token_weights=raster.mask.token_weights)


def token_mask(pixels: np.ndarray, grid: int) -> np.ndarray:
    """Box-filter a pixel mask down to per-token weights on a g x g grid."""
    pixels = np.asarray(pixels, dtype=np.float64)
    height, width = pixels.shape
    if height % grid or width % grid:
        raise ValueError(f"frame {height}x{width} not divisible by grid {grid}")
    ch, cw = height // grid, width // grid
    blocks = pixels.reshape(grid, ch, grid, cw)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def area(delta) -> int:
    """Patch area in texels (the quantity bounded by the area budget)."""
    texels = delta.texels if isinstance(delta, PatchTexture) else np.asarray(delta)
    return int(texels.shape[0] * texels.shape[1])
