"""Contrastive randomized-mask saliency and the patch selectivity metrics.

The saliency estimate averages contrastive score differences over random
soft masks:

    S(p) = 1 / (E[B] * n_masks) * sum_i (f(x * B_i) - f'(x * B_i)) * B_i(p)

Masks come from low-resolution Bernoulli cell grids, bilinearly upsampled
and randomly shifted by up to one cell so cell boundaries do not imprint on
the estimate.  Every mask is derived from (seed, index), so generating masks
in chunks, or only a slice of them, yields the same masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivisibilityError, ShapeError, TransportError
from .imaging import ImageTensor, PatchMask, mask_to_pixel_field
from .oracle import ContrastiveOracle
from .rng import SeededRandomSource, derive_seed

DEFAULT_BATCH_SIZE = 64
NORMALIZED_SUM_TOL = 1e-6


@dataclass(frozen=True)
class RiseConfig:
    """Mask-sampling parameters for the saliency estimator."""

    n_masks: int
    cell_stride: int
    keep_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_masks < 1:
            raise ContractError(f"n_masks must be >= 1, got {self.n_masks}")
        if self.cell_stride < 1:
            raise ContractError(f"cell_stride must be >= 1, got {self.cell_stride}")
        if not 0.0 < self.keep_prob < 1.0:
            raise ContractError(f"keep_prob must lie strictly in (0, 1), got {self.keep_prob}")

    def cells_for(self, img_h: int, img_w: int) -> tuple[int, int]:
        problems = []
        if img_h % self.cell_stride != 0:
            problems.append(f"height {img_h} is not divisible by cell stride {self.cell_stride}")
        if img_w % self.cell_stride != 0:
            problems.append(f"width {img_w} is not divisible by cell stride {self.cell_stride}")
        if problems:
            raise DivisibilityError("; ".join(problems))
        cells_h = img_h // self.cell_stride
        cells_w = img_w // self.cell_stride
        if cells_h < 2 or cells_w < 2:
            raise ContractError(
                f"mask grid needs at least 2 cells per axis, got {cells_h}x{cells_w}")
        return cells_h, cells_w


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"saliency map must be 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("saliency values must be finite")
        if self.normalized:
            if np.any(arr < 0.0):
                raise ContractError("a normalized map must be nonnegative")
            total = float(arr.sum())
            if abs(total - 1.0) > NORMALIZED_SUM_TOL:
                raise ContractError(f"a normalized map must sum to 1, got {total}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def _upsample_axis(n_cells: int, out_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Standard resize geometry: sample centers map to (u + 0.5) * in/out - 0.5.
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (n_cells / out_len) - 0.5
    src = np.clip(src, 0.0, float(n_cells - 1))
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_cells - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def generate_rise_masks(cfg: RiseConfig, img_h: int, img_w: int, *,
                        start: int = 0, count: int | None = None) -> np.ndarray:
    """Masks start..start+count of the sequence determined by cfg.seed.

    Returns float32 (count, img_h, img_w) with values in [0, 1].
    """
    cells_h, cells_w = cfg.cells_for(img_h, img_w)
    if count is None:
        count = cfg.n_masks - start
    if start < 0 or count < 0 or start + count > cfg.n_masks:
        raise ContractError(
            f"mask range [{start}, {start + count}) outside [0, {cfg.n_masks})")

    stride = cfg.cell_stride
    up_h = (cells_h + 1) * stride
    up_w = (cells_w + 1) * stride
    ylo, yhi, yfrac = _upsample_axis(cells_h, up_h)
    xlo, xhi, xfrac = _upsample_axis(cells_w, up_w)

    out = np.empty((count, img_h, img_w), dtype=np.float32)
    for i in range(count):
        child = SeededRandomSource(derive_seed(cfg.seed, "rise-mask", start + i))
        grid = (child.random((cells_h, cells_w)) < cfg.keep_prob).astype(np.float32)
        dy = int(child.integers(0, stride))
        dx = int(child.integers(0, stride))
        rows = grid[ylo, :] * (1.0 - yfrac)[:, None] + grid[yhi, :] * yfrac[:, None]
        up = rows[:, xlo] * (1.0 - xfrac)[None, :] + rows[:, xhi] * xfrac[None, :]
        out[i] = up[dy:dy + img_h, dx:dx + img_w]
    return out


def exhaustive_cell_masks(img_h: int, img_w: int, cell_stride: int) -> np.ndarray:
    """All 2^(cells) hard block masks, bit c of the index keyed to cell c.

    Cells are numbered row-major; no shift and no interpolation, so each mask
    is exactly its cell pattern expanded to pixels.  Intended for closed-form
    cross-checks on tiny grids.
    """
    cfg = RiseConfig(n_masks=1, cell_stride=cell_stride)
    cells_h, cells_w = cfg.cells_for(img_h, img_w)
    n_cells = cells_h * cells_w
    if n_cells > 16:
        raise ContractError(f"exhaustive enumeration capped at 16 cells, got {n_cells}")
    indices = np.arange(2 ** n_cells, dtype=np.uint32)
    bits = (indices[:, None] >> np.arange(n_cells, dtype=np.uint32)[None, :]) & 1
    grids = bits.reshape(-1, cells_h, cells_w).astype(np.float32)
    return grids.repeat(cell_stride, axis=1).repeat(cell_stride, axis=2)


def estimate_with_masks(x: ImageTensor, oracle: ContrastiveOracle, category: int,
                        masks: np.ndarray, keep_prob: float, *,
                        batch_size: int = DEFAULT_BATCH_SIZE) -> SaliencyMap:
    """Average contrastive scores against an explicit mask stack."""
    if not 0 <= category < oracle.k:
        raise ContractError(f"category {category} out of range for k={oracle.k}")
    if masks.ndim != 3 or masks.shape[1:] != (x.height, x.width):
        raise ShapeError(
            f"masks must be (n, {x.height}, {x.width}), got shape {masks.shape}")
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must lie in (0, 1], got {keep_prob}")

    n_masks = masks.shape[0]
    accum = np.zeros((x.height, x.width), dtype=np.float64)
    done = 0
    for lo in range(0, n_masks, batch_size):
        chunk = masks[lo:lo + batch_size]
        masked = x.data[None, ...] * chunk[..., None]
        images = [ImageTensor(m) for m in masked]
        try:
            pairs = oracle.score_both_batch(images)
        except TransportError as err:
            raise TransportError(
                f"saliency aborted after {done} of {n_masks} masked scores: {err}",
                batch_index=err.batch_index) from err
        weights = np.array(
            [p[0].scores[category] - p[1].scores[category] for p in pairs], dtype=np.float64)
        accum += np.tensordot(weights, chunk.astype(np.float64), axes=(0, 0))
        done += len(images)
    return SaliencyMap(accum / (keep_prob * n_masks))


def crise_map(x: ImageTensor, oracle: ContrastiveOracle, category: int,
              cfg: RiseConfig, *, batch_size: int = DEFAULT_BATCH_SIZE) -> SaliencyMap:
    """Contrastive saliency of `category` for x under the configured masks."""
    if not 0 <= category < oracle.k:
        raise ContractError(f"category {category} out of range for k={oracle.k}")
    cfg.cells_for(x.height, x.width)

    accum = np.zeros((x.height, x.width), dtype=np.float64)
    done = 0
    for lo in range(0, cfg.n_masks, batch_size):
        n = min(batch_size, cfg.n_masks - lo)
        chunk = generate_rise_masks(cfg, x.height, x.width, start=lo, count=n)
        masked = x.data[None, ...] * chunk[..., None]
        images = [ImageTensor(m) for m in masked]
        try:
            pairs = oracle.score_both_batch(images)
        except TransportError as err:
            raise TransportError(
                f"saliency aborted after {done} of {cfg.n_masks} masked scores: {err}",
                batch_index=err.batch_index) from err
        weights = np.array(
            [p[0].scores[category] - p[1].scores[category] for p in pairs], dtype=np.float64)
        accum += np.tensordot(weights, chunk.astype(np.float64), axes=(0, 0))
        done += n
    return SaliencyMap(accum / (cfg.keep_prob * cfg.n_masks))


def softmax_normalize(s: SaliencyMap) -> SaliencyMap:
    """Softmax over all pixels; idempotent application is a contract breach."""
    if s.normalized:
        raise ContractError("saliency map is already normalized")
    shifted = s.values - s.values.max()
    ex = np.exp(shifted)
    return SaliencyMap(ex / ex.sum(), normalized=True)


def _field_for(s: SaliencyMap, mask: PatchMask) -> np.ndarray:
    field = mask_to_pixel_field(mask)
    if (field.height, field.width) != (s.height, s.width):
        raise ShapeError(
            f"mask covers {field.height}x{field.width} pixels but map is "
            f"{s.height}x{s.width}")
    return field.data[..., 0]


def patch_selectivity(s: SaliencyMap, mask: PatchMask) -> float:
    """Mean saliency mass retained outside the masked (out-of-context) patches."""
    field = _field_for(s, mask)
    return float((s.values * (1.0 - field)).sum() / mask.grid.n_patches)


def inverse_patch_selectivity(s: SaliencyMap, mask: PatchMask) -> float:
    """Saliency mass on out-of-context patches; needs a normalized map."""
    if not s.normalized:
        raise ContractError("inverse patch selectivity is defined on normalized maps")
    field = _field_for(s, mask)
    return float((s.values * field).sum())
