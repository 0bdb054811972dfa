"""Deterministic test-time perturbations: patch replacement, drop, and shuffle.

Unlike the training-time augmentations, the information loss here is exact:
a requested loss fraction always modifies round(loss * N) patches, and the
same spec and seed reproduce the same mask or permutation on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .imaging import ImageTensor, PatchGrid, PatchMask, make_grid, sample_patch_mask
from .augment import patch_mix
from .rng import SeededRandomSource

KIND_PATCH_MIX = "patch_mix_attack"
KIND_PATCH_DROP = "patch_drop"
KIND_PATCH_PERMUTE = "patch_permute"
KINDS = (KIND_PATCH_MIX, KIND_PATCH_DROP, KIND_PATCH_PERMUTE)

# The harness and CLI only sweep losses up to this fraction.
EVALUATED_MAX_LOSS = 0.8


@dataclass(frozen=True)
class AttackSpec:
    """Parameters of one deterministic perturbation."""

    kind: str
    grid: tuple[int, int]
    loss_fraction: float = 0.0
    fill: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}, expected one of {KINDS}")
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ShapeError(f"attack grid must be at least 1x1, got {rows}x{cols}")
        if not 0.0 <= self.loss_fraction <= 1.0:
            raise ContractError(f"loss fraction must be in [0, 1], got {self.loss_fraction}")
        if not 0.0 <= self.fill <= 1.0:
            raise ContractError(f"fill value must be in [0, 1], got {self.fill}")

    def make_grid_for(self, image: ImageTensor) -> PatchGrid:
        return make_grid(image.height, image.width, *self.grid)

    def rng(self) -> SeededRandomSource:
        return SeededRandomSource(self.seed)


def patch_mix_attack(x: ImageTensor, donor: ImageTensor, spec: AttackSpec,
                     rng: SeededRandomSource | None = None) -> tuple[ImageTensor, PatchMask]:
    """Replace round(loss * N) patches of x with the donor's co-located patches."""
    if spec.kind != KIND_PATCH_MIX:
        raise ContractError(f"spec kind is {spec.kind!r}, expected {KIND_PATCH_MIX!r}")
    grid = spec.make_grid_for(x)
    mask = sample_patch_mask(grid, spec.loss_fraction, rng or spec.rng())
    return patch_mix(x, donor, mask), mask


def patch_drop(x: ImageTensor, spec: AttackSpec,
               rng: SeededRandomSource | None = None) -> tuple[ImageTensor, PatchMask]:
    """Set round(loss * N) patches of x to the spec's fill constant."""
    if spec.kind != KIND_PATCH_DROP:
        raise ContractError(f"spec kind is {spec.kind!r}, expected {KIND_PATCH_DROP!r}")
    grid = spec.make_grid_for(x)
    mask = sample_patch_mask(grid, spec.loss_fraction, rng or spec.rng())
    out = np.array(x.data)
    for index in np.flatnonzero(mask.bits):
        y0, y1, x0, x1 = grid.patch_bounds(int(index))
        out[y0:y1, x0:x1, :] = spec.fill
    return ImageTensor(out), mask


def patch_permute(x: ImageTensor, shuffle_grid: tuple[int, int],
                  rng: SeededRandomSource) -> tuple[ImageTensor, np.ndarray]:
    """Rearrange the grid's patches by a uniformly random permutation.

    Output patch i holds input patch perm[i]; the patch content multiset is
    preserved exactly.  Feed the inverse permutation back through
    :func:`apply_patch_permutation` to recover the original bit-for-bit.
    """
    grid = make_grid(x.height, x.width, *shuffle_grid)
    perm = rng.permutation(grid.n_patches)
    return apply_patch_permutation(x, grid, perm), perm


def apply_patch_permutation(x: ImageTensor, grid: PatchGrid, perm: np.ndarray) -> ImageTensor:
    """Gather patches: output patch i is input patch perm[i]."""
    perm = np.asarray(perm, dtype=np.int64).ravel()
    if perm.size != grid.n_patches or sorted(perm.tolist()) != list(range(grid.n_patches)):
        raise ContractError("permutation must be a bijection on the grid's patch indices")
    if (grid.image_h, grid.image_w) != (x.height, x.width):
        raise ShapeError(
            f"grid covers {grid.image_h}x{grid.image_w} but image is {x.height}x{x.width}")
    out = np.empty_like(x.data)
    for dst in range(grid.n_patches):
        dy0, dy1, dx0, dx1 = grid.patch_bounds(dst)
        sy0, sy1, sx0, sx1 = grid.patch_bounds(int(perm[dst]))
        out[dy0:dy1, dx0:dx1, :] = x.data[sy0:sy1, sx0:sx1, :]
    return ImageTensor(out)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64).ravel()
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv
