"""Training-time mixing augmentations with proportional label interpolation.

Three image-pair methods share one label rule: the label weight given to the
second image always equals the fraction of its pixels that made it into the
output, followed by label smoothing.  Random erasing is deliberately absent
from this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .imaging import ImageTensor, PatchGrid, PatchMask, make_grid, mask_to_pixel_field, sample_patch_mask
from .rng import SeededRandomSource

METHOD_MIXUP = "mixup"
METHOD_CUTMIX = "cutmix"
METHOD_PATCH_MIXING = "patch_mixing"
METHODS = (METHOD_MIXUP, METHOD_CUTMIX, METHOD_PATCH_MIXING)


@dataclass(frozen=True)
class CategoryDistribution:
    """Probability vector over k classifier categories."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64).ravel()
        if probs.size < 1:
            raise ShapeError("distribution needs at least one category")
        if (probs < 0).any():
            raise ContractError("probabilities must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ContractError(f"probabilities must sum to 1, got {probs.sum()!r}")
        probs = np.ascontiguousarray(probs)
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def k(self) -> int:
        return self.probs.size

    @classmethod
    def one_hot(cls, index: int, k: int) -> "CategoryDistribution":
        probs = np.zeros(k, dtype=np.float64)
        probs[index] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class AugmentPolicy:
    """How a pair of training examples gets mixed.

    ``method_weights`` orders as (mixup, cutmix, patch_mixing).  The mixing
    ratio is drawn fresh from Beta(beta_alpha, beta_beta) for every pair.
    """

    beta_alpha: float = 0.3
    beta_beta: float = 0.3
    smoothing_eps: float = 0.1
    method_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    grid: tuple[int, int] = (7, 7)

    def __post_init__(self):
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ContractError("beta parameters must be positive")
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise ContractError("smoothing_eps must be in [0, 1)")
        w = np.asarray(self.method_weights, dtype=np.float64)
        if w.size != 3 or (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ContractError("method_weights must be 3 nonnegative values summing to 1")


def _require_same_shape(a: ImageTensor, b: ImageTensor) -> None:
    if not a.same_shape(b):
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def patch_mix(x_a: ImageTensor, x_b: ImageTensor, mask: PatchMask) -> ImageTensor:
    """Replace the masked patches of x_a with the co-located patches of x_b.

    Pixels are copied bit-exactly; there is no blending.
    """
    _require_same_shape(x_a, x_b)
    g = mask.grid
    if (g.image_h, g.image_w) != (x_a.height, x_a.width):
        raise ShapeError(
            f"mask covers {g.image_h}x{g.image_w} but images are {x_a.height}x{x_a.width}")
    field = mask_to_pixel_field(mask).data.astype(bool)
    out = np.where(field, x_b.data, x_a.data)
    return ImageTensor(out)


def mix_labels(y_a: CategoryDistribution, y_b: CategoryDistribution,
               ratio: float, eps: float, k: int) -> CategoryDistribution:
    """(1 - eps) * ((1 - r) * y_a + r * y_b) + eps / k, componentwise."""
    if y_a.k != k or y_b.k != k:
        raise ShapeError(f"label sizes {y_a.k}/{y_b.k} do not match k={k}")
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mix ratio must be in [0, 1], got {ratio}")
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"smoothing eps must be in [0, 1), got {eps}")
    mixed = (1.0 - eps) * ((1.0 - ratio) * y_a.probs + ratio * y_b.probs) + eps / k
    return CategoryDistribution(mixed)


def mixup(x_a: ImageTensor, x_b: ImageTensor, lam: float) -> ImageTensor:
    """Per-pixel convex blend lam * x_a + (1 - lam) * x_b."""
    _require_same_shape(x_a, x_b)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lam must be in [0, 1], got {lam}")
    blended = lam * x_a.data.astype(np.float64) + (1.0 - lam) * x_b.data.astype(np.float64)
    return ImageTensor(np.clip(blended, 0.0, 1.0).astype(np.float32))


def cutmix(x_a: ImageTensor, x_b: ImageTensor, lam: float,
           rng: SeededRandomSource) -> tuple[ImageTensor, float]:
    """Paste one axis-aligned rectangle of x_b into x_a.

    The rectangle targets area (1 - lam) * H * W, centered at a uniform pixel
    and clamped at the borders.  Returns the image and the achieved area
    ratio after clamping, which is what label mixing must use.
    """
    _require_same_shape(x_a, x_b)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lam must be in [0, 1], got {lam}")
    h, w = x_a.height, x_a.width
    cut_h = int(round(h * np.sqrt(1.0 - lam)))
    cut_w = int(round(w * np.sqrt(1.0 - lam)))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0 = max(cy - cut_h // 2, 0)
    y1 = min(cy + (cut_h + 1) // 2, h)
    x0 = max(cx - cut_w // 2, 0)
    x1 = min(cx + (cut_w + 1) // 2, w)
    out = np.array(x_a.data)
    achieved = 0.0
    if y1 > y0 and x1 > x0:
        out[y0:y1, x0:x1, :] = x_b.data[y0:y1, x0:x1, :]
        achieved = (y1 - y0) * (x1 - x0) / (h * w)
    return ImageTensor(out), achieved


def augment_pair(x_a: ImageTensor, y_a: CategoryDistribution,
                 x_b: ImageTensor, y_b: CategoryDistribution,
                 policy: AugmentPolicy, rng: SeededRandomSource,
                 ratio: float | None = None) -> tuple[ImageTensor, CategoryDistribution, str]:
    """Draw a method and a Beta ratio, mix the images, and mix the labels.

    The label ratio is always the fraction of output pixels that came from
    x_b: the exact patch count for patch mixing, the post-clamp rectangle
    area for cutmix, and 1 - lam for mixup.  ``ratio`` overrides the Beta
    draw when given (used by batch mode to share one draw).
    """
    if y_a.k != y_b.k:
        raise ShapeError(f"label sizes differ: {y_a.k} vs {y_b.k}")
    method = METHODS[rng.choice_weighted(3, policy.method_weights)]
    drawn = rng.beta(policy.beta_alpha, policy.beta_beta) if ratio is None else float(ratio)

    if method == METHOD_MIXUP:
        image = mixup(x_a, x_b, drawn)
        label_ratio = 1.0 - drawn
    elif method == METHOD_CUTMIX:
        image, label_ratio = cutmix(x_a, x_b, drawn, rng)
    else:
        grid = make_grid(x_a.height, x_a.width, *policy.grid)
        mask = sample_patch_mask(grid, drawn, rng)
        image = patch_mix(x_a, x_b, mask)
        label_ratio = mask.popcount / grid.n_patches

    label = mix_labels(y_a, y_b, label_ratio, policy.smoothing_eps, y_a.k)
    return image, label, method


def augment_batch(pairs, policy: AugmentPolicy, rng: SeededRandomSource,
                  ratio_per_batch: bool = False):
    """Apply augment_pair across (x_a, y_a, x_b, y_b) tuples.

    With ``ratio_per_batch`` one Beta draw is shared by the whole batch;
    the default draws per pair.
    """
    shared = rng.beta(policy.beta_alpha, policy.beta_beta) if ratio_per_batch else None
    return [augment_pair(xa, ya, xb, yb, policy, rng, ratio=shared)
            for xa, ya, xb, yb in pairs]
