"""Image tensors, patch-grid geometry, per-patch masks, and their file forms.

Pixels live in [0, 1] as float32 throughout the package; 8-bit files are
divided by 255 on load and written back with round-half-up on save.  Grids
and masks serialize to the compact text form ``RxC:<hex-bitstring>`` used
inside manifests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DivisibilityError, ShapeError
from .rng import SeededRandomSource, round_half_up

VALID_CHANNELS = (1, 3, 4)

_HEX_DIGITS = "0123456789abcdef"


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C floating-point image with every sample in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"image data must be H x W x C, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ShapeError(f"image must be at least 1x1, got {h}x{w}")
        if c not in VALID_CHANNELS:
            raise ShapeError(f"channel count must be one of {VALID_CHANNELS}, got {c}")
        if not np.isfinite(arr).all():
            raise ContractError("image samples must be finite")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ContractError("image samples must lie within [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_shape(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape


@dataclass(frozen=True)
class PatchGrid:
    """Partition of an image into rows x cols equal rectangles."""

    rows: int
    cols: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        for name in ("rows", "cols", "patch_h", "patch_w"):
            if getattr(self, name) < 1:
                raise ShapeError(f"grid {name} must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def image_h(self) -> int:
        return self.rows * self.patch_h

    @property
    def image_w(self) -> int:
        return self.cols * self.patch_w

    @property
    def patch_area(self) -> int:
        return self.patch_h * self.patch_w

    def patch_bounds(self, index: int) -> tuple[int, int, int, int]:
        """(y0, y1, x0, x1) pixel bounds of patch ``index`` in row-major order."""
        if not 0 <= index < self.n_patches:
            raise IndexError(f"patch index {index} out of range for {self.n_patches} patches")
        r, c = divmod(index, self.cols)
        return (r * self.patch_h, (r + 1) * self.patch_h,
                c * self.patch_w, (c + 1) * self.patch_w)

    def to_text(self) -> str:
        return f"{self.rows}x{self.cols}"


def make_grid(img_h: int, img_w: int, rows: int, cols: int) -> PatchGrid:
    """Build the rows x cols grid for an img_h x img_w image.

    Both axes must divide exactly; the error names every axis that fails.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"grid must have at least one row and column, got {rows}x{cols}")
    offending = []
    if img_h % rows != 0:
        offending.append(f"height {img_h} is not divisible by {rows} rows")
    if img_w % cols != 0:
        offending.append(f"width {img_w} is not divisible by {cols} cols")
    if offending:
        raise DivisibilityError("; ".join(offending))
    return PatchGrid(rows=rows, cols=cols, patch_h=img_h // rows, patch_w=img_w // cols)


@dataclass(frozen=True)
class PatchMask:
    """Per-patch boolean mask over a grid; True marks a replaced patch."""

    grid: PatchGrid
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).ravel()
        if bits.size != self.grid.n_patches:
            raise ShapeError(
                f"mask has {bits.size} bits but grid has {self.grid.n_patches} patches")
        bits = np.ascontiguousarray(bits)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def to_text(self) -> str:
        return f"{self.grid.rows}x{self.grid.cols}:{bits_to_hex(self.bits)}"


def mask_to_pixel_field(mask: PatchMask) -> ImageTensor:
    """Broadcast a patch mask to a single-channel pixel field of 0s and 1s."""
    g = mask.grid
    cells = mask.bits.reshape(g.rows, g.cols)
    field = cells.repeat(g.patch_h, axis=0).repeat(g.patch_w, axis=1)
    return ImageTensor(field.astype(np.float32)[..., None])


def sample_patch_mask(grid: PatchGrid, ratio: float, rng: SeededRandomSource) -> PatchMask:
    """Mask with round(ratio * N) distinct patches chosen uniformly."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"replacement ratio must be in [0, 1], got {ratio}")
    n = grid.n_patches
    n1 = min(max(round_half_up(ratio * n), 0), n)
    bits = np.zeros(n, dtype=bool)
    if n1:
        bits[rng.sample_without_replacement(n, n1)] = True
    return PatchMask(grid=grid, bits=bits)


def mask_from_text(text: str, img_h: int, img_w: int) -> PatchMask:
    """Parse ``RxC:<hex>`` back into a mask for an img_h x img_w image."""
    try:
        geom, hexstr = text.split(":", 1)
        rows_s, cols_s = geom.split("x", 1)
        rows, cols = int(rows_s), int(cols_s)
    except ValueError:
        raise ContractError(f"malformed mask text {text!r}") from None
    grid = make_grid(img_h, img_w, rows, cols)
    return PatchMask(grid=grid, bits=hex_to_bits(hexstr, grid.n_patches))


def bits_to_hex(bits: np.ndarray) -> str:
    """Pack a bit vector into hex, four bits per digit, first bit most significant."""
    bits = np.asarray(bits, dtype=bool).ravel()
    out = []
    for i in range(0, bits.size, 4):
        nibble = 0
        for j, b in enumerate(bits[i:i + 4]):
            if b:
                nibble |= 1 << (3 - j)
        out.append(_HEX_DIGITS[nibble])
    return "".join(out)


def hex_to_bits(hexstr: str, n_bits: int) -> np.ndarray:
    expected = (n_bits + 3) // 4
    if len(hexstr) != expected:
        raise ContractError(
            f"hex bitstring has {len(hexstr)} digits, expected {expected} for {n_bits} bits")
    bits = np.zeros(expected * 4, dtype=bool)
    for i, ch in enumerate(hexstr.lower()):
        if ch not in _HEX_DIGITS:
            raise ContractError(f"invalid hex digit {ch!r} in bitstring")
        nibble = _HEX_DIGITS.index(ch)
        for j in range(4):
            bits[i * 4 + j] = bool(nibble & (1 << (3 - j)))
    if bits[n_bits:].any():
        raise ContractError("hex bitstring has nonzero padding bits")
    return bits[:n_bits]


def rle_encode(flat: np.ndarray) -> list[int]:
    """Run-length encode a flat boolean array; runs alternate starting with zeros."""
    flat = np.asarray(flat, dtype=bool).ravel()
    if flat.size == 0:
        return []
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(starts).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(runs: list[int], length: int) -> np.ndarray:
    flat = np.zeros(length, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run < 0:
            raise ContractError("RLE runs must be nonnegative")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != length:
        raise ContractError(f"RLE runs cover {pos} elements, expected {length}")
    return flat


def load_image(path: str | Path) -> ImageTensor:
    """Load a PNG or JPEG file as an ImageTensor (8-bit values divided by 255)."""
    with Image.open(path) as img:
        if img.mode == "L":
            pass
        elif img.mode in ("RGBA", "LA", "PA") or "transparency" in img.info:
            img = img.convert("RGBA")
        else:
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[..., None]
    return ImageTensor(arr.astype(np.float32) / 255.0)


def save_image(image: ImageTensor, path: str | Path) -> None:
    """Write an ImageTensor as an 8-bit PNG, rounding samples half-up."""
    arr = np.clip(np.floor(image.data * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if image.channels == 1:
        pil = Image.fromarray(arr[..., 0], mode="L")
    elif image.channels == 3:
        pil = Image.fromarray(arr, mode="RGB")
    else:
        pil = Image.fromarray(arr, mode="RGBA")
    pil.save(path, format="PNG")


def center_crop_to_divisible(image: ImageTensor, rows: int, cols: int) -> ImageTensor:
    """Largest centered crop whose sides are divisible by the grid shape."""
    h = (image.height // rows) * rows
    w = (image.width // cols) * cols
    if h < rows or w < cols:
        raise ShapeError(
            f"image {image.height}x{image.width} too small for a {rows}x{cols} grid")
    y0 = (image.height - h) // 2
    x0 = (image.width - w) // 2
    return ImageTensor(image.data[y0:y0 + h, x0:x0 + w, :])
