"""Occluded-dataset generation by compositing rotated alpha sprites.

Each generated image carries a manifest recording every placement, the
binary union occlusion mask (run-length encoded), and the achieved coverage,
so any output can be replayed bit-for-bit from its manifest and the sprite
library.  Coverage accounting is always on the union of the binary masks:
overlapping placements never double count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, GenerationError, ShapeError
from .imaging import ImageTensor, load_image, rle_decode, rle_encode, save_image
from .rng import SeededRandomSource

# Binary occlusion masks threshold the resampled alpha here.
ALPHA_THRESHOLD = 0.5

DEFAULT_TOLERANCE = 0.01
DEFAULT_SCALE_RANGE = (0.15, 0.35)
DEFAULT_OVERLAP_THRESHOLD = 0.15
DEFAULT_MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class OccluderSprite:
    """RGBA sprite cut from some source image, tagged with its category."""

    image: ImageTensor
    category_name: str
    source_id: str

    def __post_init__(self):
        if self.image.channels != 4:
            raise ShapeError(f"sprite {self.source_id!r} must be RGBA, got {self.image.channels} channels")
        if int((self.image.data[..., 3] >= ALPHA_THRESHOLD).sum()) == 0:
            raise ContractError(f"sprite {self.source_id!r} has no opaque pixels")


@dataclass(frozen=True)
class Placement:
    """One committed sprite instance; enough to re-render it exactly."""

    sprite_id: str
    rotation_degrees: float
    scale: float | None
    center_xy: tuple[float, float]


@dataclass
class OcclusionManifest:
    source_image: str
    target_fraction: float
    tolerance: float
    achieved_fraction: float
    occluder_category: str
    height: int
    width: int
    placements: list[Placement] = field(default_factory=list)
    union_mask_rle: list[int] = field(default_factory=list)

    def union_mask(self) -> np.ndarray:
        return rle_decode(self.union_mask_rle, self.height * self.width).reshape(
            self.height, self.width)

    def to_json_dict(self) -> dict:
        return {
            "source_image": self.source_image,
            "target_fraction": self.target_fraction,
            "tolerance": self.tolerance,
            "achieved_fraction": self.achieved_fraction,
            "occluder_category": self.occluder_category,
            "height": self.height,
            "width": self.width,
            "placements": [
                {
                    "sprite_id": p.sprite_id,
                    "rotation_degrees": p.rotation_degrees,
                    "scale": p.scale,
                    "center_xy": list(p.center_xy),
                }
                for p in self.placements
            ],
            "union_mask_rle": self.union_mask_rle,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "OcclusionManifest":
        return cls(
            source_image=d["source_image"],
            target_fraction=d["target_fraction"],
            tolerance=d["tolerance"],
            achieved_fraction=d["achieved_fraction"],
            occluder_category=d["occluder_category"],
            height=d["height"],
            width=d["width"],
            placements=[
                Placement(
                    sprite_id=p["sprite_id"],
                    rotation_degrees=p["rotation_degrees"],
                    scale=p["scale"],
                    center_xy=(p["center_xy"][0], p["center_xy"][1]),
                )
                for p in d["placements"]
            ],
            union_mask_rle=list(d["union_mask_rle"]),
        )


def _render_instance(sprite: OccluderSprite, scale: float | None, image_min_dim: int,
                     rotation_degrees: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resample one sprite instance.

    Returns (premultiplied rgb, alpha, binary mask), trimmed to the tight
    bounding box of nonzero alpha.  RGB is premultiplied before any
    interpolation so transparent texels cannot bleed color into edges.
    """
    rgba = sprite.image.data.astype(np.float64)
    alpha = rgba[..., 3]
    stack = np.concatenate([rgba[..., :3] * alpha[..., None], alpha[..., None]], axis=2)

    if scale is not None:
        native = max(stack.shape[0], stack.shape[1])
        factor = (scale * image_min_dim) / native
        stack = ndimage.zoom(stack, (factor, factor, 1.0), order=1, mode="constant",
                             cval=0.0, prefilter=False, grid_mode=False)
    if rotation_degrees % 360.0 != 0.0:
        stack = ndimage.rotate(stack, rotation_degrees, axes=(1, 0), reshape=True,
                               order=1, mode="constant", cval=0.0, prefilter=False)

    stack = np.clip(stack, 0.0, 1.0)
    alpha = stack[..., 3]
    rows = np.flatnonzero(alpha.max(axis=1) > 0.0)
    cols = np.flatnonzero(alpha.max(axis=0) > 0.0)
    if rows.size == 0 or cols.size == 0:
        # Downscaling can erase a thin sprite entirely.
        return (np.zeros((0, 0, 3)), np.zeros((0, 0)), np.zeros((0, 0), dtype=bool))
    stack = stack[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1, :]
    alpha = stack[..., 3]
    return stack[..., :3], alpha, alpha >= ALPHA_THRESHOLD


def _composite(canvas: np.ndarray, premult: np.ndarray, alpha: np.ndarray,
               top: int, left: int) -> None:
    h, w = alpha.shape
    region = canvas[top:top + h, left:left + w, :]
    if canvas.shape[2] == 1:
        src = premult.mean(axis=2, keepdims=True)
    else:
        src = premult
    blended = region * (1.0 - alpha[..., None]) + src
    canvas[top:top + h, left:left + w, :] = np.clip(blended, 0.0, 1.0).astype(np.float32)


def place_occluders(x: ImageTensor, sprites: list[OccluderSprite], target: float,
                    tol: float, rng: SeededRandomSource, *,
                    source_name: str = "",
                    scale_range: tuple[float, float] | None = DEFAULT_SCALE_RANGE,
                    rotation_range: tuple[float, float] = (0.0, 360.0),
                    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
                    max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> tuple[ImageTensor, OcclusionManifest]:
    """Composite sprite instances until coverage lands in [target-tol, target+tol].

    Instances are sampled as (uniform sprite, uniform rotation, uniform scale)
    and placed uniformly among positions that keep them fully inside the
    image.  Below ``overlap_threshold`` placements must not overlap; above
    it they may, and coverage is computed on the union.  A candidate that
    would overshoot the band is rejected and resampled.
    """
    if not sprites:
        raise ContractError("sprite set must not be empty")
    categories = {s.category_name for s in sprites}
    if len(categories) != 1:
        raise ContractError(f"sprites must share one category, got {sorted(categories)}")
    if not 0.0 <= target < 1.0:
        raise ContractError(f"target fraction must be in [0, 1), got {target}")
    if tol < 0.0:
        raise ContractError("tolerance must be nonnegative")
    if x.channels not in (1, 3):
        raise ShapeError("occlusion targets must be 1- or 3-channel images")

    h, w = x.height, x.width
    total = h * w
    canvas = np.array(x.data)
    union = np.zeros((h, w), dtype=bool)
    placements: list[Placement] = []
    forbid_overlap = target <= overlap_threshold

    achieved = 0.0
    attempts = 0
    while abs(achieved - target) > tol:
        if attempts >= max_attempts:
            raise GenerationError(
                f"gave up after {max_attempts} attempts at {achieved:.4f} coverage "
                f"(target {target} +/- {tol})", best_achieved=achieved)
        attempts += 1

        sprite = sprites[int(rng.integers(0, len(sprites)))]
        rotation = float(rng.uniform(*rotation_range))
        scale = None if scale_range is None else float(rng.uniform(*scale_range))
        premult, alpha, binary = _render_instance(sprite, scale, min(h, w), rotation)
        ih, iw = alpha.shape
        if ih == 0 or ih > h or iw > w:
            continue

        top = int(rng.integers(0, h - ih + 1))
        left = int(rng.integers(0, w - iw + 1))
        window = union[top:top + ih, left:left + iw]
        if forbid_overlap and bool((binary & window).any()):
            continue
        gained = int((binary & ~window).sum())
        candidate = (int(union.sum()) + gained) / total
        if candidate > target + tol:
            continue

        _composite(canvas, premult, alpha, top, left)
        window |= binary
        achieved = candidate
        placements.append(Placement(
            sprite_id=sprite.source_id,
            rotation_degrees=rotation,
            scale=scale,
            center_xy=(left + iw / 2.0, top + ih / 2.0),
        ))

    manifest = OcclusionManifest(
        source_image=source_name,
        target_fraction=float(target),
        tolerance=float(tol),
        achieved_fraction=int(union.sum()) / total,
        occluder_category=sprites[0].category_name,
        height=h,
        width=w,
        placements=placements,
        union_mask_rle=rle_encode(union.ravel()),
    )
    return ImageTensor(canvas), manifest


def replay_placements(x: ImageTensor, sprites_by_id: dict[str, OccluderSprite],
                      manifest: OcclusionManifest) -> tuple[ImageTensor, np.ndarray, list[np.ndarray]]:
    """Re-render a manifest onto its source image.

    Returns the composited image, the union mask, and the per-placement
    binary masks in placement order.
    """
    if (x.height, x.width) != (manifest.height, manifest.width):
        raise ShapeError(
            f"image is {x.height}x{x.width} but manifest says {manifest.height}x{manifest.width}")
    canvas = np.array(x.data)
    union = np.zeros((x.height, x.width), dtype=bool)
    instance_masks = []
    for p in manifest.placements:
        sprite = sprites_by_id[p.sprite_id]
        premult, alpha, binary = _render_instance(sprite, p.scale, min(x.height, x.width),
                                                  p.rotation_degrees)
        ih, iw = alpha.shape
        top = int(round(p.center_xy[1] - ih / 2.0))
        left = int(round(p.center_xy[0] - iw / 2.0))
        _composite(canvas, premult, alpha, top, left)
        full = np.zeros((x.height, x.width), dtype=bool)
        full[top:top + ih, left:left + iw] = binary
        union |= full
        instance_masks.append(full)
    return ImageTensor(canvas), union, instance_masks


def load_sprite_library(root: str | Path) -> dict[str, list[OccluderSprite]]:
    """Load a ``<category>/<sprite>.png`` tree of RGBA sprites."""
    root = Path(root)
    library: dict[str, list[OccluderSprite]] = {}
    for category_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        sprites = []
        for png in sorted(category_dir.glob("*.png")):
            image = load_image(png)
            if image.channels != 4:
                raise ShapeError(f"sprite file {png} is not RGBA")
            sprites.append(OccluderSprite(
                image=image,
                category_name=category_dir.name,
                source_id=f"{category_dir.name}/{png.stem}",
            ))
        if sprites:
            library[category_dir.name] = sprites
    if not library:
        raise ContractError(f"no RGBA sprites found under {root}")
    return library


def sprites_by_id(library: dict[str, list[OccluderSprite]]) -> dict[str, OccluderSprite]:
    return {s.source_id: s for sprites in library.values() for s in sprites}


def generate_smd(image_dir: str | Path, sprite_library: dict[str, list[OccluderSprite]],
                 targets: list[float], rng: SeededRandomSource, out_dir: str | Path, *,
                 tol: float = DEFAULT_TOLERANCE,
                 scale_range: tuple[float, float] | None = DEFAULT_SCALE_RANGE,
                 overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                 log=None) -> Path:
    """Occlude every image in image_dir at every target level.

    Writes one PNG per (image, target) under ``out_dir/target_<t>/`` and an
    ``index.jsonl`` with one manifest record per attempt; failures become
    error records rather than silent omissions.  Returns the index path.
    """
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    categories = sorted(sprite_library)
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))

    index_path = out_dir / "index.jsonl"
    with open(index_path, "w", encoding="utf-8") as index:
        for path in paths:
            source = load_image(path)
            for target in targets:
                child = rng.derive(path.name, repr(float(target)))
                category = categories[int(child.integers(0, len(categories)))]
                record: dict
                try:
                    occluded, manifest = place_occluders(
                        source, sprite_library[category], target, tol, child,
                        source_name=path.name, scale_range=scale_range,
                        overlap_threshold=overlap_threshold, max_attempts=max_attempts)
                except GenerationError as err:
                    if log is not None:
                        log.warning("skipped %s at target %g: %s", path.name, target, err)
                    record = {"source_image": path.name, "target_fraction": float(target),
                              "error": str(err), "best_achieved": err.best_achieved}
                else:
                    target_dir = out_dir / f"target_{target:g}"
                    target_dir.mkdir(exist_ok=True)
                    out_png = target_dir / f"{path.stem}.png"
                    save_image(occluded, out_png)
                    record = manifest.to_json_dict()
                    record["output_image"] = str(out_png.relative_to(out_dir))
                index.write(json.dumps(record, sort_keys=True) + "\n")
    return index_path
