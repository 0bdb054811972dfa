"""Patch-level image mixing, occlusion attacks, and contrastive saliency metrics."""

from .attacks import (EVALUATED_MAX_LOSS, KIND_PATCH_DROP, KIND_PATCH_MIX,
                      KIND_PATCH_PERMUTE, AttackSpec, apply_patch_permutation,
                      invert_permutation, patch_drop, patch_mix_attack, patch_permute)
from .augment import (AugmentPolicy, CategoryDistribution, augment_batch, augment_pair,
                      cutmix, mix_labels, mixup, patch_mix)
from .crise import (RiseConfig, SaliencyMap, crise_map, estimate_with_masks,
                    exhaustive_cell_masks, generate_rise_masks,
                    inverse_patch_selectivity, patch_selectivity, softmax_normalize)
from .errors import (ContractError, DivisibilityError, GenerationError, PatchLabError,
                     ProtocolError, ShapeError, TransportError, VersionError)
from .harness import (DonorPool, EvalRecord, LabeledImage, LevelStats,
                      SelectivityRecord, SelectivityResult, SweepSummary, emit_plots,
                      load_image_dir, load_labeled_dataset, load_labels,
                      rank_categories, run_attack_sweep, run_selectivity_eval,
                      write_per_class_csv, write_records_csv, write_selectivity_csv,
                      write_summary_csv)
from .imaging import (ImageTensor, PatchGrid, PatchMask, center_crop_to_divisible,
                      load_image, make_grid, mask_from_text, mask_to_pixel_field,
                      sample_patch_mask, save_image)
from .oracle import (ContrastiveOracle, ExternalOracle, LinearProbeClassifier,
                     OracleScores, as_contrastive, contrastive_score,
                     external_oracle_connect, load_linear_probe, resolve_oracle,
                     save_linear_probe, score_batch)
from .rng import ALGORITHM, SeededRandomSource, derive_seed, round_half_up
from .smd import (OccluderSprite, OcclusionManifest, Placement, generate_smd,
                  load_sprite_library, place_occluders, replay_placements)

__version__ = "0.1.0"

__all__ = [
    "ALGORITHM", "AttackSpec", "AugmentPolicy", "CategoryDistribution",
    "ContractError", "ContrastiveOracle", "DivisibilityError", "DonorPool",
    "EVALUATED_MAX_LOSS", "EvalRecord", "ExternalOracle", "GenerationError",
    "ImageTensor", "KIND_PATCH_DROP", "KIND_PATCH_MIX", "KIND_PATCH_PERMUTE",
    "LabeledImage", "LevelStats", "LinearProbeClassifier", "OccluderSprite",
    "OcclusionManifest", "OracleScores", "PatchGrid", "PatchLabError", "PatchMask",
    "Placement", "ProtocolError", "RiseConfig", "SaliencyMap", "SeededRandomSource",
    "SelectivityRecord", "SelectivityResult", "ShapeError", "SweepSummary",
    "TransportError", "VersionError", "apply_patch_permutation", "as_contrastive",
    "augment_batch", "augment_pair", "center_crop_to_divisible", "contrastive_score",
    "crise_map", "cutmix", "derive_seed", "emit_plots", "estimate_with_masks",
    "exhaustive_cell_masks", "external_oracle_connect", "generate_rise_masks",
    "generate_smd", "inverse_patch_selectivity", "invert_permutation", "load_image",
    "load_image_dir", "load_labeled_dataset", "load_labels", "load_linear_probe",
    "load_sprite_library", "make_grid", "mask_from_text", "mask_to_pixel_field",
    "mix_labels", "mixup", "patch_drop", "patch_mix", "patch_mix_attack",
    "patch_permute", "patch_selectivity", "place_occluders", "rank_categories",
    "replay_placements", "resolve_oracle", "round_half_up", "run_attack_sweep",
    "run_selectivity_eval", "sample_patch_mask", "save_image", "save_linear_probe",
    "score_batch", "softmax_normalize", "write_per_class_csv", "write_records_csv",
    "write_selectivity_csv", "write_summary_csv",
]
