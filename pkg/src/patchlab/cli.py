"""patchlab command line.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures.  Options
resolve as CLI > --config JSON file > built-in defaults, and every run writes
the fully-resolved configuration next to its outputs so it can be replayed.
Progress and warnings go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import augment as augment_mod
from .crise import RiseConfig, crise_map, softmax_normalize
from .errors import PatchLabError
from .harness import (ATTACK_NONE, load_image_dir, load_labeled_dataset, load_labels,
                      run_attack_sweep, run_selectivity_eval, write_per_class_csv,
                      write_records_csv, write_selectivity_csv, write_summary_csv,
                      emit_plots)
from .imaging import ImageTensor, load_image, make_grid, sample_patch_mask, save_image
from .oracle import as_contrastive, resolve_oracle
from .rng import SeededRandomSource, derive_seed
from .smd import (DEFAULT_MAX_ATTEMPTS, DEFAULT_OVERLAP_THRESHOLD, DEFAULT_SCALE_RANGE,
                  DEFAULT_TOLERANCE, generate_smd, load_sprite_library)

log = logging.getLogger("patchlab")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname.lower(),
                           "event": record.getMessage()}, sort_keys=True)


def _setup_logging(verbosity: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(getattr(logging, verbosity.upper()))


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"grid must look like ROWSxCOLS, got {text!r}")
    rows, cols = int(parts[0]), int(parts[1])
    if rows < 1 or cols < 1:
        raise ValueError(f"grid sides must be positive, got {text!r}")
    return rows, cols


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _parse_pair(text: str) -> tuple[float, float]:
    values = _parse_float_list(text)
    if len(values) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return values[0], values[1]


# Per-subcommand defaults; the config file and CLI flags override in that order.
_DEFAULTS = {
    "mix": {"grid": "7x7", "method": "patch_mixing", "eps": 0.1, "seed": 0,
            "ratio": None, "beta": None},
    "attack": {"grid": "7x7", "loss": 0.3, "fill": 0.0, "seed": 0, "donor_dir": None},
    "smd": {"targets": "0.1,0.2,0.3", "seed": 0, "tol": DEFAULT_TOLERANCE,
            "scale": f"{DEFAULT_SCALE_RANGE[0]},{DEFAULT_SCALE_RANGE[1]}",
            "overlap_threshold": DEFAULT_OVERLAP_THRESHOLD,
            "max_attempts": DEFAULT_MAX_ATTEMPTS},
    "crise": {"n_masks": 14000, "stride": 14, "keep_prob": 0.5, "seed": 0,
              "batch_size": 64, "out_raw": None, "keep_contrast_bias": False},
    "eval": {"attack": "drop", "grid": "7x7", "levels": "0,0.2,0.4,0.6,0.8",
             "fill": 0.0, "seed": 0, "batch_size": 64, "workers": 1,
             "donor_dir": None},
    "selectivity": {"grid": "7x7", "level": 0.3, "n_masks": 14000, "stride": 14,
                    "keep_prob": 0.5, "seed": 0, "per_class_cap": 5,
                    "batch_size": 64, "donor_dir": None,
                    "keep_contrast_bias": False},
}

_ATTACK_ALIASES = {
    "mix": attacks_mod.KIND_PATCH_MIX,
    "drop": attacks_mod.KIND_PATCH_DROP,
    "permute": attacks_mod.KIND_PATCH_PERMUTE,
    attacks_mod.KIND_PATCH_MIX: attacks_mod.KIND_PATCH_MIX,
    attacks_mod.KIND_PATCH_DROP: attacks_mod.KIND_PATCH_DROP,
    attacks_mod.KIND_PATCH_PERMUTE: attacks_mod.KIND_PATCH_PERMUTE,
    ATTACK_NONE: ATTACK_NONE,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchlab")
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("mix", help="blend two images and write the mix plus a sidecar")
    p.add_argument("image_a", nargs="?", default=S)
    p.add_argument("image_b", nargs="?", default=S)
    p.add_argument("--out-dir", default=S)
    p.add_argument("--grid", default=S)
    p.add_argument("--method", default=S,
                   choices=["patch_mixing", "mixup", "cutmix", "auto"])
    p.add_argument("--ratio", type=float, default=S)
    p.add_argument("--beta", default=S, help="a,b parameters for a Beta-drawn ratio")
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("attack", help="apply an occlusion attack to a folder of images")
    p.add_argument("in_dir", nargs="?", default=S)
    p.add_argument("out_dir", nargs="?", default=S)
    p.add_argument("--kind", default=S,
                   choices=sorted(set(_ATTACK_ALIASES) - {ATTACK_NONE}))
    p.add_argument("--grid", default=S)
    p.add_argument("--loss", type=float, default=S)
    p.add_argument("--fill", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--donor-dir", default=S)

    p = sub.add_parser("smd", help="superimpose sprite occluders over a folder of images")
    p.add_argument("in_dir", nargs="?", default=S)
    p.add_argument("out_dir", nargs="?", default=S)
    p.add_argument("--sprites", default=S)
    p.add_argument("--targets", default=S)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--scale", default=S)
    p.add_argument("--overlap-threshold", type=float, default=S)
    p.add_argument("--max-attempts", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("crise", help="contrastive saliency map for one image")
    p.add_argument("image", nargs="?", default=S)
    p.add_argument("--oracle", default=S)
    p.add_argument("--category", type=int, default=S)
    p.add_argument("--n-masks", type=int, default=S)
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--keep-prob", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--out-raw", default=S)
    p.add_argument("--keep-contrast-bias", action="store_true", default=S)

    p = sub.add_parser("eval", help="attack sweep with accuracy summary and curves")
    p.add_argument("in_dir", nargs="?", default=S)
    p.add_argument("out_dir", nargs="?", default=S)
    p.add_argument("--labels", default=S)
    p.add_argument("--oracle", default=S)
    p.add_argument("--attack", default=S, choices=sorted(_ATTACK_ALIASES))
    p.add_argument("--grid", default=S)
    p.add_argument("--levels", default=S)
    p.add_argument("--fill", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--workers", type=int, default=S)
    p.add_argument("--donor-dir", default=S)

    p = sub.add_parser("selectivity", help="out-of-context saliency mass after attack")
    p.add_argument("in_dir", nargs="?", default=S)
    p.add_argument("out_dir", nargs="?", default=S)
    p.add_argument("--labels", default=S)
    p.add_argument("--oracle", default=S)
    p.add_argument("--grid", default=S)
    p.add_argument("--level", type=float, default=S)
    p.add_argument("--n-masks", type=int, default=S)
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--keep-prob", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--per-class-cap", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--donor-dir", default=S)
    p.add_argument("--keep-contrast-bias", action="store_true", default=S)
    return parser


def _resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and explicit CLI values."""
    command = args.command
    merged = dict(_DEFAULTS.get(command, {}))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            parser.error(f"cannot read config file {args.config}: {err}")
        section = loaded.get(command, loaded) if isinstance(loaded, dict) else None
        if not isinstance(section, dict):
            parser.error(f"config file {args.config} must hold a JSON object")
        unknown = [k for k in section if k not in merged and k not in (
            "image_a", "image_b", "in_dir", "out_dir", "image", "out", "labels",
            "oracle", "sprites", "category", "kind", "method", "attack")]
        if unknown:
            parser.error(f"config file sets unknown options: {sorted(unknown)}")
        merged.update(section)
    for key, value in vars(args).items():
        if key not in ("config", "command", "log_level"):
            merged[key] = value
    merged["command"] = command
    merged["log_level"] = args.log_level
    return merged


def _require(parser, cfg: dict, *names: str) -> None:
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        parser.error(f"{cfg['command']} requires: " + ", ".join(
            n if n in ("image_a", "image_b", "in_dir", "out_dir", "image") else "--" + n.replace("_", "-")
            for n in missing))


def _write_run_config(cfg: dict, path: Path) -> None:
    payload = {k: v for k, v in sorted(cfg.items())}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_mix(parser, cfg) -> int:
    _require(parser, cfg, "image_a", "image_b", "out_dir")
    if cfg.get("ratio") is not None and cfg.get("beta") is not None:
        parser.error("--ratio and --beta are mutually exclusive; pass only one")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_rc = _parse_grid(cfg["grid"])
    rng = SeededRandomSource(cfg["seed"])
    a_path, b_path = Path(cfg["image_a"]), Path(cfg["image_b"])
    x_a, x_b = load_image(a_path), load_image(b_path)

    if cfg.get("beta") is not None:
        a, b = _parse_pair(cfg["beta"])
        ratio = float(rng.beta(a, b))
    elif cfg.get("ratio") is not None:
        ratio = float(cfg["ratio"])
    else:
        ratio = None

    method = cfg["method"]
    sidecar: dict = {"source_a": a_path.name, "source_b": b_path.name}
    if method == "auto":
        policy = augment_mod.AugmentPolicy(smoothing_eps=cfg["eps"], grid=grid_rc)
        k = 2  # labels are not known here; a 2-way placeholder keeps shapes legal
        y = augment_mod.CategoryDistribution.one_hot(0, k)
        mixed, _, chosen = augment_mod.augment_pair(x_a, y, x_b, y, policy, rng,
                                                    ratio=ratio)
        sidecar["method"] = chosen
        sidecar["r"] = None
    elif method == "patch_mixing":
        grid = make_grid(x_a.height, x_a.width, *grid_rc)
        if ratio is None:
            ratio = float(rng.beta(0.3, 0.3))
        mask = sample_patch_mask(grid, ratio, rng)
        mixed = augment_mod.patch_mix(x_a, x_b, mask)
        sidecar["method"] = method
        sidecar["mask"] = mask.to_text()
        sidecar["r"] = mask.popcount / grid.n_patches
    elif method == "mixup":
        if ratio is None:
            ratio = float(rng.beta(0.3, 0.3))
        mixed = augment_mod.mixup(x_a, x_b, 1.0 - ratio)
        sidecar["method"] = method
        sidecar["r"] = ratio
    else:  # cutmix
        if ratio is None:
            ratio = float(rng.beta(0.3, 0.3))
        mixed, achieved = augment_mod.cutmix(x_a, x_b, 1.0 - ratio, rng)
        sidecar["method"] = method
        sidecar["r"] = achieved

    out_png = out_dir / f"{a_path.stem}__{b_path.stem}.png"
    save_image(mixed, out_png)
    (out_dir / f"{a_path.stem}__{b_path.stem}.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_config(cfg, out_dir / "run_config.json")
    log.info("wrote %s", out_png)
    return 0


def _cmd_attack(parser, cfg) -> int:
    _require(parser, cfg, "in_dir", "out_dir", "kind")
    if cfg["kind"] not in _ATTACK_ALIASES or cfg["kind"] == ATTACK_NONE:
        parser.error(f"--kind must be one of mix, drop, permute; got {cfg['kind']!r}")
    kind = _ATTACK_ALIASES[cfg["kind"]]
    loss = float(cfg["loss"])
    if not 0.0 <= loss <= attacks_mod.EVALUATED_MAX_LOSS:
        parser.error(f"--loss must lie in [0, {attacks_mod.EVALUATED_MAX_LOSS}], got {loss}")
    grid_rc = _parse_grid(cfg["grid"])
    if kind == attacks_mod.KIND_PATCH_MIX and cfg.get("donor_dir") is None:
        parser.error("--kind mix requires --donor-dir")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    images = load_image_dir(cfg["in_dir"])
    if not images:
        parser.error(f"no images found in {cfg['in_dir']}")
    donors = load_image_dir(cfg["donor_dir"]) if cfg.get("donor_dir") else []

    for index, (image_id, image) in enumerate(images):
        rng = SeededRandomSource(derive_seed(cfg["seed"], image_id))
        sidecar = {"source": image_id, "kind": kind, "grid": cfg["grid"],
                   "loss": loss, "seed": cfg["seed"]}
        if kind == attacks_mod.KIND_PATCH_PERMUTE:
            attacked, perm = attacks_mod.patch_permute(image, grid_rc, rng)
            sidecar["permutation"] = [int(v) for v in perm]
        elif kind == attacks_mod.KIND_PATCH_MIX:
            donor_id, donor = donors[index % len(donors)]
            spec = attacks_mod.AttackSpec(kind=kind, grid=grid_rc, loss_fraction=loss,
                                          seed=cfg["seed"])
            attacked, mask = attacks_mod.patch_mix_attack(image, donor, spec, rng)
            sidecar["mask"] = mask.to_text()
            sidecar["donor"] = donor_id
        else:
            spec = attacks_mod.AttackSpec(kind=kind, grid=grid_rc, loss_fraction=loss,
                                          fill=cfg["fill"], seed=cfg["seed"])
            attacked, mask = attacks_mod.patch_drop(image, spec, rng)
            sidecar["mask"] = mask.to_text()
            sidecar["fill"] = cfg["fill"]
        save_image(attacked, out_dir / f"{image_id}.png")
        (out_dir / f"{image_id}.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.info("attacked %s", image_id)
    _write_run_config(cfg, out_dir / "run_config.json")
    return 0


def _cmd_smd(parser, cfg) -> int:
    _require(parser, cfg, "in_dir", "out_dir", "sprites")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    library = load_sprite_library(cfg["sprites"])
    targets = _parse_float_list(cfg["targets"])
    rng = SeededRandomSource(cfg["seed"])
    index = generate_smd(
        cfg["in_dir"], library, targets, rng, out_dir,
        tol=float(cfg["tol"]), scale_range=_parse_pair(cfg["scale"]),
        overlap_threshold=float(cfg["overlap_threshold"]),
        max_attempts=int(cfg["max_attempts"]), log=log)
    _write_run_config(cfg, out_dir / "run_config.json")
    log.info("wrote %s", index)
    return 0


# Piecewise-linear colormap anchors for the saliency overlay PNG.
_CMAP = np.array([
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.318],
    [0.741, 0.873, 0.150],
    [0.993, 0.906, 0.144],
], dtype=np.float64)


def _colorize(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    unit = np.zeros_like(values) if span == 0 else (values - values.min()) / span
    pos = unit * (len(_CMAP) - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(_CMAP) - 1)
    frac = (pos - lo)[..., None]
    return _CMAP[lo] * (1.0 - frac) + _CMAP[hi] * frac


def _cmd_crise(parser, cfg) -> int:
    _require(parser, cfg, "image", "oracle", "category", "out")
    image = load_image(Path(cfg["image"]))
    oracle = as_contrastive(resolve_oracle(cfg["oracle"]),
                            negate_bias=not cfg["keep_contrast_bias"])
    rise = RiseConfig(n_masks=int(cfg["n_masks"]), cell_stride=int(cfg["stride"]),
                      keep_prob=float(cfg["keep_prob"]), seed=int(cfg["seed"]))
    saliency = crise_map(image, oracle, int(cfg["category"]), rise,
                         batch_size=int(cfg["batch_size"]))

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg.get("out_raw"):
        Path(cfg["out_raw"]).write_bytes(saliency.values.astype("<f4").tobytes())
    rgb = image.data.mean(axis=2, keepdims=True).repeat(3, axis=2).astype(np.float64)
    overlay = np.clip(0.5 * rgb + 0.5 * _colorize(saliency.values), 0.0, 1.0)
    save_image(ImageTensor(overlay.astype(np.float32)), out)
    _write_run_config(cfg, out.with_name(out.stem + ".config.json"))
    log.info("wrote %s", out)
    return 0


def _cmd_eval(parser, cfg) -> int:
    _require(parser, cfg, "in_dir", "out_dir", "labels", "oracle")
    if cfg["attack"] not in _ATTACK_ALIASES:
        parser.error(f"--attack must be one of {sorted(_ATTACK_ALIASES)}; got {cfg['attack']!r}")
    attack = _ATTACK_ALIASES[cfg["attack"]]
    levels = _parse_float_list(cfg["levels"])
    bad = [lv for lv in levels if not 0.0 <= lv <= attacks_mod.EVALUATED_MAX_LOSS]
    if bad:
        parser.error(f"--levels must lie in [0, {attacks_mod.EVALUATED_MAX_LOSS}], got {bad}")
    labels = load_labels(cfg["labels"])
    dataset, missing = load_labeled_dataset(cfg["in_dir"], labels)
    if not dataset:
        parser.error(f"no labeled images found in {cfg['in_dir']}")
    for image_id in missing:
        log.warning("no label for %s; skipped", image_id)
    donors = None
    if attack == attacks_mod.KIND_PATCH_MIX:
        if cfg.get("donor_dir") is None:
            parser.error("--attack mix requires --donor-dir")
        donors, donor_missing = load_labeled_dataset(cfg["donor_dir"], labels)
        for image_id in donor_missing:
            log.warning("no label for donor %s; skipped", image_id)

    oracle = resolve_oracle(cfg["oracle"])
    summary, records = run_attack_sweep(
        dataset, oracle, attack, _parse_grid(cfg["grid"]), levels, int(cfg["seed"]),
        donors=donors, fill=float(cfg["fill"]), batch_size=int(cfg["batch_size"]),
        workers=int(cfg["workers"]), skipped=len(missing))

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_csv(summary, out_dir / "summary.csv")
    write_records_csv(records, out_dir / "records.csv")
    (out_dir / "curves.svg").write_text(emit_plots({attack: summary}), encoding="utf-8")
    _write_run_config(cfg, out_dir / "run_config.json")
    log.info("evaluated %d images at %d levels", len(dataset), len(levels))
    return 0


def _cmd_selectivity(parser, cfg) -> int:
    _require(parser, cfg, "in_dir", "out_dir", "labels", "oracle")
    labels = load_labels(cfg["labels"])
    dataset, missing = load_labeled_dataset(cfg["in_dir"], labels)
    if not dataset:
        parser.error(f"no labeled images found in {cfg['in_dir']}")
    for image_id in missing:
        log.warning("no label for %s; skipped", image_id)
    donors = None
    if cfg.get("donor_dir"):
        donors, _ = load_labeled_dataset(cfg["donor_dir"], labels)

    oracle = as_contrastive(resolve_oracle(cfg["oracle"]),
                            negate_bias=not cfg["keep_contrast_bias"])
    rise = RiseConfig(n_masks=int(cfg["n_masks"]), cell_stride=int(cfg["stride"]),
                      keep_prob=float(cfg["keep_prob"]), seed=int(cfg["seed"]))
    result = run_selectivity_eval(
        dataset, oracle, _parse_grid(cfg["grid"]), float(cfg["level"]), rise,
        int(cfg["seed"]), donors=donors, per_class_cap=int(cfg["per_class_cap"]),
        batch_size=int(cfg["batch_size"]))

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_per_class_csv(result, out_dir / "per_class.csv")
    write_selectivity_csv(result, oracle.kind, out_dir / "selectivity_summary.csv")
    _write_run_config(cfg, out_dir / "run_config.json")
    log.info("mean inverse selectivity %.6f over %d images",
             result.mean_inverse_selectivity, len(result.records))
    return 0


_COMMANDS = {
    "mix": _cmd_mix,
    "attack": _cmd_attack,
    "smd": _cmd_smd,
    "crise": _cmd_crise,
    "eval": _cmd_eval,
    "selectivity": _cmd_selectivity,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    cfg = _resolve(parser, args)
    try:
        return _COMMANDS[args.command](parser, cfg)
    except ValueError as err:
        parser.error(str(err))  # malformed option values are usage errors
    except (PatchLabError, OSError) as err:
        log.error("%s: %s", type(err).__name__, err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
