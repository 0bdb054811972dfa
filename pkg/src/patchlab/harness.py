"""Sweep attacks over labeled image folders and aggregate oracle accuracy.

All orchestration here is deterministic: images are visited in sorted order,
per-image random streams are derived from (sweep seed, image id, level), and
every CSV and SVG is formatted with fixed precision, so identical inputs and
seeds reproduce identical output bytes.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import (KIND_PATCH_DROP, KIND_PATCH_MIX, KIND_PATCH_PERMUTE, KINDS,
                      AttackSpec, patch_drop, patch_mix_attack, patch_permute)
from .crise import RiseConfig, crise_map, inverse_patch_selectivity, softmax_normalize
from .errors import ContractError
from .imaging import ImageTensor, load_image
from .oracle import ContrastiveOracle, score_batch
from .rng import SeededRandomSource, derive_seed

ATTACK_NONE = "none"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class LabeledImage:
    image_id: str
    image: ImageTensor
    label: int


@dataclass(frozen=True)
class EvalRecord:
    """One (image, attack level) scoring outcome."""

    image_id: str
    ground_truth: int
    attack_kind: str
    level: float
    top5: tuple[int, ...]

    @property
    def top1(self) -> int:
        return self.top5[0]

    @property
    def correct1(self) -> bool:
        return self.ground_truth == self.top1

    @property
    def correct5(self) -> bool:
        return self.ground_truth in self.top5


@dataclass(frozen=True)
class LevelStats:
    level: float
    top1_acc: float
    top5_acc: float
    n: int
    errors: int


@dataclass
class SweepSummary:
    attack_kind: str
    oracle_kind: str
    levels: list[LevelStats]


def rank_categories(scores: np.ndarray, top_k: int = 5) -> tuple[int, ...]:
    """Indices of the top_k scores, descending; ties went to the lower index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    return tuple(int(i) for i in order[:min(top_k, scores.size)])


def load_labels(path: str | Path) -> dict[str, int]:
    """Two-column CSV image_id,category_index; a header row is tolerated."""
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 2:
                raise ContractError(f"label row needs image_id,category_index: {row!r}")
            try:
                labels[row[0].strip()] = int(row[1])
            except ValueError:
                if labels:
                    raise ContractError(f"bad category index in label row {row!r}")
                continue  # header row
    return labels


def load_labeled_dataset(image_dir: str | Path,
                         labels: dict[str, int]) -> tuple[list[LabeledImage], list[str]]:
    """Pair image files with labels; files without a label are reported, not read."""
    image_dir = Path(image_dir)
    dataset: list[LabeledImage] = []
    missing: list[str] = []
    for path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        image_id = path.stem
        if image_id not in labels:
            missing.append(image_id)
            continue
        dataset.append(LabeledImage(image_id, load_image(path), labels[image_id]))
    return dataset, missing


def load_image_dir(image_dir: str | Path) -> list[tuple[str, ImageTensor]]:
    image_dir = Path(image_dir)
    return [(p.stem, load_image(p))
            for p in sorted(q for q in image_dir.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)]


class DonorPool:
    """Round-robin donor images, skipping donors that share the query label."""

    def __init__(self, donors: list[LabeledImage]):
        if not donors:
            raise ContractError("donor pool must not be empty")
        self._donors = donors
        self._cursor = 0

    def next_for(self, label: int) -> LabeledImage:
        for _ in range(len(self._donors)):
            donor = self._donors[self._cursor]
            self._cursor = (self._cursor + 1) % len(self._donors)
            if donor.label != label:
                return donor
        raise ContractError(f"no donor with a label other than {label} is available")


def _attack_one(item: LabeledImage, kind: str, grid: tuple[int, int], level: float,
                fill: float, seed: int, donor: LabeledImage | None) -> ImageTensor:
    rng = SeededRandomSource(derive_seed(seed, item.image_id, repr(float(level))))
    if kind == ATTACK_NONE:
        return item.image
    if kind == KIND_PATCH_MIX:
        spec = AttackSpec(kind=kind, grid=grid, loss_fraction=level, seed=0)
        attacked, _ = patch_mix_attack(item.image, donor.image, spec, rng)
        return attacked
    if kind == KIND_PATCH_DROP:
        spec = AttackSpec(kind=kind, grid=grid, loss_fraction=level, fill=fill, seed=0)
        attacked, _ = patch_drop(item.image, spec, rng)
        return attacked
    if kind == KIND_PATCH_PERMUTE:
        attacked, _ = patch_permute(item.image, grid, rng)
        return attacked
    raise ContractError(f"unknown attack kind {kind!r}")


def run_attack_sweep(dataset: list[LabeledImage], oracle, attack_kind: str,
                     grid: tuple[int, int], levels: list[float], seed: int, *,
                     donors: list[LabeledImage] | None = None, fill: float = 0.0,
                     batch_size: int = 64, workers: int = 1,
                     skipped: int = 0) -> tuple[SweepSummary, list[EvalRecord]]:
    """Score every dataset image at every attack level.

    `skipped` counts inputs dropped before the sweep (e.g. unlabeled files);
    it is carried into every level's error column.
    """
    if attack_kind not in KINDS and attack_kind != ATTACK_NONE:
        raise ContractError(f"attack kind must be one of {KINDS + (ATTACK_NONE,)}")
    if not dataset:
        raise ContractError("dataset must not be empty")
    items = sorted(dataset, key=lambda it: it.image_id)

    records: list[EvalRecord] = []
    stats: list[LevelStats] = []
    for level in levels:
        donor_pool = DonorPool(donors) if donors else None
        assigned = []
        for item in items:
            donor = donor_pool.next_for(item.label) if (
                donor_pool and attack_kind == KIND_PATCH_MIX) else None
            assigned.append((item, donor))
        if attack_kind == KIND_PATCH_MIX and donor_pool is None:
            raise ContractError("patch_mix_attack sweeps need a donor pool")

        def attack(pair):
            item, donor = pair
            return _attack_one(item, attack_kind, grid, level, fill, seed, donor)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                attacked = list(pool.map(attack, assigned))
        else:
            attacked = [attack(pair) for pair in assigned]

        scored = score_batch(oracle, attacked, batch_size=batch_size)
        level_records = [
            EvalRecord(item.image_id, item.label, attack_kind, float(level),
                       rank_categories(s.scores))
            for (item, _), s in zip(assigned, scored)
        ]
        records.extend(level_records)
        n = len(level_records)
        stats.append(LevelStats(
            level=float(level),
            top1_acc=sum(r.correct1 for r in level_records) / n,
            top5_acc=sum(r.correct5 for r in level_records) / n,
            n=n,
            errors=skipped,
        ))
    return SweepSummary(attack_kind, oracle.kind, stats), records


@dataclass(frozen=True)
class SelectivityRecord:
    image_id: str
    ground_truth: int
    predicted: int
    level: float
    inverse_selectivity: float
    out_of_context_fraction: float


@dataclass
class SelectivityResult:
    level: float
    records: list[SelectivityRecord]

    @property
    def mean_inverse_selectivity(self) -> float:
        return float(np.mean([r.inverse_selectivity for r in self.records]))

    @property
    def mean_baseline(self) -> float:
        return float(np.mean([r.out_of_context_fraction for r in self.records]))

    def per_class(self) -> list[tuple[int, int, float, float]]:
        by_class: dict[int, list[SelectivityRecord]] = {}
        for r in self.records:
            by_class.setdefault(r.ground_truth, []).append(r)
        out = []
        for label in sorted(by_class):
            rs = by_class[label]
            out.append((label, len(rs),
                        float(np.mean([r.inverse_selectivity for r in rs])),
                        float(np.mean([r.out_of_context_fraction for r in rs]))))
        return out


def run_selectivity_eval(dataset: list[LabeledImage], oracle: ContrastiveOracle,
                         grid: tuple[int, int], level: float, cfg: RiseConfig, seed: int, *,
                         donors: list[LabeledImage] | None = None,
                         per_class_cap: int = 5,
                         batch_size: int = 64) -> SelectivityResult:
    """Attack, explain, and measure out-of-context saliency mass per image.

    Each image is patch-mixed at `level`, the attacked image's top-1 category
    (under the base oracle) picks the saliency target, and the normalized map
    is integrated over the attack mask.  The out-of-context pixel fraction is
    recorded alongside as the chance-level baseline.
    """
    if not dataset:
        raise ContractError("dataset must not be empty")
    by_class: dict[int, list[LabeledImage]] = {}
    for item in sorted(dataset, key=lambda it: it.image_id):
        bucket = by_class.setdefault(item.label, [])
        if len(bucket) < per_class_cap:
            bucket.append(item)
    chosen = [item for label in sorted(by_class) for item in by_class[label]]
    donor_pool = DonorPool(donors if donors else dataset)

    records: list[SelectivityRecord] = []
    for item in chosen:
        rng = SeededRandomSource(derive_seed(seed, item.image_id, repr(float(level))))
        donor = donor_pool.next_for(item.label)
        spec = AttackSpec(kind=KIND_PATCH_MIX, grid=grid, loss_fraction=level, seed=0)
        attacked, mask = patch_mix_attack(item.image, donor.image, spec, rng)

        scores = oracle.base.score_batch([attacked])[0]
        predicted = rank_categories(scores.scores, top_k=1)[0]
        image_cfg = replace(cfg, seed=derive_seed(seed, item.image_id, "saliency"))
        saliency = crise_map(attacked, oracle, predicted, image_cfg, batch_size=batch_size)
        inverse = inverse_patch_selectivity(softmax_normalize(saliency), mask)
        baseline = mask.popcount * mask.grid.patch_area / (item.image.height * item.image.width)
        records.append(SelectivityRecord(
            image_id=item.image_id, ground_truth=item.label, predicted=predicted,
            level=float(level), inverse_selectivity=inverse,
            out_of_context_fraction=float(baseline)))
    return SelectivityResult(level=float(level), records=records)


def write_records_csv(records: list[EvalRecord], path: str | Path) -> None:
    rows = sorted(records, key=lambda r: (r.level, r.image_id))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "level", "ground_truth",
                         "top1", "top2", "top3", "top4", "top5",
                         "correct1", "correct5"])
        for r in rows:
            ranked = list(r.top5) + [""] * (5 - len(r.top5))
            writer.writerow([r.image_id, f"{r.level:g}", r.ground_truth, *ranked,
                             int(r.correct1), int(r.correct5)])


def write_summary_csv(summary: SweepSummary, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["attack_kind", "oracle_kind", "level",
                         "top1_acc", "top5_acc", "n", "errors"])
        for s in summary.levels:
            writer.writerow([summary.attack_kind, summary.oracle_kind, f"{s.level:g}",
                             f"{s.top1_acc:.6f}", f"{s.top5_acc:.6f}", s.n, s.errors])


def write_per_class_csv(result: SelectivityResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "n", "mean_inverse_selectivity", "mean_baseline"])
        for label, n, inverse, baseline in result.per_class():
            writer.writerow([label, n, f"{inverse:.6f}", f"{baseline:.6f}"])


def write_selectivity_csv(result: SelectivityResult, oracle_kind: str,
                          path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["level", "n", "mean_inverse_selectivity", "mean_baseline",
                         "oracle_kind"])
        writer.writerow([f"{result.level:g}", len(result.records),
                         f"{result.mean_inverse_selectivity:.6f}",
                         f"{result.mean_baseline:.6f}", oracle_kind])


# Fixed geometry keeps the SVG output byte-stable across runs.
_SVG_W, _SVG_H = 640, 440
_PLOT = (70, 30, 600, 390)  # left, top, right, bottom in SVG pixels
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _sx(v: float) -> str:
    left, _, right, _ = _PLOT
    return f"{left + v * (right - left):.2f}"


def _sy(v: float) -> str:
    _, top, _, bottom = _PLOT
    return f"{bottom - v * (bottom - top):.2f}"


def emit_plots(series: dict[str, SweepSummary], metric: str = "top1_acc") -> str:
    """Accuracy-vs-level curves as a deterministic standalone SVG string.

    Both axes span [0, 1]; each summary becomes one polyline with circle
    markers, labeled in the legend in sorted key order.
    """
    if metric not in ("top1_acc", "top5_acc"):
        raise ContractError(f"metric must be top1_acc or top5_acc, got {metric!r}")
    left, top, right, bottom = _PLOT
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
    ]
    for i in range(6):
        v = i / 5.0
        parts.append(f'<line x1="{_sx(v)}" y1="{top}" x2="{_sx(v)}" y2="{bottom}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<line x1="{left}" y1="{_sy(v)}" x2="{right}" y2="{_sy(v)}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{_sx(v)}" y="{bottom + 18}" font-size="11" '
                     f'text-anchor="middle" font-family="monospace">{v:.1f}</text>')
        parts.append(f'<text x="{left - 8}" y="{_sy(v)}" font-size="11" '
                     f'text-anchor="end" dominant-baseline="middle" '
                     f'font-family="monospace">{v:.1f}</text>')
    parts.append(f'<rect x="{left}" y="{top}" width="{right - left}" '
                 f'height="{bottom - top}" fill="none" stroke="#333333"/>')
    parts.append(f'<text x="{(left + right) // 2}" y="{bottom + 36}" font-size="12" '
                 f'text-anchor="middle" font-family="monospace">information loss</text>')
    parts.append(f'<text x="16" y="{(top + bottom) // 2}" font-size="12" '
                 f'text-anchor="middle" font-family="monospace" '
                 f'transform="rotate(-90 16 {(top + bottom) // 2})">{metric}</text>')

    for idx, name in enumerate(sorted(series)):
        color = _PALETTE[idx % len(_PALETTE)]
        stats = series[name].levels
        points = [(s.level, getattr(s, metric)) for s in stats]
        coords = " ".join(f"{_sx(x)},{_sy(y)}" for x, y in points)
        if len(points) > 1:
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="2"/>')
        for x, y in points:
            parts.append(f'<circle cx="{_sx(x)}" cy="{_sy(y)}" r="3" fill="{color}"/>')
        ly = top + 16 + 16 * idx
        parts.append(f'<line x1="{right - 150}" y1="{ly}" x2="{right - 126}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{right - 120}" y="{ly + 4}" font-size="11" '
                     f'font-family="monospace">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
