"""Dataset construction: tissue masking, ROI tiling, resolution harmonization,
case-stratified splitting, and curation application."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    EmptyHistogramError,
    MissingFileError,
    RoiBoundsError,
    SplitInfeasibleError,
    StainbenchError,
    TileSizeError,
    UnknownTileIdError,
)
from .imaging import ImageTensor, Manifest


@dataclass(frozen=True)
class Rect:
    """Pixel rectangle, (y, x) is the top-left corner."""
    y: int
    x: int
    height: int
    width: int


@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray  # bool, shape (h, w)
    threshold: int

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def tissue_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class TilingResult:
    kept: tuple[tuple[int, int, ImageTensor], ...]   # (y, x, tile)
    dropped: tuple[tuple[int, int], ...]             # offsets of low-tissue tiles

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        return tuple((y, x) for y, x, _ in self.kept)


@dataclass(frozen=True)
class SplitPlan:
    assignment: dict[str, str]  # case_id -> split
    seed: int


@dataclass(frozen=True)
class CurationReport:
    total: int
    pending: int
    kept: int
    dropped: int
    split_counts: dict[str, int]


def otsu_threshold(histogram) -> int:
    """Threshold maximizing inter-class variance over a 256-bin histogram.

    Class 0 is bins <= t. Candidate thresholds are those where both classes
    are non-empty; ties break toward the smallest t. If all mass sits in a
    single bin there is no two-class threshold and that bin index is returned.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise StainbenchError(f"histogram must have 256 bins, got shape {hist.shape}")
    if np.any(hist < 0):
        raise StainbenchError("histogram counts must be nonnegative")
    total = hist.sum()
    if total == 0:
        raise EmptyHistogramError("all-zero histogram")

    nonzero = np.nonzero(hist)[0]
    if nonzero.size == 1:
        return int(nonzero[0])

    bins = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)                 # mass of class 0 at threshold t
    m0 = np.cumsum(hist * bins)          # first moment of class 0
    w1 = total - w0
    mu_total = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mu_total - m0) / w1
        sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    sigma_b = np.where(valid, sigma_b, -np.inf)
    return int(np.argmax(sigma_b))  # argmax returns the first (smallest) maximizer


def grayscale_u8(image: ImageTensor) -> np.ndarray:
    """Unweighted channel mean quantized to integer levels 0..255."""
    gray = image.data.mean(axis=0)
    return np.clip(np.rint(gray * 255.0), 0, 255).astype(np.int64)


def tissue_mask(image: ImageTensor) -> TissueMask:
    """Otsu tissue mask: tissue is at or below the threshold (darker than glass).

    Degenerate single-class images (uniform white, uniform black) yield an
    all-false mask so blank glass is never labeled as tissue.
    """
    gray = grayscale_u8(image)
    hist = np.bincount(gray.ravel(), minlength=256)[:256]
    nonzero = np.nonzero(hist)[0]
    if nonzero.size <= 1:
        return TissueMask(np.zeros(gray.shape, dtype=bool), int(nonzero[0]) if nonzero.size else 0)
    threshold = otsu_threshold(hist)
    return TissueMask(gray <= threshold, threshold)


def extract_tiles(
    image: ImageTensor,
    roi: Rect,
    tile_px: int,
    min_tissue: float = 0.25,
    mask: TissueMask | None = None,
) -> TilingResult:
    """Non-overlapping grid tiles fully inside the ROI, anchored at its origin.

    Tiles whose tissue fraction (from the whole-image mask) is below
    `min_tissue` are dropped; their offsets are still reported so the grid
    partition is auditable. Offsets are (y, x) in raster order.
    """
    if tile_px < 1:
        raise TileSizeError(f"tile_px must be >= 1, got {tile_px}")
    if roi.y < 0 or roi.x < 0 or roi.height < 0 or roi.width < 0 \
            or roi.y + roi.height > image.height or roi.x + roi.width > image.width:
        raise RoiBoundsError(
            f"roi {roi} outside image bounds ({image.height}, {image.width})"
        )
    if mask is None:
        mask = tissue_mask(image)
    if (mask.height, mask.width) != (image.height, image.width):
        raise StainbenchError("mask shape does not match image")

    kept: list[tuple[int, int, ImageTensor]] = []
    dropped: list[tuple[int, int]] = []
    for y in range(roi.y, roi.y + roi.height - tile_px + 1, tile_px):
        for x in range(roi.x, roi.x + roi.width - tile_px + 1, tile_px):
            frac = float(mask.mask[y:y + tile_px, x:x + tile_px].mean())
            if frac >= min_tissue:
                tile = ImageTensor(image.data[:, y:y + tile_px, x:x + tile_px])
                kept.append((y, x, tile))
            else:
                dropped.append((y, x))
    return TilingResult(tuple(kept), tuple(dropped))


def harmonize_pair(
    pair: tuple[ImageTensor, ImageTensor],
    mode: str,
) -> list[tuple[ImageTensor, ImageTensor]]:
    """Bring a 1024 px tile pair to 512 px.

    crop4 splits both stains into four aligned quadrants; downscale2 averages
    2x2 pixel blocks (exact box mean). Both stains get the identical transform.
    """
    src, tgt = pair
    for img in (src, tgt):
        if (img.height, img.width) != (1024, 1024):
            raise TileSizeError(
                f"harmonize_pair expects 1024x1024 inputs, got {img.height}x{img.width}"
            )
    if mode == "crop4":
        out = []
        for y in (0, 512):
            for x in (0, 512):
                out.append((
                    ImageTensor(src.data[:, y:y + 512, x:x + 512]),
                    ImageTensor(tgt.data[:, y:y + 512, x:x + 512]),
                ))
        return out
    if mode == "downscale2":
        return [(ImageTensor(box_mean_2x2(src.data)), ImageTensor(box_mean_2x2(tgt.data)))]
    raise StainbenchError(f"unknown harmonization mode: {mode!r}")


def box_mean_2x2(data: np.ndarray) -> np.ndarray:
    c, h, w = data.shape
    return data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def stratified_split(
    manifest: Manifest,
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitPlan:
    """Assign whole cases to train/val/test, approximating tile-count fractions.

    Only kept tiles count. Every split with a positive fraction must cover
    every HER2 score present among kept tiles (coverage phase assigns one case
    per score to each active split, largest cases to the largest remaining
    targets; the rest go greedily to the split with the largest tile deficit).
    Deterministic given (manifest, fractions, seed): the seed only breaks ties
    between equal-sized cases.
    """
    names = ("train", "val", "test")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise SplitInfeasibleError(f"fractions must be nonnegative and sum to 1, got {fr}")
    active = [name for name, f in zip(names, fr) if f > 0]
    if not active:
        raise SplitInfeasibleError("at least one fraction must be positive")

    kept = [rec for rec in manifest.records if rec.status == "kept"]
    if not kept:
        raise SplitInfeasibleError("manifest has no kept tiles to split")

    case_tiles: dict[str, int] = {}
    case_score: dict[str, str] = {}
    for rec in kept:
        case_tiles[rec.case_id] = case_tiles.get(rec.case_id, 0) + 1
        prev = case_score.setdefault(rec.case_id, rec.her2_score)
        if prev != rec.her2_score:
            raise SplitInfeasibleError(
                f"case {rec.case_id} carries multiple HER2 scores ({prev}, {rec.her2_score})"
            )
    scores = sorted({rec.her2_score for rec in kept})
    by_score: dict[str, list[str]] = {s: [] for s in scores}
    for case, score in case_score.items():
        by_score[score].append(case)
    for score, cases in by_score.items():
        if len(cases) < len(active):
            raise SplitInfeasibleError(
                f"score {score} has {len(cases)} case(s) but {len(active)} splits need coverage"
            )

    total = len(kept)
    target = {name: f * total for name, f in zip(names, fr)}
    assigned_tiles = {name: 0 for name in active}
    assignment: dict[str, str] = {}

    rng = random.Random(seed)

    def case_order(cases: list[str]) -> list[str]:
        cases = sorted(cases)
        rng.shuffle(cases)
        # stable sort on size keeps the shuffled order among equal-sized cases
        return sorted(cases, key=lambda c: -case_tiles[c])

    def deficits() -> list[str]:
        # largest remaining tile deficit first; fixed name order breaks ties
        return sorted(active, key=lambda nm: (-(target[nm] - assigned_tiles[nm]), names.index(nm)))

    def assign(case: str, split: str) -> None:
        assignment[case] = split
        assigned_tiles[split] += case_tiles[case]

    # coverage phase: one case per score into each active split
    for score in scores:
        ordered_cases = case_order(by_score[score])
        for split in deficits():
            assign(ordered_cases.pop(0), split)

    # greedy phase: remaining cases to the hungriest split
    remaining = [c for c in sorted(case_tiles) if c not in assignment]
    for case in case_order(remaining):
        assign(case, deficits()[0])

    return SplitPlan(assignment, seed)


def apply_split(manifest: Manifest, plan: SplitPlan) -> Manifest:
    """Stamp the plan's split onto kept records; others stay unassigned."""
    records = []
    for rec in manifest.records:
        if rec.status == "kept" and rec.case_id in plan.assignment:
            records.append(replace(rec, split=plan.assignment[rec.case_id]))
        else:
            records.append(rec)
    return Manifest(tuple(records), manifest.dataset_name, manifest.microns_per_pixel)


def apply_curation(
    manifest: Manifest,
    decisions: dict[str, str],
    tags: dict[str, str] | None = None,
) -> tuple[Manifest, CurationReport]:
    """Apply keep/drop decisions; dropped tiles leave their splits.

    `decisions` maps tile_id -> "kept" | "dropped". Unknown ids are an error.
    Returns the updated manifest and a counts report.
    """
    tags = tags or {}
    known = {rec.tile_id for rec in manifest.records}
    for tile_id, decision in decisions.items():
        if tile_id not in known:
            raise UnknownTileIdError(tile_id)
        if decision not in ("kept", "dropped"):
            raise StainbenchError(f"invalid decision {decision!r} for tile {tile_id}")
    records = []
    for rec in manifest.records:
        if rec.tile_id in decisions:
            rec = rec.with_status(decisions[rec.tile_id], tags.get(rec.tile_id))
        records.append(rec)
    updated = Manifest(tuple(records), manifest.dataset_name, manifest.microns_per_pixel)
    counts = updated.status_counts()
    report = CurationReport(
        total=len(updated),
        pending=counts["pending"],
        kept=counts["kept"],
        dropped=counts["dropped"],
        split_counts=updated.split_counts(),
    )
    return updated, report


def read_roi_sidecar(path: str | Path) -> dict[str, list[Rect]]:
    """Sidecar lines are `case_id x y width height`; comments start with #."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    rois: dict[str, list[Rect]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise StainbenchError(
                    f"{path}:{line_no}: expected `case_id x y width height`, got {line!r}"
                )
            case_id = parts[0]
            try:
                x, y, width, height = (int(p) for p in parts[1:])
            except ValueError:
                raise StainbenchError(f"{path}:{line_no}: non-integer ROI geometry")
            rois.setdefault(case_id, []).append(Rect(y=y, x=x, height=height, width=width))
    return rois


def read_decisions_file(path: str | Path) -> tuple[dict[str, str], dict[str, str]]:
    """Decisions file: `tile_id<TAB>decision[<TAB>artifact_tag]` per line."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    decisions: dict[str, str] = {}
    tags: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise StainbenchError(
                    f"{path}:{line_no}: expected `tile_id<TAB>decision[<TAB>tag]`"
                )
            decisions[parts[0]] = parts[1]
            if len(parts) == 3 and parts[2]:
                tags[parts[0]] = parts[2]
    return decisions, tags
