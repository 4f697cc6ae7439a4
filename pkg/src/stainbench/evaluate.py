"""Evaluation pipeline: pair generated tiles with manifest targets and build
the per-tile metric report plus set-level feature distances."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MissingFileError, StainbenchError
from .imaging import ImageTensor, Manifest, load_image
from .metrics import (
    FeatureStats,
    IdentityExtractor,
    MetricReport,
    RandomProjectionExtractor,
    TileMetrics,
    fid,
    kid,
    ms_ssim,
    perceptual_distance,
    psnr,
    ssim,
)


def make_extractor(name: str, seed: int = 0):
    if name == "random-projection":
        return RandomProjectionExtractor(seed=seed)
    if name == "identity":
        return IdentityExtractor()
    raise StainbenchError(f"unknown extractor {name!r} (use random-projection or identity)")


def feasible_ms_levels(height: int, width: int, window: int, cap: int = 5) -> int:
    """Largest level count (up to cap) whose coarsest scale still fits the window."""
    levels = 1
    size = min(height, width)
    while levels < cap and size // 2 >= window:
        size //= 2
        levels += 1
    return levels


def evaluate_pairs(
    named_pairs: list[tuple[str, ImageTensor, ImageTensor]],
    extractor=None,
    ssim_window: int = 11,
    kid_subsets: int = 20,
    kid_subset_size: int | None = None,
    seed: int = 0,
    features_a: np.ndarray | None = None,
    features_b: np.ndarray | None = None,
) -> MetricReport:
    """named_pairs holds (tile_id, generated, target); rows come out sorted
    by tile_id so reports are byte-stable under input permutation.

    features_a/features_b, when given, replace the extractor embeddings for
    FID/KID (the import path for externally computed features).
    """
    if not named_pairs:
        raise StainbenchError("nothing to evaluate")
    extractor = extractor or RandomProjectionExtractor(seed=seed)
    named_pairs = sorted(named_pairs, key=lambda item: item[0])
    h, w = named_pairs[0][1].height, named_pairs[0][1].width
    levels = feasible_ms_levels(h, w, ssim_window)

    rows = []
    gen_feats, tgt_feats = [], []
    for tile_id, gen, tgt in named_pairs:
        if gen.data.shape != tgt.data.shape:
            raise StainbenchError(f"tile {tile_id}: generated/target shape mismatch")
        rows.append(TileMetrics(
            tile_id=tile_id,
            ssim=ssim(gen, tgt, window=ssim_window),
            ms_ssim=ms_ssim(gen, tgt, levels=levels, window=ssim_window),
            psnr=psnr(gen.data, tgt.data),
            lpips=perceptual_distance(gen, tgt, extractor),
        ))
        if features_a is None:
            gen_feats.append(extractor.embed(gen))
            tgt_feats.append(extractor.embed(tgt))

    if features_a is None:
        gen_arr = np.stack(gen_feats)
        tgt_arr = np.stack(tgt_feats)
    else:
        gen_arr = np.asarray(features_a, dtype=np.float64)
        tgt_arr = np.asarray(features_b, dtype=np.float64)
    fid_value = fid(FeatureStats.from_features(gen_arr),
                    FeatureStats.from_features(tgt_arr))
    subset = kid_subset_size or min(1000, gen_arr.shape[0], tgt_arr.shape[0])
    kid_mean, kid_std = kid(gen_arr, tgt_arr, subset_size=subset,
                            subsets=kid_subsets, seed=seed)
    name = getattr(extractor, "name", "custom") if features_a is None else "imported"
    return MetricReport(tuple(rows), fid=fid_value, kid_mean=kid_mean,
                        kid_std=kid_std, extractor=name)


def pairs_from_manifest(manifest: Manifest, generated_dir: str | Path,
                        split: str = "test"):
    """Match kept manifest tiles of a split with <tile_id>.png in generated_dir."""
    generated_dir = Path(generated_dir)
    pairs = []
    for rec in manifest.records:
        if rec.status != "kept":
            continue
        if split != "all" and rec.split != split:
            continue
        gen_path = generated_dir / f"{rec.tile_id}.png"
        if not gen_path.exists():
            raise MissingFileError(f"no generated tile for {rec.tile_id}: {gen_path}")
        pairs.append((rec.tile_id, load_image(gen_path), load_image(rec.path_target)))
    if not pairs:
        raise StainbenchError(f"no kept tiles with split={split!r} in manifest")
    return pairs
