"""Shared builders for synthetic manifests, images, and the paper-scale
count constructions used by both the module tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from stainbench.imaging import ImageTensor, Manifest, TileRecord, save_image

SCORES = ("0", "1+", "2+", "3+")


def build_manifest(case_sizes, name="synthetic", mpp=0.5, status="kept"):
    """case_sizes: iterable of (case_id, score, n_tiles [, status])."""
    records = []
    for spec in case_sizes:
        case_id, score, n = spec[:3]
        st = spec[3] if len(spec) > 3 else status
        for i in range(n):
            records.append(TileRecord(
                tile_id=f"{case_id}_{i:06d}", case_id=case_id, her2_score=score,
                path_source=f"/data/{case_id}_{i}_he.png",
                path_target=f"/data/{case_id}_{i}_ihc.png",
                status=st))
    return Manifest(tuple(records), dataset_name=name, microns_per_pixel=mpp)


def her2match_cases():
    """17 cases whose kept-tile counts drive the greedy split to the paper's
    11610/3582/5980 given fractions proportional to those counts."""
    cover_train = (2894, 2894, 2894, 2893)
    cover_val = (896, 896, 895, 895)
    cover_test = (1495, 1495, 1495, 1495)
    extras = {"0": [10, 8], "1+": [7], "2+": [6], "3+": [4]}
    cases = []
    for k, s in enumerate(SCORES):
        cases.append((f"case{s}T", s, cover_train[k]))
        cases.append((f"case{s}V", s, cover_val[k]))
        cases.append((f"case{s}E", s, cover_test[k]))
        for j, size in enumerate(extras[s]):
            cases.append((f"case{s}X{j}", s, size))
    return cases


def her2match_pending_manifest():
    """36,209 pending tiles over 17 cases plus the decisions that keep 21,172."""
    keep = {(case, score): n for case, score, n in her2match_cases()}
    cases = sorted(keep)
    total_keep = sum(keep.values())
    pad_total = 36209 - total_keep
    pad_each, pad_rem = divmod(pad_total, len(cases))
    records, decisions = [], {}
    for ci, (case, score) in enumerate(cases):
        n_keep = keep[(case, score)]
        n_total = n_keep + pad_each + (1 if ci < pad_rem else 0)
        for i in range(n_total):
            tid = f"{case}_{i:06d}"
            records.append(TileRecord(tile_id=tid, case_id=case, her2_score=score,
                                      path_source="he.png", path_target="ihc.png"))
            decisions[tid] = "kept" if i < n_keep else "dropped"
    manifest = Manifest(tuple(records), "HER2match", 0.25)
    return manifest, decisions


def bci_cases():
    """51 cases totalling 4,873 kept tiles; greedy split gives 3896/977."""
    cover_train = (716, 716, 716, 716)
    cover_val = (245, 244, 244, 244)
    extra_sizes = list(range(3, 46))
    extras = {"0": extra_sizes[:13], "1+": extra_sizes[13:23],
              "2+": extra_sizes[23:33], "3+": extra_sizes[33:]}
    cases = []
    for k, s in enumerate(SCORES):
        cases.append((f"bci{s}T", s, cover_train[k]))
        cases.append((f"bci{s}V", s, cover_val[k]))
        for j, size in enumerate(extras[s]):
            cases.append((f"bci{s}X{j}", s, size))
    return cases


HER2MATCH_FRACTIONS = (11610 / 21172, 3582 / 21172, 5980 / 21172)
BCI_FRACTIONS = (3896 / 4873, 977 / 4873, 0.0)


def random_image(shape=(3, 16, 16), seed=0, low=0.0, high=1.0) -> ImageTensor:
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.uniform(low, high, size=shape))


def write_png(path, array) -> ImageTensor:
    """Write a PNG and return the 8-bit-quantized image a reader will see."""
    image = ImageTensor(np.rint(np.asarray(array) * 255.0) / 255.0)
    save_image(image, path)
    return image


def lmm_synthetic(seed=42, n_models=6, n_images=200,
                  beta=(0.5, 0.1, -0.05, 0.08),
                  s_model=0.02, s_image=0.05, s_res=0.03):
    """The seeded generating process for mixed-model recovery tests."""
    from stainbench.lmm import Observation, ObservationTable

    rng = np.random.default_rng(seed)
    beta = np.asarray(beta)
    models = [f"m{i}" for i in range(n_models)]
    images = [f"img{i}" for i in range(n_images)]
    b_model = dict(zip(models, rng.normal(0, s_model, n_models)))
    b_image = dict(zip(images, rng.normal(0, s_image, n_images)))
    rows = []
    for mi, m in enumerate(models):
        framework = "GAN" if mi >= n_models // 2 else "DM"
        for dataset in ("BCI", "BCI-clean"):
            for img in images:
                x = np.array([1.0, framework == "GAN", dataset == "BCI-clean",
                              (framework == "GAN") * (dataset == "BCI-clean")])
                y = float(x @ beta + b_model[m] + b_image[img] + rng.normal(0, s_res))
                rows.append(Observation(y, framework, dataset, m, img))
    return ObservationTable(tuple(rows)), beta
