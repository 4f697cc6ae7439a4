"""stainbench command line: dataset preparation, training, evaluation,
mixed-effects analysis, report summaries, and the curation service.

Every failure exits 1 with a single machine-parseable line on stderr
(`stainbench-error: <Type>: <message>`); every artifact-producing run writes
a run_manifest.json recording inputs, seed, and code version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .dataset import (
    apply_curation,
    apply_split,
    extract_tiles,
    harmonize_pair,
    read_decisions_file,
    read_roi_sidecar,
    stratified_split,
)
from .errors import ConfigError, StainbenchError
from .evaluate import evaluate_pairs, make_extractor, pairs_from_manifest
from .imaging import (
    HER2_SCORES,
    ImageTensor,
    Manifest,
    TileRecord,
    load_image,
    read_manifest,
    save_image,
    write_manifest,
)
from .lmm import (
    build_design,
    observations_from_reports,
    read_run_registry,
    reml_fit,
    wald_report,
    write_wald_table,
)
from .metrics import load_feature_file, read_report, write_report
from .train import (
    FRAMEWORKS,
    load_pairs_from_manifest,
    toy_labeled_tiles,
    toy_two_domain,
    train_framework,
)


def _write_run_manifest(out_dir: Path, command: str, seed: int | None,
                        inputs: dict, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- dataset subcommands ---

def cmd_dataset_tile(args) -> int:
    source = load_image(args.source_image)
    target = load_image(args.target_image)
    if source.data.shape != target.data.shape:
        raise StainbenchError("source and target images must share dimensions")
    rois = read_roi_sidecar(args.roi_file)
    if args.case_id not in rois:
        raise StainbenchError(f"no ROI lines for case {args.case_id!r} in {args.roi_file}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    if args.append and Path(args.manifest).exists():
        records = list(read_manifest(args.manifest).records)
    kept_total = dropped_total = 0
    for roi in rois[args.case_id]:
        tiling = extract_tiles(source, roi, args.tile_px, args.min_tissue)
        dropped_total += len(tiling.dropped)
        for y, x, tile in tiling.kept:
            tile_id = f"{args.case_id}_{y:06d}_{x:06d}"
            src_path = out_dir / f"{tile_id}_src.png"
            tgt_path = out_dir / f"{tile_id}_tgt.png"
            save_image(tile, src_path)
            save_image(ImageTensor(target.data[:, y:y + args.tile_px, x:x + args.tile_px]),
                       tgt_path)
            records.append(TileRecord(
                tile_id=tile_id, case_id=args.case_id, her2_score=args.her2_score,
                path_source=str(src_path), path_target=str(tgt_path)))
            kept_total += 1
    manifest = Manifest(tuple(records), dataset_name=args.dataset_name,
                        microns_per_pixel=args.mpp)
    write_manifest(manifest, args.manifest)
    _write_run_manifest(out_dir, "dataset tile", None,
                        {"source_image": args.source_image,
                         "target_image": args.target_image,
                         "roi_file": args.roi_file},
                        [args.manifest])
    print(f"tiled case {args.case_id}: {kept_total} kept, {dropped_total} low-tissue")
    return 0


def cmd_dataset_harmonize(args) -> int:
    manifest = read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    new_records = []
    for rec in manifest.records:
        pair = (load_image(rec.path_source), load_image(rec.path_target))
        harmonized = harmonize_pair(pair, args.mode)
        for i, (src, tgt) in enumerate(harmonized):
            suffix = f"q{i}" if args.mode == "crop4" else "d2"
            tile_id = f"{rec.tile_id}_{suffix}"
            src_path = out_dir / f"{tile_id}_src.png"
            tgt_path = out_dir / f"{tile_id}_tgt.png"
            save_image(src, src_path)
            save_image(tgt, tgt_path)
            new_records.append(TileRecord(
                tile_id=tile_id, case_id=rec.case_id, her2_score=rec.her2_score,
                path_source=str(src_path), path_target=str(tgt_path),
                split=rec.split, status=rec.status, artifact_tag=rec.artifact_tag))
    mpp = manifest.microns_per_pixel * (1.0 if args.mode == "crop4" else 2.0)
    out_manifest = Manifest(tuple(new_records), manifest.dataset_name, mpp)
    write_manifest(out_manifest, args.out_manifest)
    _write_run_manifest(out_dir, "dataset harmonize", None,
                        {"manifest": args.manifest, "mode": args.mode},
                        [args.out_manifest])
    print(f"harmonized {len(manifest)} pairs -> {len(new_records)} at {args.mode}")
    return 0


def cmd_dataset_split(args) -> int:
    manifest = read_manifest(args.manifest)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise StainbenchError("--fractions needs three comma-separated numbers")
    plan = stratified_split(manifest, fractions, args.seed)
    updated = apply_split(manifest, plan)
    write_manifest(updated, args.out_manifest)
    counts = updated.split_counts()
    _write_run_manifest(Path(args.out_manifest).parent, "dataset split", args.seed,
                        {"manifest": args.manifest, "fractions": list(fractions)},
                        [args.out_manifest])
    print("split counts: " + " ".join(f"{k}={counts.get(k, 0)}"
                                      for k in ("train", "val", "test")))
    return 0


def cmd_dataset_curate(args) -> int:
    manifest = read_manifest(args.manifest)
    if args.keep_all:
        decisions = {rec.tile_id: "kept" for rec in manifest.records
                     if rec.status == "pending"}
        tags: dict[str, str] = {}
    else:
        if not args.decisions:
            raise StainbenchError("provide --decisions FILE or --keep-all")
        decisions, tags = read_decisions_file(args.decisions)
    updated, report = apply_curation(manifest, decisions, tags)
    write_manifest(updated, args.out_manifest)
    _write_run_manifest(Path(args.out_manifest).parent, "dataset curate", None,
                        {"manifest": args.manifest,
                         "decisions": args.decisions or "keep-all"},
                        [args.out_manifest])
    print(f"curation: total={report.total} pending={report.pending} "
          f"kept={report.kept} dropped={report.dropped} "
          f"splits={json.dumps(report.split_counts, sort_keys=True)}")
    return 0


# --- train / eval / analyze / report ---

def _load_training_data(cfg: RunConfig, seed: int):
    source = cfg.get_str("data", "source")
    n_toy = cfg.get_int("data", "toy_pairs")
    if source == "toy:two-domain":
        return toy_two_domain(n_toy, seed=seed), None
    if source == "toy:tiles":
        return toy_labeled_tiles(n_toy, seed=seed)
    manifest = read_manifest(source)
    limit = cfg.get_int("data", "limit") or None
    pairs, labels = load_pairs_from_manifest(manifest, cfg.get_str("data", "split"), limit)
    if not pairs:
        raise StainbenchError(f"no kept {cfg.get_str('data', 'split')} tiles in {source}")
    return pairs, labels


def _framework_kwargs(framework: str, cfg: RunConfig, pairs, labels) -> dict:
    """Loss weights and schedule parameters flow from the run config."""
    from . import diffusion as df
    from .losses import CompositeWeights, ContrastiveConfig, PyramidConfig

    loss_f = lambda key: cfg.get_float("loss", key)
    if framework == "ppx2px":
        return {
            "lambda_adv": loss_f("lambda_adv"),
            "lambda_l1": loss_f("lambda_l1"),
            "lambda_pyr": loss_f("lambda_pyr"),
            "pyramid": PyramidConfig(num_scales=cfg.get_int("loss", "pyramid_scales")),
        }
    if framework == "asp":
        return {
            "lambda_adv": loss_f("lambda_adv"),
            "lambda_l1": loss_f("lambda_l1"),
            "lambda_asp": loss_f("lambda_asp"),
            "contrastive": ContrastiveConfig(
                temperature=loss_f("temperature"),
                patches_per_image=cfg.get_int("loss", "patches_per_image")),
        }
    if framework == "bcistainer":
        return {
            "labels": labels,
            "weights": CompositeWeights(
                lambda_adv=loss_f("lambda_adv"),
                lambda_mae=loss_f("lambda_mae"),
                lambda_ssim=loss_f("lambda_ssim"),
                lambda_cls=loss_f("lambda_cls"),
                ssim_window=cfg.get_int("loss", "ssim_window")),
        }
    T = cfg.get_int("schedule", "T")
    if framework == "ddib":
        return {"schedule": df.linear_beta_schedule(
            T, cfg.get_float("schedule", "beta_min"),
            cfg.get_float("schedule", "beta_max"))}
    if framework == "cm":
        return {"config": df.CmConfig(
            sigma_min=cfg.get_float("schedule", "cm_sigma_min"),
            sigma_max=cfg.get_float("schedule", "cm_sigma_max"),
            sigma_data=cfg.get_float("schedule", "cm_sigma_data"),
            rho=cfg.get_float("schedule", "cm_rho"),
            n_sigmas=cfg.get_int("schedule", "cm_n_sigmas"))}
    if framework == "bbdm":
        return {"schedule": df.bridge_schedule(T, cfg.get_float("schedule", "bridge_s"))}
    return {}


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    framework = cfg.require("run", "framework")
    if framework not in FRAMEWORKS:
        raise ConfigError(f"run.framework must be one of {FRAMEWORKS}, got {framework!r}",
                          field="run.framework")
    seed = cfg.get_int("run", "seed", required=True)
    out_dir = Path(cfg.get_str("run", "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs, labels = _load_training_data(cfg, seed)
    kwargs = dict(
        steps=cfg.get_int("train", "steps"),
        lr=cfg.get_float("train", "lr"),
        width=cfg.get_int("train", "width"),
        levels=cfg.get_int("train", "levels"),
        seed=seed,
    )
    kwargs.update(_framework_kwargs(framework, cfg, pairs, labels))
    result = train_framework(framework, pairs, **kwargs)

    outputs = []
    net_names = {"ppx2px": ["generator"], "asp": ["generator"],
                 "bcistainer": ["generator"], "bbdm": ["model"], "cm": ["model"],
                 "ddib": ["model_src", "model_tgt"]}[framework]
    for name in net_names:
        path = out_dir / f"{framework}_{name}.ckpt"
        result.nets[name].save(path)
        outputs.append(str(path))
    losses_path = out_dir / "losses.tsv"
    losses_path.write_text(
        "\n".join(f"{i}\t{v:.10g}" for i, v in enumerate(result.losses)) + "\n",
        encoding="utf-8")
    outputs.append(str(losses_path))
    _write_run_manifest(out_dir, f"train {framework}", seed,
                        {"config": str(args.config),
                         "config_sha256": _sha256(Path(args.config)),
                         "data": cfg.get_str("data", "source")},
                        outputs)
    print(f"trained {framework}: initial loss {result.initial_loss:.6g}, "
          f"final loss {result.final_loss:.6g}, checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config)
    seed = cfg.get_int("run", "seed", required=True)
    out_dir = Path(cfg.get_str("run", "output_dir"))
    manifest_path = cfg.require("eval", "manifest")
    generated_dir = cfg.require("eval", "generated_dir")
    manifest = read_manifest(manifest_path)
    pairs = pairs_from_manifest(manifest, generated_dir, cfg.get_str("eval", "split"))

    feat_a = feat_b = None
    if cfg.get_str("eval", "feature_file_a"):
        feat_a = load_feature_file(cfg.get_str("eval", "feature_file_a"))
        feat_b = load_feature_file(cfg.require("eval", "feature_file_b"))
    extractor = make_extractor(cfg.get_str("eval", "extractor"),
                               cfg.get_int("eval", "extractor_seed"))
    report = evaluate_pairs(
        pairs,
        extractor=extractor,
        ssim_window=cfg.get_int("eval", "ssim_window"),
        kid_subsets=cfg.get_int("eval", "kid_subsets"),
        kid_subset_size=cfg.get_int("eval", "kid_subset_size") or None,
        seed=seed,
        features_a=feat_a,
        features_b=feat_b,
    )
    report_path = out_dir / cfg.get_str("eval", "report")
    write_report(report, report_path)
    _write_run_manifest(out_dir, "eval", seed,
                        {"config": str(args.config),
                         "config_sha256": _sha256(Path(args.config)),
                         "manifest": manifest_path,
                         "generated_dir": generated_dir},
                        [str(report_path)])
    print(f"evaluated {len(report.rows)} tiles: fid={report.fid:.6g} "
          f"kid={report.kid_mean:.6g}±{report.kid_std:.6g} -> {report_path}")
    return 0


def cmd_analyze_lmm(args) -> int:
    entries = read_run_registry(args.registry)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = ["ssim", "psnr", "lpips"] if args.metric == "all" else [args.metric]
    outputs = []
    for metric in metrics:
        table = observations_from_reports(entries, metric)
        X, Z_model, Z_image, y, _, _ = build_design(table)
        fit = reml_fit(X, Z_model, Z_image, y)
        rows = wald_report(fit, alpha=args.alpha)
        out_path = out_dir / f"lmm_{metric}.tsv"
        extra = (f"\tsigma2_model={fit.sigma2_model:.10g}"
                 f"\tsigma2_image={fit.sigma2_image:.10g}"
                 f"\tsigma2_residual={fit.sigma2_residual:.10g}"
                 f"\tconverged={fit.converged}")
        write_wald_table(rows, out_path, metric=metric, extra_header=extra)
        outputs.append(str(out_path))
        stars = [r.name for r in rows if r.starred]
        print(f"lmm[{metric}]: starred={stars if stars else 'none'} -> {out_path}")
    _write_run_manifest(out_dir, "analyze lmm", None,
                        {"registry": args.registry, "alpha": args.alpha}, outputs)
    return 0


def cmd_report(args) -> int:
    lines = ["#fields\treport\ttiles\tmedian_ssim\tmedian_ms_ssim\tmedian_psnr"
             "\tmedian_lpips\tfid\tkid_mean\tkid_std"]
    for path in args.reports:
        rep = read_report(path)
        med = lambda vals: float(np.median([v for v in vals if np.isfinite(v)] or [np.nan]))
        lines.append("\t".join([
            str(path), str(len(rep.rows)),
            f"{med([r.ssim for r in rep.rows]):.6g}",
            f"{med([r.ms_ssim for r in rep.rows]):.6g}",
            f"{med([r.psnr for r in rep.rows]):.6g}",
            f"{med([r.lpips for r in rep.rows]):.6g}",
            f"{rep.fid:.6g}", f"{rep.kid_mean:.6g}", f"{rep.kid_std:.6g}",
        ]))
    text = "\n".join(lines)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(args.manifest, token=args.token, reviewer=args.reviewer,
                     frontend_dir=args.frontend_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_config(args) -> int:
    if args.defaults:
        print(RunConfig.defaults().render())
        return 0
    raise StainbenchError("config: nothing to do (did you mean --defaults?)")


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainbench",
                                     description="virtual staining benchmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset preparation pipeline")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)

    tile = ds_sub.add_parser("tile", help="tile a registered source/target image pair")
    tile.add_argument("--source-image", required=True)
    tile.add_argument("--target-image", required=True)
    tile.add_argument("--case-id", required=True)
    tile.add_argument("--her2-score", required=True, choices=HER2_SCORES)
    tile.add_argument("--roi-file", required=True)
    tile.add_argument("--tile-px", type=int, default=1024)
    tile.add_argument("--min-tissue", type=float, default=0.25)
    tile.add_argument("--out-dir", required=True)
    tile.add_argument("--manifest", required=True)
    tile.add_argument("--dataset-name", default="unnamed")
    tile.add_argument("--mpp", type=float, default=0.25)
    tile.add_argument("--append", action="store_true",
                      help="extend an existing manifest instead of replacing it")
    tile.set_defaults(func=cmd_dataset_tile)

    harm = ds_sub.add_parser("harmonize", help="bring 1024px tiles to 512px")
    harm.add_argument("--mode", required=True, choices=("crop4", "downscale2"))
    harm.add_argument("--manifest", required=True)
    harm.add_argument("--out-dir", required=True)
    harm.add_argument("--out-manifest", required=True)
    harm.set_defaults(func=cmd_dataset_harmonize)

    split = ds_sub.add_parser("split", help="case-stratified split of kept tiles")
    split.add_argument("--fractions", required=True, help="train,val,test e.g. 0.5,0.25,0.25")
    split.add_argument("--seed", type=int, required=True)
    split.add_argument("--manifest", required=True)
    split.add_argument("--out-manifest", required=True)
    split.set_defaults(func=cmd_dataset_split)

    curate = ds_sub.add_parser("curate", help="apply keep/drop decisions")
    curate.add_argument("--decisions", help="TSV: tile_id, decision, optional tag")
    curate.add_argument("--keep-all", action="store_true")
    curate.add_argument("--manifest", required=True)
    curate.add_argument("--out-manifest", required=True)
    curate.set_defaults(func=cmd_dataset_curate)

    tr = sub.add_parser("train", help="train one framework from a run config")
    tr.add_argument("--config", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="metric report for generated tiles")
    ev.add_argument("--config", required=True)
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze", help="statistical analysis")
    an_sub = an.add_subparsers(dest="analyze_command", required=True)
    lmm = an_sub.add_parser("lmm", help="mixed-effects framework/dataset comparison")
    lmm.add_argument("--registry", required=True,
                     help="TSV: model_id, framework, dataset, report_path")
    lmm.add_argument("--metric", default="all", choices=("ssim", "psnr", "lpips", "all"))
    lmm.add_argument("--alpha", type=float, default=0.001)
    lmm.add_argument("--out-dir", required=True)
    lmm.set_defaults(func=cmd_analyze_lmm)

    rep = sub.add_parser("report", help="summarize metric report files")
    rep.add_argument("reports", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)

    srv = sub.add_parser("serve", help="run the curation HTTP service")
    srv.add_argument("--manifest", required=True)
    srv.add_argument("--port", type=int, default=8008)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--token", default=None)
    srv.add_argument("--reviewer", default="anonymous")
    srv.add_argument("--frontend-dir", default=None)
    srv.set_defaults(func=cmd_serve)

    cf = sub.add_parser("config", help="configuration helpers")
    cf.add_argument("--defaults", action="store_true", help="print all defaults")
    cf.set_defaults(func=cmd_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StainbenchError as exc:
        message = str(exc).replace("\n", " ")
        print(f"stainbench-error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
