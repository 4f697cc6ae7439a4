"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Tolerances and runtime budgets are asserted, not advisory.
"""

import math
import time

import numpy as np
import pytest

import helpers
from stainbench import autodiff as ad
from stainbench import diffusion as df
from stainbench import metrics
from stainbench.cli import main
from stainbench.dataset import apply_curation, apply_split, harmonize_pair, stratified_split
from stainbench.imaging import ImageTensor, Manifest, TileRecord, save_image, write_manifest
from stainbench.lmm import build_design, reml_fit, wald_report
from stainbench.losses import (
    CompositeWeights,
    ContrastiveConfig,
    PyramidConfig,
    asp_anchor_weights,
    asp_loss,
    bcistainer_composite,
    cgan_losses,
    patchnce_loss,
    pyramidal_l1_loss,
)
from stainbench.train import toy_two_domain, train_bbdm, train_cm, translate

from test_losses import (
    oracle_asp,
    oracle_bce_d,
    oracle_bce_g,
    oracle_ce,
    oracle_patchnce,
    oracle_pyramidal_l1,
)
from test_metrics import ssim_oracle
from test_diffusion import gaussian_eps_denoiser


def _budget(t0, limit, name):
    elapsed = time.monotonic() - t0
    assert elapsed < limit, f"{name} took {elapsed:.1f}s, budget {limit}s"
    return elapsed


def test_dataset_counts():
    """Pipeline reproduces the published BCI / BCI-clean / HER2match counts."""
    t0 = time.monotonic()

    # BCI: 4873 kept tiles over 51 cases split 3896/977
    bci = helpers.build_manifest(helpers.bci_cases(), name="BCI", mpp=0.46)
    assert len(bci) == 4873 and len({r.case_id for r in bci.records}) == 51
    plan = stratified_split(bci, helpers.BCI_FRACTIONS, seed=3)
    bci_split = apply_split(bci, plan)
    assert bci_split.split_counts() == {"train": 3896, "val": 977}

    # BCI-clean: curation of the split BCI manifest down to 1112/144
    train_ids = [r.tile_id for r in bci_split.records if r.split == "train"]
    val_ids = [r.tile_id for r in bci_split.records if r.split == "val"]
    decisions = {tid: "kept" for tid in train_ids[:1112] + val_ids[:144]}
    decisions.update({tid: "dropped" for tid in train_ids[1112:] + val_ids[144:]})
    _, clean_report = apply_curation(bci_split, decisions)
    assert clean_report.split_counts == {"train": 1112, "val": 144}
    assert clean_report.kept == 1112 + 144

    # HER2match: 36,209 pending -> 21,172 kept -> 11,610/3,582/5,980
    pending, her2_decisions = helpers.her2match_pending_manifest()
    assert len(pending) == 36209
    assert len({r.case_id for r in pending.records}) == 17
    curated, report = apply_curation(pending, her2_decisions)
    assert report.kept == 21172 and report.dropped == 36209 - 21172
    plan = stratified_split(curated, helpers.HER2MATCH_FRACTIONS, seed=7)
    final = apply_split(curated, plan)
    assert final.split_counts() == {"train": 11610, "val": 3582, "test": 5980}

    elapsed = _budget(t0, 10.0, "dataset counts")
    print(f"\nACCEPTANCE PASS dataset-counts: BCI 3896/977, BCI-clean 1112/144, "
          f"HER2match 36209->21172->11610/3582/5980 ({elapsed:.1f}s)")


def test_harmonization():
    """crop4 reconstructs bit-exactly; downscale2 preserves the global mean."""
    rng = np.random.default_rng(0)
    a = ImageTensor(np.rint(rng.uniform(size=(3, 1024, 1024)) * 255) / 255)
    b = ImageTensor(np.rint(rng.uniform(size=(3, 1024, 1024)) * 255) / 255)

    quads = harmonize_pair((a, b), "crop4")
    assert all(q[0].data.shape == (3, 512, 512) for q in quads)
    top = np.concatenate([quads[0][0].data, quads[1][0].data], axis=2)
    bottom = np.concatenate([quads[2][0].data, quads[3][0].data], axis=2)
    assert np.array_equal(np.concatenate([top, bottom], axis=1), a.data)
    top_t = np.concatenate([quads[0][1].data, quads[1][1].data], axis=2)
    bottom_t = np.concatenate([quads[2][1].data, quads[3][1].data], axis=2)
    assert np.array_equal(np.concatenate([top_t, bottom_t], axis=1), b.data)

    (down_src, down_tgt), = harmonize_pair((a, b), "downscale2")
    assert down_src.data.shape == (3, 512, 512)
    assert abs(down_src.data.mean() - a.data.mean()) < 1e-12
    assert abs(down_tgt.data.mean() - b.data.mean()) < 1e-12
    print("\nACCEPTANCE PASS harmonization: crop4 bit-exact partition, "
          "downscale2 mean error < 1e-12, both 512x512")


def test_loss_oracle_suite():
    """Each loss matches its brute-force oracle on >=100 random inputs within
    1e-6, and every gradient check passes at relative 1e-4."""
    t0 = time.monotonic()
    rng = np.random.default_rng(123)
    n_cases = 0

    pyr_cfg = PyramidConfig(num_scales=2)
    for _ in range(100):
        a = rng.uniform(size=(1, 8, 8))
        b = rng.uniform(size=(1, 8, 8))
        ours = pyramidal_l1_loss(a, b, pyr_cfg).item()
        assert abs(ours - oracle_pyramidal_l1(a, b, pyr_cfg)) < 1e-6
    n_cases += 100

    nce_cfg = ContrastiveConfig(temperature=0.41, patches_per_image=4)
    for _ in range(100):
        fq = rng.uniform(-1, 1, size=(5, 2, 2))
        fk = rng.uniform(-1, 1, size=(5, 2, 2))
        assert abs(patchnce_loss(fq, fk, nce_cfg).item()
                   - oracle_patchnce(fq, fk, 0.41)) < 1e-6
    n_cases += 100

    for _ in range(100):
        ff, fr, fs = (rng.uniform(-1, 1, size=(5, 2, 2)) for _ in range(3))
        assert abs(asp_loss(ff, fr, fs, nce_cfg).item()
                   - oracle_asp(ff, fr, fs, 0.41)) < 1e-6
    n_cases += 100

    for _ in range(100):
        d_real = rng.uniform(-3, 3, size=(1, 2, 2))
        d_fake = rng.uniform(-3, 3, size=(1, 2, 2))
        g, d = cgan_losses(d_real, d_fake)
        assert abs(g.item() - oracle_bce_g(d_fake)) < 1e-6
        assert abs(d.item() - oracle_bce_d(d_real, d_fake)) < 1e-6
    n_cases += 100

    comp_w = CompositeWeights(lambda_adv=0.6, lambda_mae=1.0, lambda_ssim=0.8,
                              lambda_cls=0.5, ssim_window=5)
    for i in range(100):
        a = rng.uniform(size=(3, 12, 12))
        b = rng.uniform(size=(3, 12, 12))
        d_fake = rng.uniform(-2, 2, size=(1, 3, 3))
        logits = rng.uniform(-2, 2, size=4)
        label = i % 4
        expected = (0.6 * oracle_bce_g(d_fake) + 1.0 * np.abs(a - b).mean()
                    + 0.8 * (1 - metrics.ssim(a, b, window=5))
                    + 0.5 * oracle_ce(logits, label))
        ours = bcistainer_composite(a, b, d_fake, logits, label, comp_w).item()
        assert abs(ours - expected) < 1e-6
    n_cases += 100

    # gradient checks at relative 1e-4 on random 4x4 inputs
    a4 = rng.uniform(0.1, 0.9, size=(3, 4, 4))
    b4 = rng.uniform(0.1, 0.9, size=(3, 4, 4))
    assert ad.check_gradient(
        lambda v: pyramidal_l1_loss(v, b4, pyr_cfg), a4) < 1e-4
    f_fr = rng.uniform(-1, 1, size=(4, 2, 2))
    f_fs = rng.uniform(-1, 1, size=(4, 2, 2))
    f_ff = rng.uniform(-1, 1, size=(4, 2, 2))
    assert ad.check_gradient(
        lambda v: patchnce_loss(v, f_fr, nce_cfg), f_ff) < 1e-4
    frozen = asp_anchor_weights(f_ff, f_fr)
    assert ad.check_gradient(
        lambda v: asp_loss(v, f_fr, f_fs, nce_cfg, fixed_weights=frozen), f_ff) < 1e-4
    d4 = rng.uniform(-2, 2, size=(1, 2, 2))
    assert ad.check_gradient(lambda v: cgan_losses(np.zeros((1, 2, 2)), v)[0], d4) < 1e-4
    assert ad.check_gradient(lambda v: cgan_losses(v, d4)[1], d4 + 0.3) < 1e-4
    logits4 = rng.uniform(-1, 1, size=4)
    w4 = CompositeWeights(ssim_window=3)
    assert ad.check_gradient(
        lambda v: bcistainer_composite(v, b4, d4, logits4, 1, w4), a4) < 1e-4
    assert ad.check_gradient(
        lambda v: bcistainer_composite(a4, b4, v, logits4, 1, w4), d4) < 1e-4
    assert ad.check_gradient(
        lambda v: bcistainer_composite(a4, b4, d4, v, 1, w4), logits4) < 1e-4

    elapsed = _budget(t0, 60.0, "loss oracle suite")
    print(f"\nACCEPTANCE PASS loss-oracles: {n_cases} oracle cases within 1e-6, "
          f"all gradient checks < 1e-4 ({elapsed:.1f}s)")


def test_diffusion_invariants():
    """Bridge boundary exactness, forward-marginal Monte Carlo, reconstruction
    and inversion identities, consistency boundary."""
    t0 = time.monotonic()
    rng = np.random.default_rng(7)

    # BBDM boundary exactness: bit-exact, not merely small
    bridge = df.bridge_schedule(40)
    x0 = rng.uniform(-1, 1, size=(3, 4, 4))
    xT = rng.uniform(-1, 1, size=(3, 4, 4))
    noise = rng.standard_normal((3, 4, 4))
    assert np.array_equal(df.bbdm_forward_sample(x0, xT, 0, bridge, noise), x0)
    assert np.array_equal(df.bbdm_forward_sample(x0, xT, 40, bridge, noise), xT)

    # forward marginals at 5 interior times, 10^4 draws, 3 sigma bounds
    n = 10_000
    x0s, xTs = 0.3, -0.4
    for t in (4, 12, 20, 28, 36):
        draws = df.bbdm_forward_sample(
            np.full(n, x0s), np.full(n, xTs), t, bridge, rng.standard_normal(n))
        m_t = bridge.m[t]
        mean_expected = (1 - m_t) * x0s + m_t * xTs
        var_expected = bridge.delta[t]
        assert abs(draws.mean() - mean_expected) < 3 * math.sqrt(var_expected / n)
        assert abs(draws.var(ddof=1) - var_expected) \
            < 3 * var_expected * math.sqrt(2 / (n - 1))

    alpha = df.linear_beta_schedule(40, 0.01, 0.3)
    for t in (4, 12, 20, 28, 36):
        draws = df.ddpm_forward_sample(
            np.full(n, x0s), t, alpha, rng.standard_normal(n))
        abar = alpha.alpha_bars[t]
        assert abs(draws.mean() - math.sqrt(abar) * x0s) < 3 * math.sqrt((1 - abar) / n)
        assert abs(draws.var(ddof=1) - (1 - abar)) \
            < 3 * (1 - abar) * math.sqrt(2 / (n - 1))

    # reconstruction identity x_t - target = x0 to 1e-6
    for t in (1, 10, 25, 39):
        noise = rng.standard_normal((3, 4, 4))
        x_t = df.bbdm_forward_sample(x0, xT, t, bridge, noise)
        target = df.bbdm_training_target(x0, xT, t, bridge, noise)
        assert np.max(np.abs(x_t - target - x0)) < 1e-6

    # DDIM exact inversion identity to 1e-6
    for t in (1, 10, 25, 40):
        noise = rng.standard_normal((3, 4, 4))
        x_t = df.ddpm_forward_sample(x0, t, alpha, noise)
        assert np.max(np.abs(df.ddim_step(x_t, t, 0, noise, alpha) - x0)) < 1e-6

    # consistency boundary exact at sigma_min for arbitrary raw output
    cfg = df.CmConfig()
    x = rng.uniform(-1, 1, size=(3, 4, 4))
    raw = rng.uniform(-50, 50, size=(3, 4, 4))
    assert np.array_equal(df.cm_apply(x, cfg.sigma_min, raw, cfg), x)

    elapsed = _budget(t0, 120.0, "diffusion invariants")
    print(f"\nACCEPTANCE PASS diffusion-invariants: boundaries bit-exact, "
          f"MC marginals within 3 sigma at 5 times x 10^4 draws, identities < 1e-6 "
          f"({elapsed:.1f}s)")


def test_toy_end_to_end():
    """BBDM and conditional CM reach the target domain on the 2-pixel toy set
    (median over 5 seeds within 0.1); analytic DDIB mean shift is monotone."""
    t0 = time.monotonic()
    pairs = toy_two_domain(16, seed=0)

    bbdm_medians = []
    cm_medians = []
    for seed in range(5):
        r_bbdm = train_bbdm(pairs, steps=500, seed=seed, width=6, levels=1)
        dists = [np.abs(translate(r_bbdm, s, seed=seed + 100).data - t.data).mean()
                 for s, t in pairs]
        bbdm_medians.append(np.median(dists))
        r_cm = train_cm(pairs, steps=1000, seed=seed, width=6, levels=1)
        dists = [np.abs(translate(r_cm, s, seed=seed + 100).data - t.data).mean()
                 for s, t in pairs]
        cm_medians.append(np.median(dists))
    bbdm_score = float(np.median(bbdm_medians))
    cm_score = float(np.median(cm_medians))
    assert bbdm_score < 0.1, f"bbdm toy median {bbdm_score}"
    assert cm_score < 0.1, f"cm toy median {cm_score}"

    # analytic linear-Gaussian DDIB: output mean moves monotonically toward
    # the target-domain mean as the bridge traverses more steps
    betas_full = np.linspace(0.02, 0.2, 50)
    x = -0.5 + 0.2 * np.random.default_rng(7).standard_normal(256)
    means = []
    for steps in (1, 2, 5, 10, 20, 35, 50):
        betas = betas_full[:steps]
        sched = df.AlphaSchedule(steps, betas,
                                 np.concatenate([[1.0], np.cumprod(1 - betas)]))
        src = gaussian_eps_denoiser(-0.5, 0.04, sched)
        tgt = gaussian_eps_denoiser(+0.5, 0.04, sched)
        means.append(df.ddib_translate(x, src, tgt, sched, steps).mean())
    assert all(b >= a - 1e-12 for a, b in zip(means, means[1:])), means
    assert abs(means[-1] - 0.5) < abs(means[0] - 0.5)

    elapsed = _budget(t0, 600.0, "toy end-to-end")
    print(f"\nACCEPTANCE PASS toy-end-to-end: bbdm median {bbdm_score:.3f}, "
          f"cm median {cm_score:.3f} (< 0.1), ddib mean shift monotone "
          f"({elapsed:.1f}s)")


def test_metrics_oracles():
    """SSIM/PSNR/FID/KID/matrix-sqrt/perceptual against stated values."""
    t0 = time.monotonic()
    rng = np.random.default_rng(11)

    a = rng.uniform(size=(3, 16, 16))
    assert metrics.ssim(a, a) == 1.0

    const = metrics.ssim(np.full((1, 16, 16), 0.5), np.full((1, 16, 16), 0.25))
    assert abs(const - (2 * 0.125 + 1e-4) / (0.3125 + 1e-4)) < 1e-4

    b = rng.uniform(size=(3, 16, 16))
    assert abs(metrics.ssim(a, b) - ssim_oracle(a, b)) < 1e-6

    p = metrics.psnr(np.zeros((1, 8, 8)), np.full((1, 8, 8), 16.0), max_value=255.0)
    assert abs(p - 24.05) < 0.01

    stats_a = metrics.FeatureStats(np.zeros(4), np.eye(4), 10)
    stats_b = metrics.FeatureStats(np.ones(4), np.eye(4), 10)
    assert abs(metrics.fid(stats_a, stats_b) - 4.0) < 1e-4

    m = rng.uniform(-1, 1, size=(8, 8))
    m = m.T @ m
    s = metrics.matrix_sqrt_psd(m)
    assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-6

    kid_mean, _ = metrics.kid(np.array([[1.0], [-1.0]]),
                              np.array([[1.0], [-1.0]]),
                              subset_size=2, subsets=1, seed=0)
    assert kid_mean == -8.0

    assert metrics.perceptual_distance(
        a, a, metrics.RandomProjectionExtractor(seed=0)) == 0.0

    elapsed = _budget(t0, 60.0, "metrics oracles")
    print(f"\nACCEPTANCE PASS metrics-oracles: ssim identity/const/window, "
          f"psnr 24.05 dB, fid 4.0, kid -8 exact, sqrt 1e-6, lpips identity 0 "
          f"({elapsed:.1f}s)")


def test_lmm_recovery():
    """Seeded generating process recovered within 3 SEs; OLS equivalence at
    zero variance; stars exactly when p <= 0.001."""
    t0 = time.monotonic()
    table, beta_true = helpers.lmm_synthetic(seed=42)
    X, Zm, Zi, y, _, _ = build_design(table)
    fit = reml_fit(X, Zm, Zi, y)
    assert fit.converged
    assert np.all(np.abs(fit.beta - beta_true) < 3 * fit.se), \
        (fit.beta, beta_true, fit.se)

    fit0 = reml_fit(X, Zm, Zi, y, force_zero_variance=True)
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.max(np.abs(fit0.beta - ols)) < 1e-8

    rows = wald_report(fit, alpha=0.001)
    for row in rows:
        expected_star = row.p <= 0.001
        assert row.starred == expected_star
        assert row.p == pytest.approx(math.erfc(abs(row.z) / math.sqrt(2)), abs=1e-12)

    elapsed = _budget(t0, 30.0, "lmm recovery")
    starred = [r.name for r in rows if r.starred]
    print(f"\nACCEPTANCE PASS lmm-recovery: all |beta - truth| < 3 SE, "
          f"OLS match < 1e-8, starred={starred} ({elapsed:.1f}s)")


def test_cli_determinism(tmp_path):
    """Fixed-seed CLI runs produce byte-identical artifacts."""
    rng = np.random.default_rng(5)

    # eval twice
    gen_dir = tmp_path / "gen"
    gen_dir.mkdir()
    records = []
    for i in range(5):
        tgt = ImageTensor(rng.uniform(size=(3, 16, 16)))
        tgt_path = tmp_path / f"t{i}.png"
        save_image(tgt, tgt_path)
        gen = ImageTensor(np.clip(tgt.data + rng.normal(0, 0.05, tgt.data.shape), 0, 1))
        save_image(gen, gen_dir / f"tile{i}.png")
        records.append(TileRecord(tile_id=f"tile{i}", case_id="c", her2_score="0",
                                  path_source=str(tgt_path), path_target=str(tgt_path),
                                  split="test", status="kept"))
    write_manifest(Manifest(tuple(records), "det", 0.5), tmp_path / "m.tsv")

    def run_eval(out):
        cfg = tmp_path / f"eval_{out}.ini"
        cfg.write_text(
            f"[run]\nseed = 9\noutput_dir = {tmp_path / out}\n"
            f"[eval]\nmanifest = {tmp_path / 'm.tsv'}\n"
            f"generated_dir = {gen_dir}\nssim_window = 7\nkid_subsets = 5\n")
        assert main(["eval", "--config", str(cfg)]) == 0
        return (tmp_path / out / "report.tsv").read_bytes()

    assert run_eval("e1") == run_eval("e2")

    # train twice
    def run_train(out):
        cfg = tmp_path / f"train_{out}.ini"
        cfg.write_text(
            f"[run]\nframework = bbdm\nseed = 4\noutput_dir = {tmp_path / out}\n"
            f"[data]\nsource = toy:two-domain\ntoy_pairs = 8\n"
            f"[train]\nsteps = 40\nwidth = 4\nlevels = 1\n")
        assert main(["train", "--config", str(cfg)]) == 0
        return ((tmp_path / out / "bbdm_model.ckpt").read_bytes(),
                (tmp_path / out / "losses.tsv").read_bytes())

    assert run_train("t1") == run_train("t2")

    # split twice
    manifest = helpers.build_manifest(
        [(f"c{s}{j}", s, 5 + j) for s in helpers.SCORES for j in range(3)])
    write_manifest(manifest, tmp_path / "split_in.tsv")

    def run_split(out):
        out_path = tmp_path / f"{out}.tsv"
        assert main(["dataset", "split", "--fractions", "0.5,0.25,0.25",
                     "--seed", "11", "--manifest", str(tmp_path / "split_in.tsv"),
                     "--out-manifest", str(out_path)]) == 0
        return out_path.read_bytes()

    assert run_split("s1") == run_split("s2")
    print("\nACCEPTANCE PASS determinism: eval, train, and split artifacts "
          "byte-identical across reruns")


def test_curation_session_over_http(tmp_path):
    """The scripted 20-tile review session exercised directly over HTTP:
    12 keeps, 8 drops, two tags, one undo; progress always matches the
    service; the final manifest matches the script exactly."""
    from fastapi.testclient import TestClient

    from stainbench.service import create_app

    rng = np.random.default_rng(3)
    records = []
    for i in range(20):
        src = tmp_path / f"t{i:02d}_src.png"
        tgt = tmp_path / f"t{i:02d}_tgt.png"
        save_image(ImageTensor(rng.uniform(size=(3, 4, 4))), src)
        save_image(ImageTensor(rng.uniform(size=(3, 4, 4))), tgt)
        records.append(TileRecord(tile_id=f"t{i:02d}", case_id=f"case{i % 4}",
                                  her2_score=helpers.SCORES[i % 4],
                                  path_source=str(src), path_target=str(tgt)))
    manifest_path = tmp_path / "curation.tsv"
    write_manifest(Manifest(tuple(records), "session", 0.5), manifest_path)
    client = TestClient(create_app(manifest_path))

    script = []
    for i in range(20):
        if i < 12:
            script.append((f"t{i:02d}", "kept", None))
        elif i == 12:
            script.append((f"t{i:02d}", "dropped", "dark-shade"))
        elif i == 13:
            script.append((f"t{i:02d}", "dropped", "section doubling"))
        else:
            script.append((f"t{i:02d}", "dropped", None))

    kept = dropped = 0
    for tile_id, decision, tag in script:
        body = {"decision": decision}
        if tag:
            body["artifact_tag"] = tag
        resp = client.post(f"/api/tiles/{tile_id}/decision", json=body)
        assert resp.status_code == 200
        kept += decision == "kept"
        dropped += decision == "dropped"
        counts = resp.json()["counts"]
        progress = client.get("/api/progress").json()
        assert counts == progress
        assert progress["kept"] == kept and progress["dropped"] == dropped

    # undo the last decision and redo it
    resp = client.post("/api/tiles/t19/decision", json={"decision": "pending"})
    assert resp.json()["status"] == "pending"
    assert client.get("/api/progress").json()["pending"] == 1
    assert read_manifest_status(manifest_path, "t19") == "pending"
    client.post("/api/tiles/t19/decision", json={"decision": "dropped"})

    final = {}
    from stainbench.imaging import read_manifest
    for rec in read_manifest(manifest_path).records:
        final[rec.tile_id] = (rec.status, rec.artifact_tag)
    for tile_id, decision, tag in script:
        assert final[tile_id][0] == decision
        if tag:
            assert final[tile_id][1] == tag
    counts = client.get("/api/progress").json()
    assert counts == {"total": 20, "pending": 0, "kept": 12, "dropped": 8}
    print("\nACCEPTANCE PASS curation-session: 12 keeps / 8 drops / 2 tags over "
          "HTTP, undo restored pending, progress consistent throughout")


def read_manifest_status(path, tile_id):
    from stainbench.imaging import read_manifest
    return read_manifest(path).by_id()[tile_id].status
