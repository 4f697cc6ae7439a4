"""mixed-effects fitting: design coding, REML recovery of a known generating
process, degenerate equivalences, and Wald significance."""

import numpy as np
import pytest

from helpers import lmm_synthetic
from stainbench.errors import DesignError, NotConvergedError, StainbenchError
from stainbench.lmm import (
    COEF_NAMES,
    MixedModelFit,
    Observation,
    ObservationTable,
    build_design,
    read_run_registry,
    reml_fit,
    wald_report,
    write_wald_table,
)


def small_table(seed=0, n_img=30):
    rng = np.random.default_rng(seed)
    rows = []
    for mi in range(4):
        fw = "GAN" if mi >= 2 else "DM"
        for ds in ("BCI", "BCI-clean"):
            for i in range(n_img):
                y = rng.normal(0.5, 0.05)
                rows.append(Observation(float(y), fw, ds, f"m{mi}", f"i{i}"))
    return ObservationTable(tuple(rows))


class TestBuildDesign:
    def test_row_coding(self):
        table = ObservationTable((
            Observation(1.0, "GAN", "BCI-clean", "m1", "i1"),
            Observation(2.0, "DM", "BCI", "m2", "i2"),
        ))
        X, Zm, Zi, y, models, images = build_design(table)
        assert np.array_equal(X[0], [1, 1, 1, 1])
        assert np.array_equal(X[1], [1, 0, 0, 0])
        assert np.array_equal(y, [1.0, 2.0])

    def test_full_factorial(self):
        rows = []
        for k, (fw, ds) in enumerate([("DM", "BCI"), ("DM", "BCI-clean"),
                                      ("GAN", "BCI"), ("GAN", "BCI-clean")]):
            rows.append(Observation(float(k), fw, ds, f"m{k % 2}", f"i{k // 2}"))
        X = build_design(ObservationTable(tuple(rows)))[0]
        expected = np.array([
            [1, 0, 0, 0],
            [1, 0, 1, 0],
            [1, 1, 0, 0],
            [1, 1, 1, 1],
        ], dtype=float)
        assert np.array_equal(X, expected)

    def test_indicator_matrices(self):
        table = small_table()
        X, Zm, Zi, y, models, images = build_design(table)
        assert np.all(Zm.sum(axis=1) == 1) and np.all(Zi.sum(axis=1) == 1)
        assert Zm.shape[1] == 4 and Zi.shape[1] == 30

    def test_single_level_rejected(self):
        rows = tuple(Observation(1.0, "DM", ds, f"m{i}", f"i{i}")
                     for i, ds in enumerate(["BCI", "BCI-clean"] * 2))
        with pytest.raises(DesignError):
            build_design(ObservationTable(rows))

    def test_invalid_levels_rejected(self):
        with pytest.raises(StainbenchError):
            Observation(1.0, "VAE", "BCI", "m", "i")
        with pytest.raises(StainbenchError):
            Observation(1.0, "DM", "HER2match", "m", "i")


class TestRemlFit:
    def test_recovers_generating_process(self):
        table, beta_true = lmm_synthetic(seed=42)
        X, Zm, Zi, y, _, _ = build_design(table)
        fit = reml_fit(X, Zm, Zi, y)
        assert fit.converged
        assert np.all(np.abs(fit.beta - beta_true) < 3 * fit.se)
        assert fit.sigma2_model >= 0 and fit.sigma2_image >= 0
        assert np.sqrt(fit.sigma2_residual) == pytest.approx(0.03, rel=0.15)
        assert np.sqrt(fit.sigma2_image) == pytest.approx(0.05, rel=0.25)

    def test_zero_variance_data_matches_ols(self):
        rng = np.random.default_rng(3)
        table = small_table(seed=3)
        X, Zm, Zi, y, _, _ = build_design(table)
        beta = np.array([0.5, 0.1, -0.05, 0.08])
        y = X @ beta + rng.normal(0, 0.03, len(y))
        fit = reml_fit(X, Zm, Zi, y)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        assert np.max(np.abs(fit.beta - ols)) < 1e-6

    def test_forced_zero_equals_ols_exactly(self):
        rng = np.random.default_rng(4)
        table = small_table(seed=4)
        X, Zm, Zi, y, _, _ = build_design(table)
        y = y + rng.normal(0, 0.1, len(y))
        fit = reml_fit(X, Zm, Zi, y, force_zero_variance=True)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        assert np.max(np.abs(fit.beta - ols)) < 1e-8

    def test_duplicating_rows_keeps_beta_shrinks_se(self):
        table, _ = lmm_synthetic(seed=11, n_images=40)
        X, Zm, Zi, y, _, _ = build_design(table)
        fit = reml_fit(X, Zm, Zi, y)
        fit2 = reml_fit(np.vstack([X, X]), np.vstack([Zm, Zm]),
                        np.vstack([Zi, Zi]), np.concatenate([y, y]))
        assert np.max(np.abs(fit2.beta - fit.beta)) < 1e-8
        assert np.all(fit2.se < fit.se)

    def test_row_permutation_invariance(self):
        table, _ = lmm_synthetic(seed=12, n_images=30)
        X, Zm, Zi, y, _, _ = build_design(table)
        fit = reml_fit(X, Zm, Zi, y)
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(y))
        fit_p = reml_fit(X[perm], Zm[perm], Zi[perm], y[perm])
        assert np.max(np.abs(fit_p.beta - fit.beta)) < 1e-8
        assert np.max(np.abs(fit_p.se - fit.se)) < 1e-8

    def test_relabeling_invariance(self):
        table, _ = lmm_synthetic(seed=13, n_images=25)
        renamed = ObservationTable(tuple(
            Observation(r.metric_value, r.framework, r.dataset,
                        f"zzz-{r.model_id}", f"q-{r.image_id}")
            for r in table.rows))
        fit_a = reml_fit(*build_design(table)[:4])
        fit_b = reml_fit(*build_design(renamed)[:4])
        assert np.max(np.abs(fit_a.beta - fit_b.beta)) < 1e-10

    def test_constant_shift_moves_only_intercept(self):
        table, _ = lmm_synthetic(seed=14, n_images=25)
        X, Zm, Zi, y, _, _ = build_design(table)
        fit = reml_fit(X, Zm, Zi, y)
        fit_c = reml_fit(X, Zm, Zi, y + 2.5)
        assert fit_c.beta[0] - fit.beta[0] == pytest.approx(2.5, abs=1e-7)
        assert np.max(np.abs(fit_c.beta[1:] - fit.beta[1:])) < 1e-7

    def test_deviance_trace_monotone(self):
        table, _ = lmm_synthetic(seed=15, n_images=25)
        X, Zm, Zi, y, _, _ = build_design(table)
        fit = reml_fit(X, Zm, Zi, y)
        trace = fit.deviance_trace
        assert all(a >= b for a, b in zip(trace, trace[1:]))

    def test_deterministic(self):
        table, _ = lmm_synthetic(seed=16, n_images=20)
        X, Zm, Zi, y, _, _ = build_design(table)
        f1 = reml_fit(X, Zm, Zi, y)
        f2 = reml_fit(X, Zm, Zi, y)
        assert np.array_equal(f1.beta, f2.beta) and f1.reml_deviance == f2.reml_deviance


class TestWald:
    def _fit(self, beta, se):
        return MixedModelFit(beta=np.asarray(beta), se=np.asarray(se),
                             sigma2_model=0.0, sigma2_image=0.0,
                             sigma2_residual=1.0, reml_deviance=0.0,
                             converged=True)

    def test_z_ten_starred(self):
        rows = wald_report(self._fit([0.1] * 4, [0.01] * 4))
        assert all(r.z == pytest.approx(10.0) for r in rows)
        assert all(r.starred for r in rows)
        assert rows[0].p < 1e-20

    def test_zero_beta_unstarred(self):
        rows = wald_report(self._fit([0.0, 0.1, 0.0, 0.0], [0.5] * 4))
        assert rows[0].p == 1.0 and not rows[0].starred

    def test_alpha_one_stars_everything(self):
        rows = wald_report(self._fit([0.001] * 4, [1.0] * 4), alpha=1.0)
        assert all(r.starred for r in rows)

    def test_exact_threshold(self):
        # z = 3.2905 has p ~= 0.001: check the boundary convention p <= alpha
        import math
        z = 3.2905267314918945
        p = math.erfc(z / math.sqrt(2))
        rows = wald_report(self._fit([z, 0, 0, 0], [1.0] * 4), alpha=p)
        assert rows[0].starred

    def test_non_converged_rejected(self):
        fit = self._fit([0.1] * 4, [0.01] * 4)
        fit.converged = False
        with pytest.raises(NotConvergedError):
            wald_report(fit)

    def test_table_io(self, tmp_path):
        rows = wald_report(self._fit([0.5, 0.1, -0.05, 0.08], [0.01] * 4))
        write_wald_table(rows, tmp_path / "w.tsv", metric="ssim")
        text = (tmp_path / "w.tsv").read_text()
        assert "intercept" in text and "#metric=ssim" in text
        assert text.count("*") == 4


class TestRegistry:
    def test_read(self, tmp_path):
        (tmp_path / "reg.tsv").write_text(
            "#comment\nm1\tGAN\tBCI\t/tmp/r1.tsv\nm2\tDM\tBCI-clean\t/tmp/r2.tsv\n")
        entries = read_run_registry(tmp_path / "reg.tsv")
        assert len(entries) == 2
        assert entries[0].model_id == "m1" and entries[1].dataset == "BCI-clean"

    def test_malformed(self, tmp_path):
        (tmp_path / "reg.tsv").write_text("m1\tGAN\n")
        with pytest.raises(StainbenchError):
            read_run_registry(tmp_path / "reg.tsv")

    def test_coef_names_fixed(self):
        assert COEF_NAMES[0] == "intercept" and len(COEF_NAMES) == 4
