"""Linear mixed-effects comparison of frameworks across datasets.

Model: metric ~ framework * dataset (fixed, treatment-coded) with crossed
random intercepts for model and image. Fitting maximizes the REML criterion
over the two variance-component ratios via a bounded derivative-free search
in log space; each evaluation solves the penalized least-squares system by
dense Cholesky (group counts are small at desk scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import DesignError, NotConvergedError, StainbenchError

FRAMEWORKS = ("DM", "GAN")           # DM is the reference level
DATASETS = ("BCI", "BCI-clean")      # BCI is the reference level
COEF_NAMES = ("intercept", "framework[GAN]", "dataset[BCI-clean]",
              "framework[GAN]:dataset[BCI-clean]")


@dataclass(frozen=True)
class Observation:
    metric_value: float
    framework: str
    dataset: str
    model_id: str
    image_id: str

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise StainbenchError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        if self.dataset not in DATASETS:
            raise StainbenchError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not self.model_id or not self.image_id:
            raise StainbenchError("model_id and image_id must be non-empty")
        if not math.isfinite(self.metric_value):
            raise StainbenchError("metric_value must be finite")


@dataclass(frozen=True)
class ObservationTable:
    rows: tuple[Observation, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if len({r.model_id for r in self.rows}) < 2:
            raise StainbenchError("need at least 2 distinct model_ids")
        if len({r.image_id for r in self.rows}) < 2:
            raise StainbenchError("need at least 2 distinct image_ids")


@dataclass
class MixedModelFit:
    beta: np.ndarray
    se: np.ndarray
    sigma2_model: float
    sigma2_image: float
    sigma2_residual: float
    reml_deviance: float
    converged: bool
    theta: tuple[float, float] = (0.0, 0.0)
    deviance_trace: list[float] = field(default_factory=list)
    coef_names: tuple[str, ...] = COEF_NAMES


def build_design(table: ObservationTable):
    """Treatment-coded fixed design plus 0/1 random-intercept indicators.

    X columns: [1, is_GAN, is_clean, is_GAN*is_clean]; reference cell is
    (DM, BCI). Returns (X, Z_model, Z_image, y, model_levels, image_levels).
    """
    rows = table.rows
    frameworks = {r.framework for r in rows}
    datasets = {r.dataset for r in rows}
    if len(frameworks) < 2:
        raise DesignError("framework has a single level; interaction unidentifiable")
    if len(datasets) < 2:
        raise DesignError("dataset has a single level; interaction unidentifiable")
    model_levels = sorted({r.model_id for r in rows})
    image_levels = sorted({r.image_id for r in rows})
    m_index = {m: i for i, m in enumerate(model_levels)}
    i_index = {im: i for i, im in enumerate(image_levels)}

    n = len(rows)
    X = np.zeros((n, 4))
    Z_model = np.zeros((n, len(model_levels)))
    Z_image = np.zeros((n, len(image_levels)))
    y = np.zeros(n)
    for k, r in enumerate(rows):
        is_gan = 1.0 if r.framework == "GAN" else 0.0
        is_clean = 1.0 if r.dataset == "BCI-clean" else 0.0
        X[k] = (1.0, is_gan, is_clean, is_gan * is_clean)
        Z_model[k, m_index[r.model_id]] = 1.0
        Z_image[k, i_index[r.image_id]] = 1.0
        y[k] = r.metric_value
    return X, Z_model, Z_image, y, model_levels, image_levels


class _RemlWorkspace:
    """Cross-products cached once; every deviance evaluation is O(q^3)."""

    def __init__(self, X, Z_model, Z_image, y):
        self.n, self.p = X.shape
        self.qm = Z_model.shape[1]
        self.qi = Z_image.shape[1]
        self.Gmm = Z_model.T @ Z_model
        self.Gmi = Z_model.T @ Z_image
        self.Gii = Z_image.T @ Z_image
        self.ZmX = Z_model.T @ X
        self.ZiX = Z_image.T @ X
        self.Zmy = Z_model.T @ y
        self.Ziy = Z_image.T @ y
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

    def solve(self, theta: tuple[float, float]):
        """Penalized least squares at fixed ratios theta = (sd_model/sd_e,
        sd_image/sd_e). Returns (deviance, beta, cov_unit, pwrss) with
        cov_unit = Var(beta)/sigma_e^2."""
        tm, ti = theta
        q = self.qm + self.qi
        A = np.empty((q, q))
        A[:self.qm, :self.qm] = tm * tm * self.Gmm
        A[:self.qm, self.qm:] = tm * ti * self.Gmi
        A[self.qm:, :self.qm] = A[:self.qm, self.qm:].T
        A[self.qm:, self.qm:] = ti * ti * self.Gii
        A[np.diag_indices(q)] += 1.0
        ZsX = np.vstack([tm * self.ZmX, ti * self.ZiX])
        Zsy = np.concatenate([tm * self.Zmy, ti * self.Ziy])

        L = cholesky(A, lower=True)
        R_zx = solve_triangular(L, ZsX, lower=True)
        c_u = solve_triangular(L, Zsy, lower=True)
        S = self.XtX - R_zx.T @ R_zx
        try:
            S_factor = cho_factor(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise DesignError(f"singular fixed-effect design: {exc}") from exc
        beta = cho_solve(S_factor, self.Xty - R_zx.T @ c_u)
        u = cho_solve((L, True), Zsy - ZsX @ beta)
        # pwrss = |y - X beta - Zs u|^2 + |u|^2, via cached cross-products
        pwrss = float(
            self.yty - 2.0 * (u @ Zsy + beta @ self.Xty)
            + u @ (A - np.eye(q)) @ u + 2.0 * u @ (ZsX @ beta)
            + beta @ self.XtX @ beta + u @ u
        )
        pwrss = max(pwrss, 1e-300)

        logdet_A = 2.0 * float(np.sum(np.log(np.diag(L))))
        logdet_S = 2.0 * float(np.sum(np.log(np.diag(S_factor[0]))))
        dof = self.n - self.p
        deviance = logdet_A + logdet_S + dof * (1.0 + math.log(2.0 * math.pi * pwrss / dof))
        cov_unit = cho_solve(S_factor, np.eye(self.p))
        return deviance, beta, cov_unit, pwrss


_LOG_BOUNDS = (-12.0, 6.0)


def reml_fit(X, Z_model, Z_image, y, force_zero_variance: bool = False,
             max_iter: int = 400, tol: float = 1e-8) -> MixedModelFit:
    """REML fit of the crossed random-intercept model.

    force_zero_variance pins both ratios at exactly zero, reducing the fit to
    ordinary least squares (used by tests and degenerate data).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if n <= p:
        raise DesignError(f"need more than {p} observations, got {n}")
    workspace = _RemlWorkspace(X, np.asarray(Z_model, dtype=np.float64),
                               np.asarray(Z_image, dtype=np.float64), y)

    def finalize(theta, deviance, beta, cov_unit, pwrss, converged, trace):
        sigma2_e = pwrss / (n - p)
        se = np.sqrt(np.diag(cov_unit) * sigma2_e)
        return MixedModelFit(
            beta=beta,
            se=se,
            sigma2_model=theta[0] ** 2 * sigma2_e,
            sigma2_image=theta[1] ** 2 * sigma2_e,
            sigma2_residual=sigma2_e,
            reml_deviance=deviance,
            converged=converged,
            theta=(float(theta[0]), float(theta[1])),
            deviance_trace=trace,
        )

    if force_zero_variance:
        deviance, beta, cov_unit, pwrss = workspace.solve((0.0, 0.0))
        return finalize((0.0, 0.0), deviance, beta, cov_unit, pwrss, True, [deviance])

    trace: list[float] = []

    def objective(eta):
        theta = (math.exp(eta[0]), math.exp(eta[1]))
        deviance = workspace.solve(theta)[0]
        trace.append(min(deviance, trace[-1]) if trace else deviance)
        return deviance

    result = minimize(
        objective, x0=np.array([-1.0, -1.0]), method="Nelder-Mead",
        bounds=[_LOG_BOUNDS, _LOG_BOUNDS],
        options={"maxiter": max_iter, "fatol": tol, "xatol": 1e-6},
    )
    theta = (math.exp(result.x[0]), math.exp(result.x[1]))
    deviance, beta, cov_unit, pwrss = workspace.solve(theta)
    return finalize(theta, deviance, beta, cov_unit, pwrss, bool(result.success), trace)


@dataclass(frozen=True)
class WaldRow:
    name: str
    estimate: float
    se: float
    z: float
    p: float
    starred: bool


def wald_report(fit: MixedModelFit, alpha: float = 0.001) -> list[WaldRow]:
    """z = beta/se with two-sided normal p-values; stars mark p <= alpha."""
    if not fit.converged:
        raise NotConvergedError("cannot report significance from a non-converged fit")
    rows = []
    for name, b, s in zip(fit.coef_names, fit.beta, fit.se):
        z = float(b / s)
        p = float(math.erfc(abs(z) / math.sqrt(2.0)))
        rows.append(WaldRow(name, float(b), float(s), z, p, p <= alpha))
    return rows


def write_wald_table(rows: list[WaldRow], path: str | Path,
                     metric: str = "", extra_header: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if metric:
        lines.append(f"#metric={metric}\tdf_method=wald-z{extra_header}")
    lines.append("#fields\tcoefficient\testimate\tse\tz\tp\tstar")
    for r in rows:
        lines.append(f"{r.name}\t{r.estimate:.10g}\t{r.se:.10g}\t{r.z:.10g}"
                     f"\t{r.p:.6g}\t{'*' if r.starred else ''}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- joining metric reports with a run registry ---

@dataclass(frozen=True)
class RunEntry:
    model_id: str
    framework: str
    dataset: str
    report_path: str


def read_run_registry(path: str | Path) -> list[RunEntry]:
    """Registry lines: model_id<TAB>framework<TAB>dataset<TAB>report_path."""
    path = Path(path)
    entries = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise StainbenchError(
                f"{path}:{line_no}: expected model_id<TAB>framework<TAB>dataset<TAB>report"
            )
        entries.append(RunEntry(*parts))
    if not entries:
        raise StainbenchError(f"{path}: empty run registry")
    return entries


def observations_from_reports(entries: list[RunEntry], metric: str) -> ObservationTable:
    from .metrics import read_report
    rows = []
    for entry in entries:
        report = read_report(entry.report_path)
        for tile in report.rows:
            value = getattr(tile, metric)
            if math.isinf(value):
                continue  # identical pairs carry no usable PSNR information
            rows.append(Observation(value, entry.framework, entry.dataset,
                                    entry.model_id, tile.tile_id))
    return ObservationTable(tuple(rows))
